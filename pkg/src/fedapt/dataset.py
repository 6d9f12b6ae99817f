"""Synthetic image/label universe and contrastive pretraining of the backbone.

Each class is a fixed mixture of two coloured sinusoidal gratings.  A sample
draws a random contrast and brightness around that template and adds pixel
noise, so a class is a noisy cloud around its template.  All randomness is
keyed by ``(seed, class, split offset + sample index)``; datasets are pure
functions of their spec.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from . import tensor as T
from .encoders import ContractError, DualEncoder, EncoderConfig, FrozenWeights, init_weights
from .tensor import ConfigError, Tensor

log = logging.getLogger(__name__)

SPLIT_OFFSETS = {"pretrain": 0, "train": 1_000_000, "val": 2_000_000, "test": 3_000_000}
SHIFT_KINDS = ("contrast", "blur", "color-swap", "noise-boost")
SHIFT_RANGE = {"contrast": (0.0, 1.0), "blur": (0.0, 3.0), "color-swap": (0.0, 1.0), "noise-boost": (0.0, 0.5)}


@dataclass(frozen=True)
class DomainShiftSpec:
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        lo, hi = SHIFT_RANGE[self.kind]
        if not lo <= self.magnitude <= hi:
            raise ConfigError(f"{self.kind} magnitude {self.magnitude} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class SyntheticSpec:
    C: int = 40
    image_size: int = 16
    channels: int = 3
    amplitude: float = 0.04
    noise_std: float = 0.03
    contrast_jitter: float = 0.3
    brightness_jitter: float = 0.05
    seed: int = 0
    shift: DomainShiftSpec | None = None

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Dataset(NamedTuple):
    images: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (n,) global class ids
    index: np.ndarray  # (n,) sample index within the class/split

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask_or_idx) -> "Dataset":
        return Dataset(self.images[mask_or_idx], self.labels[mask_or_idx], self.index[mask_or_idx])


def class_template(spec: SyntheticSpec, class_id: int) -> np.ndarray:
    """Zero-mean, unit-std template (H, W, C) of one class."""
    if not 0 <= class_id < spec.C:
        raise ContractError(f"class id {class_id} outside [0, {spec.C})")
    rng = np.random.default_rng([spec.seed, 101, class_id])
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s) / s, np.arange(s) / s, indexing="ij")
    img = np.zeros((s, s, spec.channels))
    for _ in range(2):
        freq = rng.uniform(1.0, 4.0)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        color = rng.normal(size=spec.channels)
        color /= np.linalg.norm(color)
        wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += wave[..., None] * color
    img -= img.mean()
    return img / img.std()


def _render(spec: SyntheticSpec, template: np.ndarray, class_id: int, sample: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 211, class_id, sample])
    contrast = 1.0 + spec.contrast_jitter * rng.uniform(-1.0, 1.0)
    bright = spec.brightness_jitter * rng.uniform(-1.0, 1.0)
    noise = rng.normal(size=template.shape)
    amp = spec.amplitude
    noise_std = spec.noise_std
    shift = spec.shift
    if shift is not None and shift.magnitude > 0:
        if shift.kind == "contrast":
            amp = amp * (1.0 - 0.7 * shift.magnitude)
        elif shift.kind == "noise-boost":
            noise_std = noise_std + shift.magnitude * 0.2
        elif shift.kind == "color-swap":
            template = (1.0 - shift.magnitude) * template + shift.magnitude * template[..., ::-1]
    img = 0.5 + bright + amp * contrast * template + noise_std * noise
    if shift is not None and shift.kind == "blur" and shift.magnitude > 0:
        img = ndimage.gaussian_filter(img, sigma=(shift.magnitude, shift.magnitude, 0), mode="wrap")
    return np.clip(img, 0.0, 1.0)


def generate_dataset(spec: SyntheticSpec, split: str, count_per_class: int,
                     classes=None) -> Dataset:
    if count_per_class < 1:
        raise ContractError("count_per_class must be >= 1")
    if split not in SPLIT_OFFSETS:
        raise ConfigError(f"unknown split {split!r}")
    offset = SPLIT_OFFSETS[split]
    classes = range(spec.C) if classes is None else classes
    images, labels, index = [], [], []
    for c in classes:
        tmpl = class_template(spec, c)
        for i in range(count_per_class):
            images.append(_render(spec, tmpl, c, offset + i))
            labels.append(c)
            index.append(i)
    return Dataset(np.stack(images).astype(np.float32), np.array(labels, dtype=np.int64),
                   np.array(index, dtype=np.int64))


def sample_shots(data: Dataset, K: int, seed: int) -> Dataset:
    """Exactly ``K`` examples of every class present, chosen per seed."""
    rng = np.random.default_rng([seed, 307])
    keep = []
    for c in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == c)
        if K > idx.size:
            raise ConfigError(f"class {c} has {idx.size} samples, {K} shots requested")
        keep.append(np.sort(rng.choice(idx, size=K, replace=False)))
    return data.subset(np.concatenate(keep))


def shift_domain(spec: SyntheticSpec, shift: DomainShiftSpec) -> SyntheticSpec:
    if not isinstance(shift, DomainShiftSpec):
        raise ConfigError("shift must be a DomainShiftSpec")
    return dataclasses.replace(spec, shift=shift)


def class_token_sequence(encoder: DualEncoder, class_id: int, seed: int, C: int):
    if not 0 <= class_id < C:
        raise ContractError(f"class id {class_id} outside [0, {C})")
    return encoder.class_sequence(class_id, seed)


# ---------------------------------------------------------------------------
# pretraining


class PretrainGateError(RuntimeError):
    pass


class _Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.98), eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)


def zero_shot_accuracy(encoder: DualEncoder, data: Dataset, token_seed: int, C: int,
                       batch: int = 256) -> float:
    z_t = encoder.encode_text(encoder.class_tokens(range(C), token_seed)).z
    correct = 0
    for lo in range(0, len(data), batch):
        z_i = encoder.encode_image(data.images[lo:lo + batch])
        pred = encoder.logits(z_i, z_t).data.argmax(axis=1)
        correct += int((pred == data.labels[lo:lo + batch]).sum())
    return correct / len(data)


def pretrain_backbone(spec: SyntheticSpec, enc_cfg: EncoderConfig, epochs: int, seed: int,
                      per_class: int = 64, lr: float = 2e-3, gate_factor: float = 5.0,
                      test_per_class: int = 10) -> tuple[FrozenWeights, dict]:
    """Symmetric contrastive training of both towers, then freeze.

    One epoch visits every pretraining sample once; each step holds one image
    per class so the image/text pairing is a permutation.  Raises
    :class:`PretrainGateError` when held-out zero-shot accuracy is below
    ``gate_factor`` times chance.
    """
    if epochs < 1:
        raise ContractError("pretraining needs epochs >= 1")
    if (spec.image_size, spec.channels) != (enc_cfg.image_size, enc_cfg.channels):
        raise ConfigError("dataset and encoder disagree on image shape")
    data = generate_dataset(spec, "pretrain", per_class)
    params = {k: Tensor(v, requires_grad=True) for k, v in init_weights(enc_cfg, seed).items()}
    enc = DualEncoder(params, enc_cfg)
    opt = _Adam(params, lr)
    rng = np.random.default_rng([seed, 401])
    token_ids = enc.class_tokens(range(spec.C), spec.seed)
    by_class = data.images.reshape(spec.C, per_class, *data.images.shape[1:])
    steps = epochs * per_class
    names = list(params)
    for step in range(steps):
        cur_lr = lr * 0.5 * (1 + np.cos(np.pi * step / steps))
        pick = rng.integers(0, per_class, size=spec.C)
        x = by_class[np.arange(spec.C), pick]
        z_t = enc.encode_text(token_ids).z
        z_i = enc.encode_image(x)
        logits = enc.logits(z_i, z_t)
        labels = np.arange(spec.C)
        loss = (T.cross_entropy(logits, labels) + T.cross_entropy(T.transpose(logits, (1, 0)), labels)) * 0.5
        grads = T.grad(loss, [params[k] for k in names])
        opt.step({k: grads[params[k]] for k in names}, cur_lr)
        if step % 100 == 0:
            log.debug("pretrain step %d loss %.4f", step, loss.item())
    weights = FrozenWeights(enc_cfg, {k: p.data for k, p in params.items()})
    test = generate_dataset(spec, "test", test_per_class)
    acc = zero_shot_accuracy(DualEncoder(weights), test, spec.seed, spec.C)
    report = {"zero_shot_acc": acc, "chance": 1.0 / spec.C, "steps": steps}
    if acc < gate_factor / spec.C:
        raise PretrainGateError(
            f"zero-shot accuracy {acc:.3f} below gate {gate_factor / spec.C:.3f} "
            f"({gate_factor}x chance over {spec.C} classes)")
    return weights, report
