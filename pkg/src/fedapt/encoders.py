"""Toy CLIP-like dual encoder with deep prompt slots.

Text side: each class is ``L`` pseudo-word embeddings; the trainable text
prompt occupies ``m`` extra positions (prefix by default).  Image side: a
pooling token, ``m_v`` visual prompt positions, then the patch tokens.

Deep prompting replaces the prompt positions with fresh tokens before each of
the first ``J`` blocks; after block ``J`` they travel as ordinary tokens.
Both towers read out a single token (last class-name token / pooling token),
project to the shared space and L2-normalise.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import ConfigError, Tensor


class ContractError(ValueError):
    """A caller broke an input contract (pixel range, labels, empty class set)."""


@dataclass(frozen=True)
class EncoderConfig:
    d_text: int = 64
    d_vis: int = 96
    d_shared: int = 64
    layers_total: int = 10
    J: int = 6
    heads: int = 4
    m: int = 2
    patch_size: int = 4
    image_size: int = 16
    channels: int = 3
    tau: float = 0.05
    token_len: int = 4
    vocab: int = 64
    mlp_ratio: int = 2
    prompt_position: str = "prefix"
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        if not 1 <= self.J <= self.layers_total:
            raise ConfigError(f"need 1 <= J <= layers_total, got J={self.J}, layers={self.layers_total}")
        for name in ("d_text", "d_vis"):
            if getattr(self, name) % self.heads:
                raise ConfigError(f"heads={self.heads} does not divide {name}={getattr(self, name)}")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError("patch_size must divide image_size")
        if self.prompt_position not in ("prefix", "suffix"):
            raise ConfigError(f"prompt_position must be prefix or suffix, got {self.prompt_position!r}")
        if not self.pixel_std > 0:
            raise ConfigError("pixel_std must be positive")
        if self.m > self.token_len:
            raise ConfigError("class-tail beacon extraction needs m <= token_len")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _block_shapes(prefix: str, d: int, ratio: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
        f"{prefix}.qkv.w": (d, 3 * d), f"{prefix}.qkv.b": (3 * d,),
        f"{prefix}.proj.w": (d, d), f"{prefix}.proj.b": (d,),
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
        f"{prefix}.fc1.w": (d, ratio * d), f"{prefix}.fc1.b": (ratio * d,),
        f"{prefix}.fc2.w": (ratio * d, d), f"{prefix}.fc2.b": (d,),
    }


def weight_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "text.tok": (cfg.vocab, cfg.d_text),
        "text.pos": (cfg.token_len, cfg.d_text),
        "text.ln_f.g": (cfg.d_text,), "text.ln_f.b": (cfg.d_text,),
        "text.head": (cfg.d_text, cfg.d_shared),
        "img.patch.w": (cfg.patch_dim, cfg.d_vis), "img.patch.b": (cfg.d_vis,),
        "img.pos": (cfg.n_patches, cfg.d_vis),
        "img.pool": (1, cfg.d_vis),
        "img.ln_f.g": (cfg.d_vis,), "img.ln_f.b": (cfg.d_vis,),
        "img.head": (cfg.d_vis, cfg.d_shared),
    }
    for i in range(cfg.layers_total):
        shapes.update(_block_shapes(f"text.l{i}", cfg.d_text, cfg.mlp_ratio))
        shapes.update(_block_shapes(f"img.l{i}", cfg.d_vis, cfg.mlp_ratio))
    return shapes


def init_weights(cfg: EncoderConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    resid = 1.0 / np.sqrt(2 * cfg.layers_total)
    for name, shape in sorted(weight_shapes(cfg).items()):
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif leaf in ("tok", "pos", "pool"):
            arr = rng.normal(0.0, 0.5, shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            if name.endswith("proj.w") or name.endswith("fc2.w"):
                arr *= resid
        out[name] = arr.astype(dtype)
    return out


class FrozenWeights:
    """Immutable named arrays of both towers plus the config that shaped them."""

    def __init__(self, cfg: EncoderConfig, arrays: Mapping[str, np.ndarray]):
        expected = weight_shapes(cfg)
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise ConfigError(f"weight names mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        self.cfg = cfg
        self.arrays: dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            if arr.shape != expected[name]:
                raise T.ShapeError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            a = np.array(arr, copy=True)
            a.flags.writeable = False
            self.arrays[name] = a

    @property
    def dtype(self):
        return self.arrays["text.tok"].dtype

    def astype(self, dtype) -> "FrozenWeights":
        return FrozenWeights(self.cfg, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def digest(self) -> str:
        return checkpoint.digest(self.arrays)

    def save(self, path, meta: Mapping | None = None):
        info = {"encoder": self.cfg.to_dict(), **(meta or {})}
        return checkpoint.save(path, self.arrays, info)

    @classmethod
    def load(cls, path) -> tuple["FrozenWeights", dict]:
        arrays, meta = checkpoint.load(path)
        cfg = EncoderConfig(**meta["encoder"])
        return cls(cfg, arrays), meta


class ClassTokenSequence(NamedTuple):
    class_id: int
    token_ids: np.ndarray  # (L,)
    embeddings: np.ndarray  # (L, d_text)


class TextEncoding(NamedTuple):
    z: Tensor  # (C, d_shared), unit rows
    states: np.ndarray | None  # (C, J, T, d_text), block outputs of layers 1..J


def _block(h: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    x = T.layer_norm(h, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    qkv = T.linear(x, p[f"{prefix}.qkv.w"], p[f"{prefix}.qkv.b"])
    d = h.shape[-1]
    q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    att = T.multi_head_attention(q, k, v, heads)
    h = h + T.linear(att, p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"])
    x = T.layer_norm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    x = T.relu(T.linear(x, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"]))
    return h + T.linear(x, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])


def _replace(h: Tensor, start: int, tokens: Tensor) -> Tensor:
    """Overwrite positions ``start:start+n`` of every sequence with ``tokens`` (n, d)."""
    n = tokens.shape[0]
    batch = h.shape[0]
    fresh = T.broadcast_to(tokens, (batch,) + tokens.shape)
    parts = []
    if start > 0:
        parts.append(h[:, :start])
    parts.append(fresh)
    if start + n < h.shape[1]:
        parts.append(h[:, start + n:])
    return T.concat(parts, axis=1)


class DualEncoder:
    """Forward passes over frozen (or, during pretraining, trainable) weights."""

    def __init__(self, weights: FrozenWeights | Mapping[str, Tensor], cfg: EncoderConfig | None = None):
        if isinstance(weights, FrozenWeights):
            self.cfg = weights.cfg
            self.weights = weights
            self.p = {k: Tensor(v) for k, v in weights.arrays.items()}
        else:
            if cfg is None:
                raise ConfigError("a raw tensor mapping needs an explicit EncoderConfig")
            self.cfg = cfg
            self.weights = None
            self.p = dict(weights)

    @property
    def dtype(self):
        return self.p["text.tok"].dtype

    # -- text ---------------------------------------------------------------

    def class_tokens(self, class_ids: Sequence[int], seed: int) -> np.ndarray:
        return np.stack([token_ids_for_class(c, seed, self.cfg) for c in class_ids])

    def class_sequence(self, class_id: int, seed: int) -> ClassTokenSequence:
        ids = token_ids_for_class(class_id, seed, self.cfg)
        return ClassTokenSequence(int(class_id), ids, self.p["text.tok"].data[ids])

    def prompt_slice(self, prompted: bool) -> tuple[slice, slice]:
        """Positions of (prompt tokens, class tokens) in a text sequence."""
        m, L = self.cfg.m, self.cfg.token_len
        if not prompted:
            return slice(0, 0), slice(0, L)
        if self.cfg.prompt_position == "prefix":
            return slice(0, m), slice(m, m + L)
        return slice(L, L + m), slice(0, L)

    def encode_text(self, token_ids: np.ndarray, prompts: Tensor | None = None,
                    return_states: bool = False) -> TextEncoding:
        """Embed classes given as an (C, L) array of token ids."""
        cfg, p = self.cfg, self.p
        token_ids = np.asarray(token_ids)
        if token_ids.ndim != 2 or token_ids.shape[1] != cfg.token_len:
            raise T.ShapeError(f"token ids must be (C, {cfg.token_len}), got {token_ids.shape}")
        if token_ids.shape[0] == 0:
            raise ContractError("empty class set")
        if prompts is not None and (prompts.ndim != 3 or prompts.shape[0] != cfg.J):
            raise ConfigError(f"text prompts need {cfg.J} layers, got shape {prompts.shape}")
        if prompts is not None and prompts.shape[1:] != (cfg.m, cfg.d_text):
            raise T.ShapeError(f"text prompts shape {prompts.shape}, expected ({cfg.J}, {cfg.m}, {cfg.d_text})")
        n = token_ids.shape[0]
        words = T.take(p["text.tok"], token_ids) + p["text.pos"]
        pslice, cslice = self.prompt_slice(prompts is not None)
        if prompts is None:
            h = words
        else:
            fresh = T.broadcast_to(prompts[0], (n, cfg.m, cfg.d_text))
            h = T.concat([fresh, words] if cfg.prompt_position == "prefix" else [words, fresh], axis=1)
        states = [] if return_states else None
        for j in range(cfg.layers_total):
            if prompts is not None and 0 < j < cfg.J:
                h = _replace(h, pslice.start, prompts[j])
            h = _block(h, p, f"text.l{j}", cfg.heads)
            if return_states and j < cfg.J:
                states.append(h.data)
        read = h[:, cslice.stop - 1]
        read = T.layer_norm(read, p["text.ln_f.g"], p["text.ln_f.b"])
        z = T.l2_normalize(T.linear(read, p["text.head"]))
        st = np.stack(states, axis=1) if return_states else None
        return TextEncoding(z, st)

    # -- image --------------------------------------------------------------

    def patchify(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        b = x.shape[0]
        g, ps = cfg.image_size // cfg.patch_size, cfg.patch_size
        x = (x - cfg.pixel_mean) * (1.0 / cfg.pixel_std)
        x = T.reshape(x, (b, g, ps, g, ps, cfg.channels))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        return T.reshape(x, (b, g * g, cfg.patch_dim))

    def encode_image(self, x, vprompts: Tensor | None = None) -> Tensor:
        """Embed a batch (B, H, W, C) of images in [0, 1]; returns (B, d_shared)."""
        cfg, p = self.cfg, self.p
        x = T.as_tensor(x)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1:] != cfg.image_shape:
            raise T.ShapeError(f"image batch shape {x.shape}, expected (B, {cfg.image_shape})")
        if x.data.min() < 0.0 or x.data.max() > 1.0:
            raise ContractError("pixel values must lie in [0, 1]; clamp before encoding")
        if vprompts is not None:
            if vprompts.ndim != 3 or vprompts.shape[0] != cfg.J or vprompts.shape[2] != cfg.d_vis:
                raise ConfigError(f"visual prompts need shape ({cfg.J}, m_v, {cfg.d_vis}), got {vprompts.shape}")
        b = x.shape[0]
        tokens = T.linear(self.patchify(x), p["img.patch.w"], p["img.patch.b"]) + p["img.pos"]
        pool = T.broadcast_to(p["img.pool"], (b, 1, cfg.d_vis))
        parts = [pool]
        if vprompts is not None:
            parts.append(T.broadcast_to(vprompts[0], (b,) + vprompts.shape[1:]))
        parts.append(tokens)
        h = T.concat(parts, axis=1)
        for j in range(cfg.layers_total):
            if vprompts is not None and 0 < j < cfg.J:
                h = _replace(h, 1, vprompts[j])
            h = _block(h, p, f"img.l{j}", cfg.heads)
        read = T.layer_norm(h[:, 0], p["img.ln_f.g"], p["img.ln_f.b"])
        z = T.l2_normalize(T.linear(read, p["img.head"]))
        return z[0] if single else z

    # -- heads --------------------------------------------------------------

    def logits(self, z_img: Tensor, z_text: Tensor) -> Tensor:
        """Cosine similarities over temperature; rows are images."""
        if z_text.shape[0] == 0:
            raise ContractError("empty class set")
        return T.matmul(z_img, T.transpose(z_text, (1, 0))) * (1.0 / self.cfg.tau)


def class_probabilities(z_img: Tensor, z_text: Tensor, tau: float) -> Tensor:
    """Zero-shot class distribution from unit embeddings.

    ``z_img`` (B, d) or (d,); ``z_text`` (C, d).  Rows sum to one.
    """
    if not tau > 0:
        raise ContractError("tau must be positive")
    if z_text.shape[0] == 0:
        raise ContractError("empty class set")
    cos = T.matmul(z_img, T.transpose(z_text, (1, 0)))
    return T.softmax(cos * (1.0 / tau))


def task_loss(encoder: DualEncoder, x, y, token_ids: np.ndarray, prompts: Tensor | None,
              vprompts: Tensor | None, reduction: str = "mean") -> Tensor:
    """Cross-entropy of the zero-shot head over the given classes.

    ``y`` indexes rows of ``token_ids`` (local class positions).
    """
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n_cls = np.asarray(token_ids).shape[0]
    if y.size and (y.min() < 0 or y.max() >= n_cls):
        raise ContractError(f"label outside [0, {n_cls})")
    z_t = encoder.encode_text(token_ids, prompts).z
    z_i = encoder.encode_image(x, vprompts)
    if z_i.ndim == 1:
        z_i = T.reshape(z_i, (1, z_i.shape[0]))
    return T.cross_entropy(encoder.logits(z_i, z_t), y, reduction=reduction)


def token_ids_for_class(class_id: int, seed: int, cfg: EncoderConfig) -> np.ndarray:
    """Deterministic, injective map from class id to ``token_len`` vocabulary ids.

    Uses an affine bijection ``k -> (a*k + b) mod V**L`` with ``a`` coprime to
    ``V**L`` and writes the result in base ``V``.
    """
    V, L = cfg.vocab, cfg.token_len
    space = V ** L
    if not 0 <= class_id < space:
        raise ContractError(f"class id {class_id} outside [0, {space})")
    rng = np.random.default_rng([seed, 7919])
    while True:
        a = int(rng.integers(1, space))
        if np.gcd(a, space) == 1:
            break
    b = int(rng.integers(0, space))
    k = (a * int(class_id) + b) % space
    digits = []
    for _ in range(L):
        digits.append(k % V)
        k //= V
    return np.array(digits[::-1], dtype=np.int64)
