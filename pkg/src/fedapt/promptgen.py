"""Text prompts, the beacon, and the class-aware visual prompt generator.

Trainable state travels as a flat ``{name: ndarray}`` mapping so the server can
average it name by name:

* ``prompt``            (J, m, d_text) deep text prompts
* ``gen.<part>``        one shared generator, or ``gen<j>.<part>`` per layer
  when generators are independent.  Parts: ``Q`` (m, d_text), ``W_K`` and
  ``W_V`` (d_text, d_text), ``ln.g``/``ln.b`` (d_text,), ``phi.w``
  (d_text, d_vis) and ``phi.b`` (d_vis,).

The generator maps a layer's text prompt ``P_j`` to its visual prompt.  The
queries are the token-axis stack ``[B_j; Q]`` after layer norm, keys and
values are ``P_j W_K`` and ``P_j W_V``; the head is ``phi(relu(.))``.  The
beacon is a served constant and never carries gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoders import ContractError, DualEncoder, EncoderConfig
from .tensor import ConfigError, Tensor

FUSIONS = ("pair_mean", "q_only", "all_tokens")
BEACON_SOURCES = ("class_tail", "prompt_tail")
GEN_PARTS = ("Q", "W_K", "W_V", "ln.g", "ln.b", "phi.w", "phi.b")


@dataclass(frozen=True)
class PromptConfig:
    visual_prompts: bool = True  # False: text-prompt-only baseline
    use_beacon: bool = True
    independent_generators: bool = False
    fusion: str = "pair_mean"
    beacon_source: str = "class_tail"
    gen_heads: int = 4
    prompt_init_std: float = 0.02

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.beacon_source not in BEACON_SOURCES:
            raise ConfigError(f"beacon_source must be one of {BEACON_SOURCES}, got {self.beacon_source!r}")

    def visual_tokens(self, m: int) -> int:
        if self.use_beacon and self.fusion == "all_tokens":
            return 2 * m
        return m


def generator_prefixes(enc: EncoderConfig, pcfg: PromptConfig) -> list[str]:
    if not pcfg.visual_prompts:
        return []
    if pcfg.independent_generators:
        return [f"gen{j}" for j in range(enc.J)]
    return ["gen"]


def init_trainables(enc: EncoderConfig, pcfg: PromptConfig, seed: int,
                    dtype=np.float32) -> dict[str, np.ndarray]:
    if pcfg.visual_prompts and enc.d_text % pcfg.gen_heads:
        raise ConfigError(f"gen_heads={pcfg.gen_heads} does not divide d_text={enc.d_text}")
    rng = np.random.default_rng([seed, 503])
    d, dv, m = enc.d_text, enc.d_vis, enc.m
    state = {"prompt": rng.normal(0.0, pcfg.prompt_init_std, (enc.J, m, d))}
    for prefix in generator_prefixes(enc, pcfg):
        state[f"{prefix}.Q"] = rng.normal(0.0, 1.0, (m, d))
        state[f"{prefix}.W_K"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        state[f"{prefix}.W_V"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        state[f"{prefix}.ln.g"] = np.ones(d)
        state[f"{prefix}.ln.b"] = np.zeros(d)
        state[f"{prefix}.phi.w"] = rng.normal(0.0, 0.02, (d, dv))
        state[f"{prefix}.phi.b"] = np.zeros(dv)
    return {k: v.astype(dtype) for k, v in state.items()}


def generator_tensor_count(state: Mapping[str, np.ndarray]) -> int:
    return sum(1 for k in state if k.startswith("gen"))


def generator_param_count(state: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for k, v in state.items() if k.startswith("gen")))


def _gen_params(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {part: params[f"{prefix}.{part}"] for part in GEN_PARTS}


def _generate_layer(Pj: Tensor, Bj: np.ndarray | None, g: Mapping[str, Tensor],
                    pcfg: PromptConfig) -> Tensor:
    m = g["Q"].shape[0]
    rows = g["Q"] if Bj is None else T.concat([Tensor(Bj, dtype=Pj.dtype), g["Q"]], axis=0)
    queries = T.layer_norm(rows, g["ln.g"], g["ln.b"])
    keys = T.matmul(Pj, g["W_K"])
    values = T.matmul(Pj, g["W_V"])
    out = T.multi_head_attention(
        T.reshape(queries, (1,) + queries.shape), T.reshape(keys, (1,) + keys.shape),
        T.reshape(values, (1,) + values.shape), pcfg.gen_heads)
    out = T.reshape(out, out.shape[1:])
    if Bj is not None:
        if pcfg.fusion == "pair_mean":
            out = (out[:m] + out[m:]) * 0.5
        elif pcfg.fusion == "q_only":
            out = out[m:]
    return T.linear(T.relu(out), g["phi.w"], g["phi.b"])


def generate_visual_prompts(P: Tensor, beacon: np.ndarray | None, params: Mapping[str, Tensor],
                            pcfg: PromptConfig) -> Tensor:
    """Visual prompt stack (J, m_v, d_vis) from text prompts (J, m, d_text).

    ``params`` holds generator tensors by name.  With a shared generator all
    layers run as one batch; independent generators run layer by layer.
    """
    J, m, d = P.shape
    if pcfg.use_beacon:
        if beacon is None:
            raise ConfigError("beacon guidance enabled but no beacon given")
        # the beacon is a served constant: take its values, never its graph
        beacon = np.asarray(beacon.data if isinstance(beacon, Tensor) else beacon)
        if beacon.shape[0] != J:
            raise ConfigError(f"beacon has {beacon.shape[0]} layers, prompts have {J}")
        if beacon.shape[1:] != (m, d):
            raise T.ShapeError(f"beacon shape {beacon.shape} vs prompt shape {P.shape}")
    else:
        beacon = None
    if pcfg.independent_generators:
        layers = []
        for j in range(J):
            g = _gen_params(params, f"gen{j}")
            out = _generate_layer(P[j], None if beacon is None else beacon[j], g, pcfg)
            layers.append(T.reshape(out, (1,) + out.shape))
        return T.concat(layers, axis=0)

    g = _gen_params(params, "gen")
    Q = T.broadcast_to(g["Q"], (J, m, d))
    if beacon is None:
        rows = Q
    else:
        rows = T.concat([Tensor(beacon, dtype=P.dtype), Q], axis=1)
    queries = T.layer_norm(rows, g["ln.g"], g["ln.b"])
    keys = T.linear(P, g["W_K"])
    values = T.linear(P, g["W_V"])
    out = T.multi_head_attention(queries, keys, values, pcfg.gen_heads)
    if beacon is not None:
        if pcfg.fusion == "pair_mean":
            out = (out[:, :m] + out[:, m:]) * 0.5
        elif pcfg.fusion == "q_only":
            out = out[:, m:]
    return T.linear(T.relu(out), g["phi.w"], g["phi.b"])


# ---------------------------------------------------------------------------
# beacon


def _tail_positions(encoder: DualEncoder, source: str) -> slice:
    if source not in BEACON_SOURCES:
        raise ConfigError(f"beacon_source must be one of {BEACON_SOURCES}")
    pslice, cslice = encoder.prompt_slice(True)
    if source == "prompt_tail":
        return pslice
    return slice(cslice.stop - encoder.cfg.m, cslice.stop)


def beacon_local(encoder: DualEncoder, states: np.ndarray, source: str = "class_tail") -> np.ndarray:
    """Mean over classes of the per-layer ``m``-token tail: (C, J, T, d) -> (J, m, d)."""
    if states.ndim != 4 or states.shape[0] == 0:
        raise T.ShapeError(f"layer states must be (C, J, T, d) with C >= 1, got {states.shape}")
    pos = _tail_positions(encoder, source)
    # sorting along the class axis makes the sum independent of class order, bitwise
    return np.sort(states[:, :, pos, :], axis=0).mean(axis=0)


def beacon_init(encoder: DualEncoder, token_ids: np.ndarray, source: str = "class_tail") -> np.ndarray:
    """Initial beacon from clean (all-zero) prompts over the full class list."""
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2 or token_ids.shape[0] == 0:
        raise ContractError("beacon_init needs a non-empty class list")
    cfg = encoder.cfg
    clean = Tensor(np.zeros((cfg.J, cfg.m, cfg.d_text), dtype=encoder.dtype))
    states = encoder.encode_text(token_ids, clean, return_states=True).states
    return beacon_local(encoder, states, source)


def beacon_aggregate(current: np.ndarray, uploads: Sequence[np.ndarray], beta: float) -> np.ndarray:
    """Momentum blend ``beta * B + (1 - beta) * mean(uploads)``; uploads summed in order."""
    if len(uploads) == 0:
        raise ContractError("beacon aggregation needs at least one client beacon")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    total = np.zeros_like(current)
    for b in uploads:
        if b.shape != current.shape:
            raise T.ShapeError(f"client beacon shape {b.shape} vs global {current.shape}")
        total = total + b
    mean = total / len(uploads)
    return (beta * current + (1.0 - beta) * mean).astype(current.dtype)


# ---------------------------------------------------------------------------
# prompted model


class PromptedModel:
    """Encoder + trainable prompt state + beacon, scoring images against a class set.

    ``prepare`` runs the text tower and the generator once with everything
    detached; the returned scorer is what attacks differentiate through.
    """

    def __init__(self, encoder: DualEncoder, state: Mapping[str, np.ndarray],
                 beacon: np.ndarray | None, pcfg: PromptConfig):
        self.encoder = encoder
        self.state = state
        self.beacon = beacon
        self.pcfg = pcfg

    def tensors(self, trainable: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=trainable) for k, v in self.state.items()}

    def forward_parts(self, params: Mapping[str, Tensor], token_ids: np.ndarray,
                      return_states: bool = False):
        P = params["prompt"]
        enc = self.encoder.encode_text(token_ids, P, return_states=return_states)
        vprompts = None
        if self.pcfg.visual_prompts:
            vprompts = generate_visual_prompts(P, self.beacon, params, self.pcfg)
        return enc, vprompts

    def prepare(self, token_ids: np.ndarray) -> "Scorer":
        enc, vprompts = self.forward_parts(self.tensors(), token_ids)
        return Scorer(self.encoder, enc.z, vprompts)


class Scorer:
    def __init__(self, encoder: DualEncoder, z_text: Tensor, vprompts: Tensor | None):
        self.encoder = encoder
        self.z_text = z_text
        self.vprompts = vprompts

    @property
    def n_classes(self) -> int:
        return self.z_text.shape[0]

    def logits(self, x) -> Tensor:
        z = self.encoder.encode_image(x, self.vprompts)
        if z.ndim == 1:
            z = T.reshape(z, (1, z.shape[0]))
        return self.encoder.logits(z, self.z_text)

    def predict(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        out = [self.logits(images[lo:lo + batch]).data.argmax(axis=1)
               for lo in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
