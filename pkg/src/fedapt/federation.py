"""Non-IID partitioning, local adversarial prompt tuning, and server averaging.

One communication round: the server samples ``E`` clients, each downloads the
global prompt state and beacon, runs PGD adversarial training on its own
classes for a few local epochs (SGD with momentum, buffers reset per round),
recomputes its local beacon, and uploads.  The server averages prompt and
generator tensors by name (summing in client-id order) and momentum-blends
the beacon.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .adversary import AttackConfig, attack, evaluate_robustness
from .encoders import DualEncoder, task_loss
from .promptgen import (PromptConfig, PromptedModel, beacon_aggregate, beacon_init, beacon_local,
                        generate_visual_prompts)
from .tensor import ConfigError, Tensor

log = logging.getLogger(__name__)


class RoundAbort(RuntimeError):
    """A client produced a non-finite training loss."""


@dataclass(frozen=True)
class PartitionSpec:
    N: int
    n_per_client: int
    assignment: tuple[tuple[int, ...], ...]

    @property
    def C(self) -> int:
        return sum(len(a) for a in self.assignment)

    def client_of(self) -> dict[int, int]:
        return {c: i for i, classes in enumerate(self.assignment) for c in classes}


def partition(C: int, N: int, n_per_client: int, seed: int) -> PartitionSpec:
    """Split classes ``0..C-1`` into ``N`` disjoint, equally sized client sets."""
    if N < 1 or n_per_client < 1:
        raise ConfigError("need N >= 1 and n_per_client >= 1")
    if C != N * n_per_client:
        raise ConfigError(f"C={C} is not N*n_per_client={N}*{n_per_client}")
    perm = np.random.default_rng([seed, 601]).permutation(C)
    assignment = tuple(tuple(sorted(int(c) for c in perm[i * n_per_client:(i + 1) * n_per_client]))
                       for i in range(N))
    return PartitionSpec(N, n_per_client, assignment)


def lr_schedule(t: int, warmup_rounds: int, total_rounds: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay, indexed by round."""
    if not 0 <= t < total_rounds:
        raise ConfigError(f"round {t} outside [0, {total_rounds})")
    if t < warmup_rounds:
        return base_lr * t / warmup_rounds
    span = total_rounds - warmup_rounds
    progress = (t - warmup_rounds) / span if span > 0 else 0.0
    return base_lr * (1.0 + np.cos(np.pi * progress)) / 2.0


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 30
    local_epochs: int = 1
    batch_size: int = 16
    base_lr: float = 0.0035
    momentum: float = 0.9
    warmup_rounds: int = 1
    beta: float = 0.9
    participants: int | None = None  # E; None means all N clients
    weighted_average: bool = False
    train_attack: AttackConfig = field(default_factory=AttackConfig.training)
    val_attack: AttackConfig = field(default_factory=lambda: AttackConfig.pgd_eval(steps=10))
    val_every: int = 1

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("need rounds >= 0, local_epochs >= 1, batch_size >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")


@dataclass
class ClientState:
    client_id: int
    classes: tuple[int, ...]  # global ids, sorted; local label k means classes[k]
    images: np.ndarray
    labels: np.ndarray  # local indices into ``classes``
    token_ids: np.ndarray  # (n_i, L)

    def __post_init__(self):
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise ConfigError(f"client {self.client_id}: label outside its class set")


@dataclass
class ServerState:
    round: int
    state: dict[str, np.ndarray]
    beacon: np.ndarray | None
    beta: float


class ClientUpload(NamedTuple):
    client_id: int
    state: dict[str, np.ndarray]
    beacon: np.ndarray | None
    n_examples: int
    stats: dict


def make_clients(encoder: DualEncoder, part: PartitionSpec, images: np.ndarray,
                 global_labels: np.ndarray, token_seed: int) -> list[ClientState]:
    owner = part.client_of()
    clients = []
    for cid, classes in enumerate(part.assignment):
        local = {c: k for k, c in enumerate(classes)}
        mask = np.array([owner.get(int(g)) == cid for g in global_labels], dtype=bool)
        labels = np.array([local[int(g)] for g in global_labels[mask]], dtype=np.int64)
        clients.append(ClientState(cid, classes, images[mask], labels,
                                   encoder.class_tokens(classes, token_seed)))
    return clients


def round_rng(seed: int, t: int, client_id: int) -> np.random.Generator:
    """Private stream of one client in one round (batch order, random starts)."""
    return np.random.default_rng([seed, 17, t, client_id])


def sgd_momentum_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                      bufs: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    for k, p in params.items():
        bufs[k] = momentum * bufs[k] + grads[k]
        p.data = (p.data - lr * bufs[k]).astype(p.data.dtype)


def local_loss(model: PromptedModel, params: Mapping[str, Tensor], token_ids: np.ndarray,
               x: np.ndarray, y: np.ndarray) -> Tensor:
    P = params["prompt"]
    vprompts = None
    if model.pcfg.visual_prompts:
        vprompts = generate_visual_prompts(P, model.beacon, params, model.pcfg)
    return task_loss(model.encoder, x, y, token_ids, P, vprompts)


def client_update(encoder: DualEncoder, pcfg: PromptConfig, state: Mapping[str, np.ndarray],
                  beacon: np.ndarray | None, client: ClientState, epochs: int, lr: float,
                  attack_cfg: AttackConfig, rng: np.random.Generator, batch_size: int = 16,
                  momentum: float = 0.9) -> ClientUpload:
    """Local adversarial prompt tuning on one client's data.

    Adversarial examples are regenerated per minibatch against the current
    local parameters.  Returns the updated state and the client's beacon.
    """
    params = {k: Tensor(np.array(v, copy=True), requires_grad=True) for k, v in state.items()}
    bufs = {k: np.zeros_like(v) for k, v in state.items()}
    model = PromptedModel(encoder, {}, beacon, pcfg)
    losses = []
    n = len(client.labels)
    if n == 0:
        warnings.warn(f"client {client.client_id} has no data; skipping local training")
    elif lr != 0.0:
        for _ in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                xb, yb = client.images[idx], client.labels[idx]
                model.state = {k: p.data for k, p in params.items()}
                x_adv = attack(model.prepare(client.token_ids), xb, yb, attack_cfg, rng)
                loss = local_loss(model, params, client.token_ids, x_adv, yb)
                if not np.isfinite(loss.data):
                    raise RoundAbort(f"client {client.client_id}: non-finite loss {loss.data}")
                grads = T.grad(loss, params.values())
                sgd_momentum_step(params, {k: grads[p] for k, p in params.items()}, bufs, lr, momentum)
                losses.append(float(loss.data))
    new_state = {k: p.data for k, p in params.items()}
    local_beacon = None
    if beacon is not None:
        P = Tensor(new_state["prompt"])
        states = encoder.encode_text(client.token_ids, P, return_states=True).states
        local_beacon = beacon_local(encoder, states, pcfg.beacon_source)
    stats = {"mean_loss": float(np.mean(losses)) if losses else None, "steps": len(losses)}
    return ClientUpload(client.client_id, new_state, local_beacon, n, stats)


def aggregate(server: ServerState, uploads: Sequence[ClientUpload],
              weighted: bool = False) -> ServerState:
    """FedAvg over named tensors plus the momentum beacon update."""
    if not uploads:
        raise ConfigError("aggregation needs at least one upload")
    ordered = sorted(uploads, key=lambda u: u.client_id)
    names = list(server.state)
    for u in ordered:
        for k in names:
            if k not in u.state:
                raise T.ShapeError(f"client {u.client_id} upload lacks tensor {k!r}")
            if u.state[k].shape != server.state[k].shape:
                raise T.ShapeError(f"tensor {k!r}: client {u.client_id} shape {u.state[k].shape}, "
                                   f"global {server.state[k].shape}")
    if weighted:
        w = np.array([u.n_examples for u in ordered], dtype=np.float64)
        w = w / w.sum()
    else:
        w = np.full(len(ordered), 1.0 / len(ordered))
    new_state = {}
    for k in names:
        dtype = server.state[k].dtype
        if weighted:
            acc = np.zeros_like(server.state[k], dtype=np.float64)
            for wi, u in zip(w, ordered):
                acc = acc + wi * u.state[k]
            new_state[k] = acc.astype(dtype)
        else:
            acc = np.zeros_like(server.state[k])
            for u in ordered:
                acc = acc + u.state[k]
            new_state[k] = (acc / len(ordered)).astype(dtype)
    beacon = server.beacon
    if beacon is not None:
        beacon = beacon_aggregate(beacon, [u.beacon for u in ordered], server.beta)
    return ServerState(server.round + 1, new_state, beacon, server.beta)


class TrainResult(NamedTuple):
    state: dict[str, np.ndarray]
    beacon: np.ndarray | None
    log: list[dict]


def evaluate_global(encoder: DualEncoder, pcfg: PromptConfig, state, beacon, token_ids,
                    images, labels, cfg: AttackConfig, rng) -> dict:
    scorer = PromptedModel(encoder, state, beacon, pcfg).prepare(token_ids)
    return evaluate_robustness(scorer, images, labels, cfg, rng)


def run_training(encoder: DualEncoder, pcfg: PromptConfig, fcfg: FedConfig,
                 clients: Sequence[ClientState], init_state: Mapping[str, np.ndarray],
                 all_token_ids: np.ndarray, seed: int, val: tuple[np.ndarray, np.ndarray] | None = None,
                 on_round: Callable[[dict], None] | None = None,
                 trace: list | None = None) -> TrainResult:
    """Run ``fcfg.rounds`` communication rounds; deterministic per ``seed``.

    ``all_token_ids`` lists every global class (row = global id) and seeds
    the beacon; ``val`` holds (images, global labels) for per-round metrics.
    If ``trace`` is a list, the aggregated (state, beacon) of every round is
    appended to it.
    """
    N = len(clients)
    E = N if fcfg.participants is None else fcfg.participants
    if not 1 <= E <= N:
        raise ConfigError(f"participants E={E} outside [1, {N}]")
    for c in clients:
        if c.token_ids.shape[0] != len(c.classes):
            raise ConfigError(f"client {c.client_id}: token rows do not match its classes")
    beacon = None
    if pcfg.visual_prompts and pcfg.use_beacon:
        beacon = beacon_init(encoder, all_token_ids, pcfg.beacon_source)
    server = ServerState(0, {k: np.array(v, copy=True) for k, v in init_state.items()}, beacon, fcfg.beta)
    sampler = np.random.default_rng([seed, 23])
    rows = []
    for t in range(fcfg.rounds):
        start = time.perf_counter()
        lr = lr_schedule(t, fcfg.warmup_rounds, fcfg.rounds, fcfg.base_lr)
        chosen = sorted(int(i) for i in sampler.choice(N, size=E, replace=False))
        uploads = [
            client_update(encoder, pcfg, server.state, server.beacon, clients[i], fcfg.local_epochs,
                          lr, fcfg.train_attack, round_rng(seed, t, clients[i].client_id),
                          fcfg.batch_size, fcfg.momentum)
            for i in chosen
        ]
        server = aggregate(server, uploads, fcfg.weighted_average)
        if trace is not None:
            trace.append((server.state, server.beacon))
        losses = [u.stats["mean_loss"] for u in uploads if u.stats["mean_loss"] is not None]
        row = {"round": t, "lr": float(lr), "mean_local_loss": float(np.mean(losses)) if losses else None,
               "clean_acc": None, "robust_acc": None, "seed": seed}
        if val is not None and fcfg.val_every > 0 and (t + 1) % fcfg.val_every == 0:
            m = evaluate_global(encoder, pcfg, server.state, server.beacon, all_token_ids,
                                val[0], val[1], fcfg.val_attack, np.random.default_rng([seed, 29, t]))
            row["clean_acc"], row["robust_acc"] = m["clean_acc"], m["robust_acc"]
        row["wall_ms"] = round((time.perf_counter() - start) * 1e3, 3)
        rows.append(row)
        if on_round is not None:
            on_round(row)
        log.info("round %d lr %.5f loss %s clean %s robust %s", t, lr, row["mean_local_loss"],
                 row["clean_acc"], row["robust_acc"])
    return TrainResult(server.state, server.beacon, rows)
