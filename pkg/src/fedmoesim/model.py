"""From-scratch mixture-of-experts classifier.

A linear gating network routes each sample to one of several small 2-layer
tanh MLP experts (top-1 routing).  Training is plain minibatch SGD on the
cross-entropy of the selected expert; the gate learns from the soft routing
distribution weighted by each expert's detached per-sample loss, so no
auxiliary load-balancing loss is needed (that is the scheduler's job).

All math is float64 numpy, analytic gradients only.  Parameter values are
immutable snapshots: training returns new arrays, so per-client training can
run in parallel and server-side aggregation reduces in a fixed client order
for bit-identical results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .rng import STREAM_MODEL_INIT, stream

CHECKPOINT_FORMAT = "fedmoesim-params"
CHECKPOINT_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ModelDims:
    """Architecture sizes; every weight shape derives from these."""

    input_dim: int
    hidden_dim: int
    num_classes: int
    num_experts: int

    def __post_init__(self) -> None:
        for name in ("input_dim", "hidden_dim", "num_classes", "num_experts"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class ExpertParams:
    """One expert: 2-layer MLP with tanh hidden activation."""

    w1: np.ndarray  # (input_dim, hidden_dim)
    b1: np.ndarray  # (hidden_dim,)
    w2: np.ndarray  # (hidden_dim, num_classes)
    b2: np.ndarray  # (num_classes,)

    def __post_init__(self) -> None:
        for name in ("w1", "b1", "w2", "b2"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)


@dataclass(frozen=True)
class MoEParams:
    """Gating network plus expert weights."""

    gate_w: np.ndarray  # (input_dim, num_experts)
    gate_b: np.ndarray  # (num_experts,)
    experts: tuple[ExpertParams, ...]
    dims: ModelDims

    def __post_init__(self) -> None:
        object.__setattr__(self, "gate_w", _frozen(self.gate_w))
        object.__setattr__(self, "gate_b", _frozen(self.gate_b))
        object.__setattr__(self, "experts", tuple(self.experts))
        d = self.dims
        if self.gate_w.shape != (d.input_dim, d.num_experts) or self.gate_b.shape != (d.num_experts,):
            raise InputError(f"gate shapes {self.gate_w.shape}/{self.gate_b.shape} inconsistent with dims {d}")
        if len(self.experts) != d.num_experts:
            raise InputError(f"{len(self.experts)} experts, dims say {d.num_experts}")
        for e, ep in enumerate(self.experts):
            expected = [
                (d.input_dim, d.hidden_dim),
                (d.hidden_dim,),
                (d.hidden_dim, d.num_classes),
                (d.num_classes,),
            ]
            for arr, shape in zip(ep.arrays(), expected):
                if arr.shape != shape:
                    raise InputError(f"expert {e} array shape {arr.shape} != {shape}")

    def all_finite(self) -> bool:
        arrays = [self.gate_w, self.gate_b]
        for ep in self.experts:
            arrays.extend(ep.arrays())
        return all(np.all(np.isfinite(a)) for a in arrays)


@dataclass(frozen=True)
class RoutingStats:
    """Per-expert routing outcome of one local training pass (final epoch)."""

    counts: np.ndarray     # (num_experts,) samples routed per expert
    mean_loss: np.ndarray  # (num_experts,) mean loss on routed samples, 0 if none

    def __post_init__(self) -> None:
        object.__setattr__(self, "counts", np.array(self.counts, dtype=np.int64))
        object.__setattr__(self, "mean_loss", np.array(self.mean_loss, dtype=np.float64))
        if np.any(self.counts < 0) or np.any(self.mean_loss < 0):
            raise InputError("routing stats must be non-negative")


@dataclass
class MoEGrads:
    """Gradients shape-matching MoEParams; unrouted experts hold zeros."""

    gate_w: np.ndarray
    gate_b: np.ndarray
    experts: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class ClientUpdate:
    """One client's contribution to a round of aggregation."""

    client_id: int
    expert_weights: Mapping[int, ExpertParams]
    gate_w: np.ndarray
    gate_b: np.ndarray
    stats: RoutingStats


def init_params(dims: ModelDims, seed: int) -> MoEParams:
    """Uniform init scaled by 1/sqrt(fan_in); biases start at zero."""
    rng = stream(seed, STREAM_MODEL_INIT)
    g = 1.0 / np.sqrt(dims.input_dim)
    gate_w = rng.uniform(-g, g, size=(dims.input_dim, dims.num_experts))
    gate_b = np.zeros(dims.num_experts)
    experts = []
    h = 1.0 / np.sqrt(dims.hidden_dim)
    for _ in range(dims.num_experts):
        experts.append(
            ExpertParams(
                w1=rng.uniform(-g, g, size=(dims.input_dim, dims.hidden_dim)),
                b1=np.zeros(dims.hidden_dim),
                w2=rng.uniform(-h, h, size=(dims.hidden_dim, dims.num_classes)),
                b2=np.zeros(dims.num_classes),
            )
        )
    return MoEParams(gate_w=gate_w, gate_b=gate_b, experts=tuple(experts), dims=dims)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_active(params: MoEParams, active_experts: Sequence[int]) -> list[int]:
    active = sorted(set(int(e) for e in active_experts))
    if not active:
        raise InputError("active expert set must be non-empty")
    for e in active:
        if not 0 <= e < params.dims.num_experts:
            raise IndexError(f"expert id {e} out of range [0, {params.dims.num_experts})")
    return active


def _expert_forward(ep: ExpertParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hidden = np.tanh(x @ ep.w1 + ep.b1)
    return hidden @ ep.w2 + ep.b2, hidden


def _ce_rows(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    return lse - shifted[np.arange(len(labels)), labels]


def _route_batch(
    params: MoEParams, x: np.ndarray, active: list[int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gate logits, gate probabilities, and top-1 selection over the active set.

    Selection index is local to ``active`` (sorted ascending), so argmax ties
    land on the lowest expert id.
    """
    gate_logits = x @ params.gate_w[:, active] + params.gate_b[active]
    probs = _softmax(gate_logits)
    sel_local = np.argmax(gate_logits, axis=1)
    return gate_logits, probs, sel_local


def forward(
    params: MoEParams, x: np.ndarray, active_experts: Sequence[int]
) -> tuple[np.ndarray, np.ndarray, int]:
    """Route one input: (selected expert's class logits, gate distribution, id)."""
    active = _check_active(params, active_experts)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.dims.input_dim,):
        raise InputError(f"input shape {x.shape} != ({params.dims.input_dim},)")
    _, probs, sel_local = _route_batch(params, x[None, :], active)
    selected = active[int(sel_local[0])]
    logits, _ = _expert_forward(params.experts[selected], x[None, :])
    return logits[0], probs[0], selected


def _validate_batch(params: MoEParams, batch: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or len(x) == 0:
        raise InputError("batch features must be a non-empty 2-d array")
    if x.shape[1] != params.dims.input_dim:
        raise InputError(f"feature dim {x.shape[1]} != {params.dims.input_dim}")
    if y.shape != (len(x),):
        raise InputError("labels must be a vector matching the batch length")
    if np.any(y < 0) or np.any(y >= params.dims.num_classes):
        raise InputError(f"labels must lie in [0, {params.dims.num_classes})")
    return x, y.astype(np.int64)


def zero_grads(params: MoEParams) -> MoEGrads:
    return MoEGrads(
        gate_w=np.zeros_like(params.gate_w),
        gate_b=np.zeros_like(params.gate_b),
        experts=[tuple(np.zeros_like(a) for a in ep.arrays()) for ep in params.experts],
    )


def _loss_grad_impl(
    params: MoEParams, x: np.ndarray, y: np.ndarray, active: list[int]
) -> tuple[float, MoEGrads, np.ndarray, np.ndarray]:
    """Shared core: returns (task loss, grads, local selection, loss matrix)."""
    n = len(x)
    _, probs, sel_local = _route_batch(params, x, active)

    # Full-batch forward per active expert: losses feed both the gate signal
    # and (for selected rows) the task loss.
    losses = np.empty((n, len(active)))
    cache: list[tuple[np.ndarray, np.ndarray]] = []
    for col, e in enumerate(active):
        logits, hidden = _expert_forward(params.experts[e], x)
        cache.append((logits, hidden))
        losses[:, col] = _ce_rows(logits, y)

    task_loss = float(np.mean(losses[np.arange(n), sel_local]))

    grads = zero_grads(params)

    expected = np.sum(probs * losses, axis=1, keepdims=True)
    gate_sig = probs * (losses - expected) / n
    grads.gate_w[:, active] = x.T @ gate_sig
    grads.gate_b[active] = np.sum(gate_sig, axis=0)

    for col, e in enumerate(active):
        rows = sel_local == col
        if not np.any(rows):
            continue
        logits, hidden = cache[col]
        xr, yr, hr = x[rows], y[rows], hidden[rows]
        p2 = _softmax(logits[rows])
        p2[np.arange(len(yr)), yr] -= 1.0
        dz2 = p2 / n
        dh = dz2 @ params.experts[e].w2.T
        dz1 = dh * (1.0 - hr * hr)
        grads.experts[e] = (xr.T @ dz1, dz1.sum(axis=0), hr.T @ dz2, dz2.sum(axis=0))

    return task_loss, grads, sel_local, losses


def loss_and_grad(
    params: MoEParams,
    batch: tuple[np.ndarray, np.ndarray],
    active_experts: Sequence[int],
) -> tuple[float, MoEGrads]:
    """Mean selected-expert cross-entropy and analytic gradients.

    Expert gradients flow only through each sample's selected expert.  The
    gate gradient comes from minimizing the expected detached expert loss
    under the gate distribution, which per sample is
    ``p_e * (loss_e - sum_j p_j loss_j)`` on each active logit.
    """
    active = _check_active(params, active_experts)
    x, y = _validate_batch(params, batch)
    loss, grads, _, _ = _loss_grad_impl(params, x, y, active)
    return loss, grads


def task_loss(
    params: MoEParams,
    batch: tuple[np.ndarray, np.ndarray],
    active_experts: Sequence[int],
) -> float:
    """Mean selected-expert cross-entropy, no gradients."""
    active = _check_active(params, active_experts)
    x, y = _validate_batch(params, batch)
    _, _, sel_local = _route_batch(params, x, active)
    return float(np.mean(_batch_selected_losses(params, x, y, active, sel_local)))


def routing_objective(
    params: MoEParams,
    batch: tuple[np.ndarray, np.ndarray],
    active_experts: Sequence[int],
) -> float:
    """Expected per-sample expert loss under the gate distribution.

    This is the scalar whose gate-parameter gradient loss_and_grad returns;
    exposed so finite-difference verification can target it directly.
    """
    active = _check_active(params, active_experts)
    x, y = _validate_batch(params, batch)
    _, probs, _ = _route_batch(params, x, active)
    losses = np.empty_like(probs)
    for col, e in enumerate(active):
        logits, _ = _expert_forward(params.experts[e], x)
        losses[:, col] = _ce_rows(logits, y)
    return float(np.mean(np.sum(probs * losses, axis=1)))


def local_train(
    params: MoEParams,
    assigned_experts: Sequence[int],
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> tuple[dict[int, ExpertParams], tuple[np.ndarray, np.ndarray], RoutingStats] | None:
    """SGD over seeded shuffled minibatches; gate + assigned experts only.

    Returns None (skip signal) when the assignment is empty.  RoutingStats
    reflects the final epoch's routing decisions.
    """
    if not assigned_experts:
        return None
    active = _check_active(params, assigned_experts)
    x, y = _validate_batch(params, (features, labels))
    if epochs <= 0 or batch_size <= 0:
        raise ConfigError(f"epochs and batch_size must be positive, got {epochs}, {batch_size}")
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")

    gate_w = np.array(params.gate_w)
    gate_b = np.array(params.gate_b)
    expert_arrays = {e: [np.array(a) for a in params.experts[e].arrays()] for e in active}

    rng = stream(seed)
    n = len(x)
    counts = np.zeros(params.dims.num_experts, dtype=np.int64)
    loss_sums = np.zeros(params.dims.num_experts)

    for epoch in range(epochs):
        final = epoch == epochs - 1
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            current = MoEParams(
                gate_w=gate_w,
                gate_b=gate_b,
                experts=tuple(
                    ExpertParams(*expert_arrays[e]) if e in expert_arrays else params.experts[e]
                    for e in range(params.dims.num_experts)
                ),
                dims=params.dims,
            )
            _, grads, sel_local, losses = _loss_grad_impl(current, x[idx], y[idx], active)
            if final:
                picked = losses[np.arange(len(idx)), sel_local]
                for col, e in enumerate(active):
                    rows = sel_local == col
                    counts[e] += int(np.sum(rows))
                    loss_sums[e] += float(np.sum(picked[rows]))
            gate_w = gate_w - lr * grads.gate_w
            gate_b = gate_b - lr * grads.gate_b
            for e in active:
                expert_arrays[e] = [a - lr * g for a, g in zip(expert_arrays[e], grads.experts[e])]

    mean_loss = np.divide(loss_sums, counts, out=np.zeros_like(loss_sums), where=counts > 0)
    stats = RoutingStats(counts=counts, mean_loss=mean_loss)
    updated = {e: ExpertParams(*expert_arrays[e]) for e in active}
    return updated, (gate_w, gate_b), stats


def _batch_selected_losses(
    params: MoEParams, x: np.ndarray, y: np.ndarray, active: list[int], sel_local: np.ndarray
) -> np.ndarray:
    out = np.zeros(len(x))
    for col, e in enumerate(active):
        rows = sel_local == col
        if np.any(rows):
            logits, _ = _expert_forward(params.experts[e], x[rows])
            out[rows] = _ce_rows(logits, y[rows])
    return out


def aggregate(global_params: MoEParams, updates: Sequence[ClientUpdate]) -> MoEParams:
    """Server-side reduction of one round of client updates.

    Each expert becomes the routed-sample-count-weighted average of the
    clients that actually trained it (positive count); untouched experts keep
    the global weights.  The gate is the uniform average over participating
    clients.  Reduction runs in ascending client id, so any parallel client
    execution aggregates bit-identically to sequential.
    """
    if not updates:
        return global_params
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise InputError(f"duplicate client ids in updates: {ids}")
    d = global_params.dims
    for u in ordered:
        if u.gate_w.shape != global_params.gate_w.shape or u.gate_b.shape != global_params.gate_b.shape:
            raise InputError(f"client {u.client_id} gate shape mismatch")
        for e, ep in u.expert_weights.items():
            if not 0 <= e < d.num_experts:
                raise IndexError(f"client {u.client_id} update for expert {e} out of range")
            for arr, ref in zip(ep.arrays(), global_params.experts[e].arrays()):
                if arr.shape != ref.shape:
                    raise InputError(f"client {u.client_id} expert {e} shape mismatch")

    gate_w = np.zeros_like(global_params.gate_w)
    gate_b = np.zeros_like(global_params.gate_b)
    for u in ordered:
        gate_w += u.gate_w
        gate_b += u.gate_b
    gate_w /= len(ordered)
    gate_b /= len(ordered)

    new_experts: list[ExpertParams] = []
    for e in range(d.num_experts):
        contributors = [
            (int(u.stats.counts[e]), u.expert_weights[e])
            for u in ordered
            if e in u.expert_weights and u.stats.counts[e] > 0
        ]
        if not contributors:
            new_experts.append(global_params.experts[e])
            continue
        total = float(sum(c for c, _ in contributors))
        acc = [np.zeros_like(a) for a in global_params.experts[e].arrays()]
        for count, ep in contributors:
            w = count / total
            for slot, arr in zip(acc, ep.arrays()):
                slot += w * arr
        new_experts.append(ExpertParams(*acc))

    return MoEParams(gate_w=gate_w, gate_b=gate_b, experts=tuple(new_experts), dims=d)


def evaluate(params: MoEParams, features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(accuracy, mean loss) with every expert active and top-1 routing."""
    x, y = _validate_batch(params, (features, labels))
    active = list(range(params.dims.num_experts))
    _, _, sel_local = _route_batch(params, x, active)
    losses = _batch_selected_losses(params, x, y, active, sel_local)
    correct = 0
    for col, e in enumerate(active):
        rows = sel_local == col
        if np.any(rows):
            logits, _ = _expert_forward(params.experts[e], x[rows])
            correct += int(np.sum(np.argmax(logits, axis=1) == y[rows]))
    return correct / len(x), float(np.mean(losses))


def _param_arrays(params: MoEParams) -> list[tuple[str, np.ndarray]]:
    """Checkpoint serialization order: gate first, then experts ascending."""
    named = [("gate_w", params.gate_w), ("gate_b", params.gate_b)]
    for e, ep in enumerate(params.experts):
        for part, arr in zip(("w1", "b1", "w2", "b2"), ep.arrays()):
            named.append((f"expert_{e}.{part}", arr))
    return named


def save_params(path: str | Path, params: MoEParams, seed: int, round_index: int) -> None:
    """Write a checkpoint: one JSON header line, then little-endian float32.

    Arrays are concatenated flat in _param_arrays order; the header records
    dims, seed, round, and each array's shape for exact reconstruction.
    """
    named = _param_arrays(params)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {
            "input_dim": params.dims.input_dim,
            "hidden_dim": params.dims.hidden_dim,
            "num_classes": params.dims.num_classes,
            "num_experts": params.dims.num_experts,
        },
        "seed": seed,
        "round": round_index,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in named],
    }
    payload = np.concatenate([arr.ravel() for _, arr in named]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload.tobytes())


def load_params(path: str | Path) -> tuple[MoEParams, int, int]:
    """Read a checkpoint back; returns (params, seed, round)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise InputError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        flat = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    dims = ModelDims(**header["dims"])
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = flat[offset : offset + size].reshape(entry["shape"])
        offset += size
    if offset != len(flat):
        raise InputError(f"{path}: payload has {len(flat)} values, header expects {offset}")
    experts = tuple(
        ExpertParams(
            w1=arrays[f"expert_{e}.w1"],
            b1=arrays[f"expert_{e}.b1"],
            w2=arrays[f"expert_{e}.w2"],
            b2=arrays[f"expert_{e}.b2"],
        )
        for e in range(dims.num_experts)
    )
    params = MoEParams(gate_w=arrays["gate_w"], gate_b=arrays["gate_b"], experts=experts, dims=dims)
    return params, int(header["seed"]), int(header["round"])
