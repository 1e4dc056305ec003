"""Synthetic non-IID benchmark data with planted expert structure.

Every task builds its class prototypes from the same orthonormal class
frame, but assigns labels through its own permutation, and adds a
task-identifying marker direction.  Sharing the frame while permuting labels
makes tasks actively conflict: one small model cannot fit two tasks at once
(identical class directions demand different labels), yet the marker keeps
tasks linearly separable so a router can dispatch by task.  Client ``c``
draws most samples from task ``c mod num_tasks``, which plants a
ground-truth best expert per client.

All draws come from named Philox substreams, so generation is deterministic
per seed, and per-client streams are independent (safe to parallelize).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .rng import STREAM_CLIENT_DATA, STREAM_TASKS, STREAM_TEST_DATA, stream

# Class prototypes sit on an orthonormal frame scaled by this radius, giving
# an exact within-task pairwise distance of PROTOTYPE_SCALE * sqrt(2).
PROTOTYPE_SCALE = 1.5
# Strength of the task-marker component of each prototype.
MARKER_SCALE = 1.5


@dataclass(frozen=True)
class TaskSpec:
    """One planted task: rotated orthonormal prototypes plus noise level."""

    task_id: int
    projection: np.ndarray  # (input_dim, input_dim), orthogonal
    prototypes: np.ndarray  # (num_classes, input_dim)
    noise_sigma: float

    def __post_init__(self) -> None:
        p = np.asarray(self.projection, dtype=np.float64)
        if not np.allclose(p @ p.T, np.eye(len(p)), atol=1e-6):
            raise ConfigError(f"task {self.task_id}: projection is not orthonormal")
        protos = np.asarray(self.prototypes, dtype=np.float64)
        for i in range(len(protos)):
            for j in range(i + 1, len(protos)):
                if np.allclose(protos[i], protos[j]):
                    raise ConfigError(f"task {self.task_id}: prototypes {i} and {j} coincide")

    def class_centers(self) -> np.ndarray:
        """Projected prototypes: the actual sample means per class."""
        return self.prototypes @ self.projection.T


@dataclass(frozen=True)
class ClientDataset:
    """One client's local data and the task mixture that produced it."""

    client_id: int
    features: np.ndarray  # (n, input_dim)
    labels: np.ndarray    # (n,)
    task_mixture: np.ndarray
    dominant_task: int

    def __post_init__(self) -> None:
        if abs(float(np.sum(self.task_mixture)) - 1.0) > 1e-9:
            raise InputError(f"client {self.client_id}: task mixture sums to {np.sum(self.task_mixture)}")
        if len(self.features) != len(self.labels):
            raise InputError(f"client {self.client_id}: {len(self.features)} features, {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)


def _random_orthogonal(rng: np.random.Generator, dim: int) -> np.ndarray:
    # QR with the R-diagonal sign fixed, which makes the factorization (and
    # hence the draw) unique.
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _label_permutations(rng: np.random.Generator, num_tasks: int, num_classes: int) -> list[np.ndarray]:
    """Per-task label permutations with pairwise agreement kept low.

    Low agreement (few shared fixed points between any two tasks' relative
    permutation) is what makes a model trained on one task near-chance on
    another, so the greedy pass prefers families with agreement <= 1 and
    relaxes only when the space is too small.
    """
    if num_classes <= 5040:  # 7! — full enumeration is cheap
        candidates = [np.array(p) for p in itertools.permutations(range(num_classes))]
        rng.shuffle(candidates)
    else:
        candidates = [rng.permutation(num_classes) for _ in range(200 * num_tasks)]
    for max_agreement in range(1, num_classes + 1):
        chosen: list[np.ndarray] = []
        for perm in candidates:
            if all(int(np.sum(perm == kept)) <= max_agreement for kept in chosen):
                chosen.append(perm)
                if len(chosen) == num_tasks:
                    return chosen
    # Degenerate corner (e.g. one class): repeat the identity.
    return [np.arange(num_classes) for _ in range(num_tasks)]


def gen_tasks(
    num_tasks: int, input_dim: int, num_classes: int, noise_sigma: float, seed: int
) -> list[TaskSpec]:
    """Deterministically generate the planted tasks for one benchmark seed.

    Prototype for (task t, class k) is ``MARKER_SCALE * m_t +
    PROTOTYPE_SCALE * v[perm_t(k)]`` where the marker directions ``m`` and
    the class frame ``v`` come from one random orthonormal basis shared by
    all tasks; a shared random orthogonal projection then rotates everything.
    """
    if num_tasks <= 0 or input_dim <= 0 or num_classes <= 0:
        raise ConfigError("num_tasks, input_dim, num_classes must be positive")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if num_tasks + num_classes > input_dim:
        raise ConfigError(
            f"cannot place {num_tasks} task markers plus {num_classes} separated "
            f"class prototypes in dimension {input_dim}"
        )
    min_sep = PROTOTYPE_SCALE * np.sqrt(2.0)
    if min_sep < 2.0 * noise_sigma:
        raise ConfigError(
            f"prototype separation {min_sep:.3f} < 2*noise_sigma {2 * noise_sigma:.3f}"
        )
    rng = stream(seed, STREAM_TASKS)
    basis = _random_orthogonal(rng, input_dim)
    markers = basis[:num_tasks]
    class_frame = basis[num_tasks : num_tasks + num_classes]
    projection = _random_orthogonal(rng, input_dim)
    perms = _label_permutations(rng, num_tasks, num_classes)
    tasks = []
    for t in range(num_tasks):
        prototypes = MARKER_SCALE * markers[t] + PROTOTYPE_SCALE * class_frame[perms[t]]
        tasks.append(TaskSpec(task_id=t, projection=projection, prototypes=prototypes, noise_sigma=noise_sigma))
    return tasks


def _mixture_for(client_id: int, num_tasks: int, skew: float) -> np.ndarray:
    base = (1.0 - skew) / num_tasks
    mixture = np.full(num_tasks, base)
    mixture[client_id % num_tasks] += skew
    return mixture


def _sample(
    rng: np.random.Generator, tasks: Sequence[TaskSpec], mixture: np.ndarray, n: int
) -> tuple[np.ndarray, np.ndarray]:
    num_classes = len(tasks[0].prototypes)
    input_dim = tasks[0].projection.shape[0]
    centers = np.stack([t.class_centers() for t in tasks])  # (T, C, d)
    task_idx = rng.choice(len(tasks), size=n, p=mixture)
    labels = rng.integers(0, num_classes, size=n)
    features = centers[task_idx, labels]
    sigma = tasks[0].noise_sigma
    if sigma > 0:
        features = features + sigma * rng.standard_normal((n, input_dim))
    else:
        features = features.copy()
    return features, labels


def gen_client_data(
    tasks: Sequence[TaskSpec],
    num_clients: int,
    samples_per_client: int,
    seed: int,
    skew: float | None = None,
    dirichlet_beta: float | None = None,
) -> list[ClientDataset]:
    """Per-client datasets with dominant task ``c mod num_tasks``.

    Exactly one of ``skew`` / ``dirichlet_beta`` selects the mixture model:
    ``skew`` puts ``skew + (1-skew)/num_tasks`` weight on the dominant task
    (skew=1 means pure one-task clients); ``dirichlet_beta`` draws mixture
    weights from Dirichlet(beta) and rotates the largest onto the dominant
    slot.
    """
    if (skew is None) == (dirichlet_beta is None):
        raise ConfigError("provide exactly one of skew or dirichlet_beta")
    if skew is not None and not 0.0 <= skew <= 1.0:
        raise ConfigError(f"skew must be in [0, 1], got {skew}")
    if dirichlet_beta is not None and dirichlet_beta <= 0:
        raise ConfigError(f"dirichlet_beta must be > 0, got {dirichlet_beta}")
    if num_clients <= 0 or samples_per_client <= 0:
        raise ConfigError("num_clients and samples_per_client must be positive")

    num_tasks = len(tasks)
    datasets = []
    for c in range(num_clients):
        rng = stream(seed, STREAM_CLIENT_DATA, c)
        dominant = c % num_tasks
        if skew is not None:
            mixture = _mixture_for(c, num_tasks, skew)
        else:
            draw = np.sort(rng.dirichlet(np.full(num_tasks, dirichlet_beta)))[::-1]
            mixture = np.empty(num_tasks)
            mixture[dominant] = draw[0]
            rest = [t for t in range(num_tasks) if t != dominant]
            mixture[rest] = draw[1:]
        features, labels = _sample(rng, tasks, mixture, samples_per_client)
        datasets.append(
            ClientDataset(
                client_id=c,
                features=features,
                labels=labels,
                task_mixture=mixture,
                dominant_task=dominant,
            )
        )
    return datasets


def gen_test_data(tasks: Sequence[TaskSpec], num_samples: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Task-uniform held-out set for global evaluation."""
    if num_samples <= 0:
        raise ConfigError(f"num_samples must be positive, got {num_samples}")
    rng = stream(seed, STREAM_TEST_DATA)
    mixture = np.full(len(tasks), 1.0 / len(tasks))
    return _sample(rng, tasks, mixture, num_samples)


def oracle_alignment(num_clients: int, num_tasks: int) -> dict[int, int]:
    """The planted ground-truth client -> expert map: ``c -> c mod num_tasks``."""
    return {c: c % num_tasks for c in range(num_clients)}


def export_client_data(datasets: Sequence[ClientDataset], out_dir: str | Path, seed: int) -> list[Path]:
    """One binary file per client (float32 features then uint16 labels) plus
    a JSON sidecar recording dims, seed, and the task mixture."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in datasets:
        stem = f"client_{ds.client_id:04d}"
        bin_path = out / f"{stem}.bin"
        with open(bin_path, "wb") as fh:
            fh.write(ds.features.astype("<f4").tobytes())
            fh.write(ds.labels.astype("<u2").tobytes())
        sidecar = {
            "client_id": ds.client_id,
            "num_samples": len(ds),
            "input_dim": int(ds.features.shape[1]),
            "seed": seed,
            "task_mixture": [float(w) for w in ds.task_mixture],
            "dominant_task": ds.dominant_task,
        }
        json_path = out / f"{stem}.json"
        json_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        written.extend([bin_path, json_path])
    return written


def load_client_data(path: str | Path) -> ClientDataset:
    """Read back one exported client file pair by its .bin or .json path."""
    base = Path(path)
    stem = base.with_suffix("")
    sidecar = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    n, d = sidecar["num_samples"], sidecar["input_dim"]
    raw = stem.with_suffix(".bin").read_bytes()
    feat_bytes = n * d * 4
    features = np.frombuffer(raw[:feat_bytes], dtype="<f4").reshape(n, d).astype(np.float64)
    labels = np.frombuffer(raw[feat_bytes:], dtype="<u2").astype(np.int64)
    if len(labels) != n:
        raise InputError(f"{path}: expected {n} labels, found {len(labels)}")
    return ClientDataset(
        client_id=sidecar["client_id"],
        features=features,
        labels=labels,
        task_mixture=np.asarray(sidecar["task_mixture"]),
        dominant_task=sidecar["dominant_task"],
    )
