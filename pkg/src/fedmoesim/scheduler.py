"""Client-expert scheduling core.

Maintains the two server-side score tables that drive assignment decisions:

* a fitness matrix ``f[c, e]`` in [0, 1] estimating how well expert ``e``
  suits client ``c``'s local data, updated by EMA from training rewards and
  decayed toward the uninformed prior (0.5) on non-interaction;
* a usage vector ``u[e] >= 0`` tracking recent system-wide training load per
  expert with geometric forgetting.

Per round, :func:`assign_round` turns these tables plus per-client capacity
profiles into an :class:`AssignmentPlan` under one of three strategies:
``load_balanced`` (fitness minus normalized-usage penalty), ``greedy``
(fitness only), and ``random`` (seeded uniform baseline).
:func:`coverage_repair` optionally patches load-balanced plans so every
expert keeps at least one trainer when feasible.

Everything here is a pure function; states are immutable and update by
replacement, so concurrent evaluation needs no locking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .rng import stream

STRATEGY_LOAD_BALANCED = "load_balanced"
STRATEGY_GREEDY = "greedy"
STRATEGY_RANDOM = "random"
STRATEGIES = (STRATEGY_LOAD_BALANCED, STRATEGY_GREEDY, STRATEGY_RANDOM)

FITNESS_PRIOR = 0.5  # uninformed initialization and default decay target


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ScoreState:
    """Immutable fitness/usage snapshot plus its EMA parameters.

    ``alpha`` is the fitness EMA rate, ``delta`` the per-round decay applied
    to non-interacting pairs, ``gamma`` the usage forgetting factor.
    """

    fitness: np.ndarray  # (num_clients, num_experts), entries in [0, 1]
    usage: np.ndarray    # (num_experts,), entries >= 0
    alpha: float
    delta: float
    gamma: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "fitness", _frozen(self.fitness))
        object.__setattr__(self, "usage", _frozen(self.usage))

    @property
    def num_clients(self) -> int:
        return self.fitness.shape[0]

    @property
    def num_experts(self) -> int:
        return self.fitness.shape[1]

    def to_dict(self) -> dict:
        return {
            "fitness": self.fitness.tolist(),
            "usage": self.usage.tolist(),
            "alpha": self.alpha,
            "delta": self.delta,
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreState":
        return cls(
            fitness=np.asarray(d["fitness"], dtype=np.float64),
            usage=np.asarray(d["usage"], dtype=np.float64),
            alpha=float(d["alpha"]),
            delta=float(d["delta"]),
            gamma=float(d["gamma"]),
        )


@dataclass(frozen=True)
class ClientCapacityProfile:
    """Resource profile bounding what a client can train and how fast."""

    compute_rate: float    # samples/second processed per unit compute cost
    memory_budget: float   # abstract memory units for loaded experts
    bandwidth_down: float  # bytes/second
    bandwidth_up: float    # bytes/second
    latency: float = 0.0   # seconds of fixed overhead per transfer

    def __post_init__(self) -> None:
        for name in ("compute_rate", "memory_budget", "bandwidth_down", "bandwidth_up"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.latency < 0:
            raise ConfigError(f"latency must be >= 0, got {self.latency}")


@dataclass(frozen=True)
class ExpertResourceSpec:
    """Per-expert resource footprint used for capacity and time modeling."""

    memory_cost: float   # memory units to load one expert
    param_bytes: int     # serialized size for transfer-time modeling
    compute_cost: float  # relative per-sample training cost

    def __post_init__(self) -> None:
        if self.memory_cost <= 0 or self.param_bytes <= 0 or self.compute_cost <= 0:
            raise ConfigError("all ExpertResourceSpec fields must be strictly positive")


# A resource spec may be uniform (one spec for every expert) or a per-expert
# sequence; the per-expert form is what makes individually infeasible experts
# drop out of a client's candidate set.
SpecLike = ExpertResourceSpec | Sequence[ExpertResourceSpec]


def spec_for(spec: SpecLike, expert_id: int) -> ExpertResourceSpec:
    """Resolve the resource spec of one expert from either spec form."""
    if isinstance(spec, ExpertResourceSpec):
        return spec
    return spec[expert_id]


def _spec_costs(spec: SpecLike, num_experts: int) -> list[float]:
    if isinstance(spec, ExpertResourceSpec):
        return [spec.memory_cost] * num_experts
    if len(spec) != num_experts:
        raise InputError(f"per-expert spec has length {len(spec)}, expected {num_experts}")
    return [s.memory_cost for s in spec]


@dataclass(frozen=True)
class AssignmentPlan:
    """One round's client -> experts mapping with the capacity limits used."""

    assignments: dict[int, tuple[int, ...]]
    per_client_limit: dict[int, int]
    strategy: str

    def validate(self, num_experts: int) -> None:
        """Raise ``InputError`` if any plan invariant is violated."""
        for client, experts in self.assignments.items():
            limit = self.per_client_limit[client]
            if len(experts) > limit:
                raise InputError(f"client {client} assigned {len(experts)} experts, limit {limit}")
            if len(set(experts)) != len(experts):
                raise InputError(f"client {client} has duplicate expert ids: {experts}")
            for e in experts:
                if not 0 <= e < num_experts:
                    raise InputError(f"expert id {e} out of range [0, {num_experts})")

    def expert_assignees(self, num_experts: int) -> list[list[int]]:
        """Clients assigned to each expert, ascending client id."""
        holders: list[list[int]] = [[] for _ in range(num_experts)]
        for client in sorted(self.assignments):
            for e in self.assignments[client]:
                holders[e].append(client)
        return holders


@dataclass(frozen=True)
class RewardObservation:
    """Outcome of one client training one expert for a round.

    ``reward`` blends low error with how often the client's gate picked the
    expert; ``sample_contribution`` is the number of local samples routed to
    it, which feeds the usage tally.
    """

    client_id: int
    expert_id: int
    reward: float
    sample_contribution: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.reward <= 1.0:
            raise InputError(f"reward must be in [0, 1], got {self.reward}")
        if self.sample_contribution < 0:
            raise InputError(f"sample_contribution must be >= 0, got {self.sample_contribution}")


def init_scores(num_clients: int, num_experts: int, alpha: float, delta: float, gamma: float) -> ScoreState:
    """Fresh score state: all fitness at the 0.5 prior, all usage at zero."""
    if num_clients <= 0 or num_experts <= 0:
        raise ConfigError(f"counts must be positive, got {num_clients} clients, {num_experts} experts")
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    if not 0.0 <= delta < 1.0:
        raise ConfigError(f"delta must be in [0, 1), got {delta}")
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must be in [0, 1), got {gamma}")
    return ScoreState(
        fitness=np.full((num_clients, num_experts), FITNESS_PRIOR),
        usage=np.zeros(num_experts),
        alpha=alpha,
        delta=delta,
        gamma=gamma,
    )


def update_fitness(
    state: ScoreState,
    observations: Iterable[RewardObservation],
    decay_target: float = FITNESS_PRIOR,
) -> ScoreState:
    """Apply one round of reward EMAs and non-interaction decay.

    Observed pairs move toward their reward: ``f' = (1-alpha) f + alpha r``.
    Every unobserved pair decays toward ``decay_target``:
    ``f' = (1-delta) f + delta target`` (target 0.5 keeps exploration alive;
    pass 0.0 for decay-to-zero experiments).
    """
    if not 0.0 <= decay_target <= 1.0:
        raise ConfigError(f"decay_target must be in [0, 1], got {decay_target}")
    obs = list(observations)
    seen: set[tuple[int, int]] = set()
    for o in obs:
        if not 0 <= o.client_id < state.num_clients:
            raise IndexError(f"client id {o.client_id} out of range [0, {state.num_clients})")
        if not 0 <= o.expert_id < state.num_experts:
            raise IndexError(f"expert id {o.expert_id} out of range [0, {state.num_experts})")
        pair = (o.client_id, o.expert_id)
        if pair in seen:
            raise InputError(f"duplicate observation for pair {pair}")
        seen.add(pair)

    fitness = (1.0 - state.delta) * state.fitness + state.delta * decay_target
    for o in obs:
        prev = state.fitness[o.client_id, o.expert_id]
        fitness[o.client_id, o.expert_id] = (1.0 - state.alpha) * prev + state.alpha * o.reward
    np.clip(fitness, 0.0, 1.0, out=fitness)
    return ScoreState(fitness, state.usage, state.alpha, state.delta, state.gamma)


def update_usage(state: ScoreState, contributions: Sequence[float] | np.ndarray) -> ScoreState:
    """Fold one round's per-expert sample totals into the usage EMA."""
    contrib = np.asarray(contributions, dtype=np.float64)
    if contrib.shape != (state.num_experts,):
        raise InputError(f"contributions shape {contrib.shape} != ({state.num_experts},)")
    if np.any(contrib < 0):
        raise InputError("contributions must be non-negative")
    usage = state.gamma * state.usage + (1.0 - state.gamma) * contrib
    return ScoreState(state.fitness, usage, state.alpha, state.delta, state.gamma)


def max_experts(profile: ClientCapacityProfile, spec: SpecLike, system_cap: int) -> int:
    """Number of experts the client can hold at once, capped system-wide.

    Uniform spec: ``min(floor(memory_budget / memory_cost), system_cap)``.
    Per-expert specs: the longest cheapest-first prefix that fits the budget.
    """
    if system_cap < 0:
        raise ConfigError(f"system_cap must be >= 0, got {system_cap}")
    if isinstance(spec, ExpertResourceSpec):
        fit = int(profile.memory_budget // spec.memory_cost)
    else:
        fit = 0
        remaining = profile.memory_budget
        for cost in sorted(s.memory_cost for s in spec):
            if cost > remaining:
                break
            remaining -= cost
            fit += 1
    return min(fit, system_cap)


def candidate_experts(
    client_id: int,
    profile: ClientCapacityProfile,
    spec: SpecLike,
    num_experts: int,
) -> tuple[int, ...]:
    """Experts the client could load: those whose memory cost fits its budget.

    Memory is the only candidacy filter; data relevance is desirability's job.
    """
    del client_id  # candidacy depends on the profile alone
    costs = _spec_costs(spec, num_experts)
    return tuple(e for e in range(num_experts) if costs[e] <= profile.memory_budget)


def normalized_usage(state: ScoreState) -> np.ndarray:
    """Usage scaled into [0, 1] by the current maximum (floor of 1)."""
    return state.usage / max(1.0, float(np.max(state.usage)))


def desirability(state: ScoreState, client_id: int, expert_id: int, w_f: float, w_u: float) -> float:
    """Composite assignment score ``w_f * f[c, e] - w_u * normalized_usage[e]``."""
    if not 0 <= client_id < state.num_clients:
        raise IndexError(f"client id {client_id} out of range [0, {state.num_clients})")
    if not 0 <= expert_id < state.num_experts:
        raise IndexError(f"expert id {expert_id} out of range [0, {state.num_experts})")
    u_hat = normalized_usage(state)[expert_id]
    return w_f * float(state.fitness[client_id, expert_id]) - w_u * float(u_hat)


def _desirability_row(state: ScoreState, client_id: int, w_f: float, w_u: float) -> np.ndarray:
    return w_f * state.fitness[client_id] - w_u * normalized_usage(state)


def _top_k(scores: np.ndarray, candidates: Sequence[int], k: int) -> tuple[int, ...]:
    # Ties break toward the lower expert id: sort by (-score, id).
    ranked = sorted(candidates, key=lambda e: (-scores[e], e))
    return tuple(ranked[: max(0, k)])


def assign_round(
    state: ScoreState,
    profiles: Sequence[ClientCapacityProfile],
    spec: SpecLike,
    participating_clients: Sequence[int],
    strategy: str,
    w_f: float,
    w_u: float,
    seed: int,
    system_cap: int | None = None,
) -> AssignmentPlan:
    """Compute one round's capacity-constrained expert assignment.

    ``load_balanced`` gives each client its top-k experts by desirability,
    ``greedy`` the same with the usage penalty forced to zero, and ``random``
    a seeded uniform draw from its candidates.  Identical inputs and seed
    always produce an identical plan; per-client draws are derived from
    ``(seed, client_id)`` so participant order never matters.
    """
    participants = list(participating_clients)
    if not participants:
        raise InputError("participating_clients must be non-empty")
    if len(set(participants)) != len(participants):
        raise InputError("participating_clients contains duplicates")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    if w_f < 0 or w_u < 0:
        raise ConfigError("weights must be non-negative")
    cap = state.num_experts if system_cap is None else system_cap

    assignments: dict[int, tuple[int, ...]] = {}
    limits: dict[int, int] = {}
    for c in sorted(participants):
        if not 0 <= c < state.num_clients:
            raise IndexError(f"client id {c} out of range [0, {state.num_clients})")
        if c >= len(profiles):
            raise IndexError(f"no capacity profile for client {c}")
        profile = profiles[c]
        k_c = max_experts(profile, spec, cap)
        limits[c] = k_c
        candidates = candidate_experts(c, profile, spec, state.num_experts)
        if k_c == 0 or not candidates:
            assignments[c] = ()
            continue
        if strategy == STRATEGY_RANDOM:
            rng = stream(seed, c)
            take = min(k_c, len(candidates))
            picked = rng.choice(len(candidates), size=take, replace=False)
            assignments[c] = tuple(sorted(candidates[i] for i in picked))
        else:
            w_u_eff = 0.0 if strategy == STRATEGY_GREEDY else w_u
            scores = _desirability_row(state, c, w_f, w_u_eff)
            assignments[c] = _top_k(scores, candidates, k_c)

    plan = AssignmentPlan(assignments=assignments, per_client_limit=limits, strategy=strategy)
    plan.validate(state.num_experts)
    return plan


def coverage_repair(
    plan: AssignmentPlan,
    state: ScoreState,
    profiles: Sequence[ClientCapacityProfile],
    spec: SpecLike,
    w_f: float = 1.0,
    w_u: float = 1.0,
) -> AssignmentPlan:
    """Give orphaned experts a trainer where some client can feasibly host one.

    Load-balanced plans only; other strategies pass through unchanged.  For
    each expert with no assignees (ascending id): prefer the lowest-id client
    with spare capacity and the expert in its candidate set; otherwise swap
    the orphan in at the (client, held expert) pair with the smallest
    desirability margin, provided the displaced expert keeps at least one
    other trainer.  Infeasible orphans stay unassigned.
    """
    if plan.strategy != STRATEGY_LOAD_BALANCED:
        return plan

    assignments = {c: list(es) for c, es in plan.assignments.items()}
    holders = {e: sum(1 for es in assignments.values() if e in es) for e in range(state.num_experts)}
    rows = {c: _desirability_row(state, c, w_f, w_u) for c in assignments}

    for orphan in range(state.num_experts):
        if holders[orphan] > 0:
            continue
        hosted = False
        for c in sorted(assignments):
            if len(assignments[c]) >= plan.per_client_limit[c]:
                continue
            if orphan not in candidate_experts(c, profiles[c], spec, state.num_experts):
                continue
            assignments[c].append(orphan)
            holders[orphan] += 1
            hosted = True
            break
        if hosted:
            continue
        # No spare capacity anywhere: swap at the smallest margin
        # desirability(held) - desirability(orphan), never orphaning the
        # displaced expert.
        best: tuple[float, int, int] | None = None
        for c in sorted(assignments):
            if orphan not in candidate_experts(c, profiles[c], spec, state.num_experts):
                continue
            for held in assignments[c]:
                if holders[held] < 2:
                    continue
                margin = float(rows[c][held] - rows[c][orphan])
                key = (margin, c, held)
                if best is None or key < best:
                    best = key
        if best is not None:
            _, c, held = best
            idx = assignments[c].index(held)
            assignments[c][idx] = orphan
            holders[held] -= 1
            holders[orphan] += 1

    repaired = AssignmentPlan(
        assignments={c: tuple(es) for c, es in assignments.items()},
        per_client_limit=dict(plan.per_client_limit),
        strategy=plan.strategy,
    )
    repaired.validate(state.num_experts)
    return repaired
