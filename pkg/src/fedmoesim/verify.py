"""User-runnable verification: gradient checking and assignment oracle.

Two independent oracles guard the trickiest code paths:

* central finite differences against the analytic gradients of the model.
  Expert parameters are checked against the selected-expert cross-entropy
  (routing is a function of the gate alone, so it stays fixed while an
  expert weight moves); gate parameters are checked against the expected
  detached expert loss under the gate distribution, the exact scalar whose
  gradient the trainer applies.

* brute-force subset enumeration against the load-balanced assignment:
  for every small instance, each client's selected expert set must equal
  the lexicographically-first maximizer of summed desirability over all
  subsets of its capacity size, with desirability recomputed here from
  scratch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import model, scheduler
from .rng import stream

GRAD_TOLERANCE = 1e-4
FD_STEP = 1e-4


@dataclass
class GradCheckResult:
    """Worst-case finite-difference comparison over one or more instances."""

    max_rel_error: float = 0.0
    worst_param: str = ""
    worst_index: tuple[int, ...] = ()
    analytic: float = 0.0
    numeric: float = 0.0
    params_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRAD_TOLERANCE


def _rel_error(a: float, n: float) -> float:
    # Absolute below 1, relative above: keeps tiny-gradient noise from
    # drowning the comparison while still scaling with large gradients.
    return abs(a - n) / max(1.0, abs(a), abs(n))


def _with_param(params: model.MoEParams, name: str, index: tuple[int, ...], value: float) -> model.MoEParams:
    """Copy of params with one scalar replaced."""
    if name == "gate_w" or name == "gate_b":
        arr = np.array(getattr(params, name))
        arr[index] = value
        return replace(params, **{name: arr})
    expert_str, part = name.split(".")
    e = int(expert_str.removeprefix("expert_"))
    arr = np.array(getattr(params.experts[e], part))
    arr[index] = value
    new_expert = replace(params.experts[e], **{part: arr})
    experts = tuple(new_expert if i == e else ep for i, ep in enumerate(params.experts))
    return replace(params, experts=experts)


def _named_grads(params: model.MoEParams, grads: model.MoEGrads) -> list[tuple[str, np.ndarray, bool]]:
    """(name, grad array, is_gate) per parameter block."""
    out: list[tuple[str, np.ndarray, bool]] = [
        ("gate_w", grads.gate_w, True),
        ("gate_b", grads.gate_b, True),
    ]
    for e in range(params.dims.num_experts):
        for part, arr in zip(("w1", "b1", "w2", "b2"), grads.experts[e]):
            out.append((f"expert_{e}.{part}", arr, False))
    return out


def grad_check_instance(
    params: model.MoEParams,
    batch: tuple[np.ndarray, np.ndarray],
    active_experts: list[int],
    step: float = FD_STEP,
    perturb: tuple[str, tuple[int, ...], float] | None = None,
    result: GradCheckResult | None = None,
) -> GradCheckResult:
    """Check every parameter of one instance by central differences.

    ``perturb`` injects a deliberate error into one analytic gradient entry
    (a test fixture for verifying that failures are located correctly).
    """
    res = result if result is not None else GradCheckResult()
    _, grads = model.loss_and_grad(params, batch, active_experts)
    if perturb is not None:
        p_name, p_index, amount = perturb
        for name, arr, _ in _named_grads(params, grads):
            if name == p_name:
                arr[p_index] += amount

    for name, grad_arr, is_gate in _named_grads(params, grads):
        objective = model.routing_objective if is_gate else model.task_loss
        base = np.array(grad_arr)
        for index in np.ndindex(base.shape):
            theta = _value_at(params, name, index)
            plus = objective(_with_param(params, name, index, theta + step), batch, active_experts)
            minus = objective(_with_param(params, name, index, theta - step), batch, active_experts)
            numeric = (plus - minus) / (2.0 * step)
            analytic = float(base[index])
            err = _rel_error(analytic, numeric)
            res.params_checked += 1
            if err > res.max_rel_error:
                res.max_rel_error = err
                res.worst_param = name
                res.worst_index = index
                res.analytic = analytic
                res.numeric = numeric
    return res


def _value_at(params: model.MoEParams, name: str, index: tuple[int, ...]) -> float:
    if name in ("gate_w", "gate_b"):
        return float(getattr(params, name)[index])
    expert_str, part = name.split(".")
    e = int(expert_str.removeprefix("expert_"))
    return float(getattr(params.experts[e], part)[index])


def random_instance(
    seed: int, instance_id: int
) -> tuple[model.MoEParams, tuple[np.ndarray, np.ndarray], list[int]]:
    """Small randomized model + batch for gradient checking."""
    rng = stream(seed, instance_id)
    input_dim = int(rng.integers(2, 7))
    hidden = int(rng.integers(2, 9))
    classes = int(rng.integers(2, 5))
    dims = model.ModelDims(input_dim, hidden, classes, 2)
    params = model.init_params(dims, int(rng.integers(0, 2**31)))
    # Jitter off the init manifold so biases are exercised too.
    params = replace(
        params,
        gate_w=params.gate_w + 0.3 * rng.standard_normal(params.gate_w.shape),
        gate_b=params.gate_b + 0.3 * rng.standard_normal(params.gate_b.shape),
        experts=tuple(
            replace(
                ep,
                w1=ep.w1 + 0.3 * rng.standard_normal(ep.w1.shape),
                b1=ep.b1 + 0.3 * rng.standard_normal(ep.b1.shape),
                w2=ep.w2 + 0.3 * rng.standard_normal(ep.w2.shape),
                b2=ep.b2 + 0.3 * rng.standard_normal(ep.b2.shape),
            )
            for ep in params.experts
        ),
    )
    x = rng.standard_normal((5, input_dim))
    y = rng.integers(0, classes, size=5)
    active = [[0], [1], [0, 1]][int(rng.integers(0, 3))]
    return params, (x, y), active


def run_grad_check(num_instances: int = 50, seed: int = 0, step: float = FD_STEP) -> GradCheckResult:
    """Finite-difference suite over randomized small instances."""
    res = GradCheckResult()
    for i in range(num_instances):
        params, batch, active = random_instance(seed, i)
        grad_check_instance(params, batch, active, step=step, result=res)
    return res


# --- assignment oracle -------------------------------------------------------


@dataclass
class OracleInstance:
    """One enumerated scheduling instance, small enough to brute-force."""

    num_clients: int
    num_experts: int
    fitness: np.ndarray
    usage: np.ndarray
    budgets: list[float]
    w_f: float
    w_u: float
    label: str

    def describe(self) -> str:
        return (
            f"{self.label}: {self.num_clients} clients x {self.num_experts} experts, "
            f"w_f={self.w_f}, w_u={self.w_u}, budgets={self.budgets},\n"
            f"fitness=\n{self.fitness}\nusage={self.usage}"
        )


@dataclass
class OracleCheckResult:
    instances_checked: int = 0
    mismatches: list[tuple[OracleInstance, int, set[int], set[int]]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.instances_checked > 0 and not self.mismatches


def brute_force_selection(
    fitness_row: np.ndarray, usage: np.ndarray, w_f: float, w_u: float, k: int
) -> set[int]:
    """Independent reference: exhaustive maximization of summed desirability.

    Desirability is recomputed inline; ties resolve to the lexicographically
    first subset, which is what per-expert lowest-id tie-breaking yields.
    """
    num_experts = len(fitness_row)
    if k <= 0:
        return set()
    denom = max(1.0, float(max(usage)))
    score = [w_f * float(fitness_row[e]) - w_u * float(usage[e]) / denom for e in range(num_experts)]
    best_combo: tuple[int, ...] | None = None
    best_sum = -np.inf
    for combo in itertools.combinations(range(num_experts), min(k, num_experts)):
        total = sum(score[e] for e in combo)
        if total > best_sum:
            best_sum = total
            best_combo = combo
    return set(best_combo) if best_combo else set()


def _instance_plan(inst: OracleInstance) -> scheduler.AssignmentPlan:
    state = scheduler.ScoreState(inst.fitness, inst.usage, alpha=0.5, delta=0.0, gamma=0.5)
    profiles = [
        scheduler.ClientCapacityProfile(
            compute_rate=1.0, memory_budget=b, bandwidth_down=1.0, bandwidth_up=1.0
        )
        for b in inst.budgets
    ]
    spec = scheduler.ExpertResourceSpec(memory_cost=1.0, param_bytes=1, compute_cost=1.0)
    return scheduler.assign_round(
        state,
        profiles,
        spec,
        list(range(inst.num_clients)),
        scheduler.STRATEGY_LOAD_BALANCED,
        inst.w_f,
        inst.w_u,
        seed=0,
        system_cap=2,
    )


def enumerate_instances(seed: int = 0, draws_per_shape: int = 24) -> list[OracleInstance]:
    """All (clients, experts) shapes up to 4x4 with k_c <= 2, mixing
    quantized continuous scores with tie-heavy coarse grids."""
    weightings = [(1.0, 1.0), (2.0, 0.5), (1.0, 0.0)]
    grid = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    usage_grid = np.array([0.0, 1.0, 2.0, 5.0])
    budget_choices = [0.5, 1.0, 2.0, 3.0]
    instances = []
    for num_clients in range(1, 5):
        for num_experts in range(1, 5):
            for w_f, w_u in weightings:
                for draw in range(draws_per_shape):
                    rng = stream(seed, num_clients, num_experts, int(w_f * 10), int(w_u * 10), draw)
                    tie_heavy = draw % 2 == 1
                    if tie_heavy:
                        fitness = rng.choice(grid, size=(num_clients, num_experts))
                        usage = rng.choice(usage_grid, size=num_experts)
                    else:
                        # Quantized so equal scores are exactly equal floats.
                        fitness = np.round(rng.uniform(0, 1, size=(num_clients, num_experts)), 3)
                        usage = np.round(rng.uniform(0, 5, size=num_experts), 3)
                    budgets = [budget_choices[int(rng.integers(0, 4))] for _ in range(num_clients)]
                    label = f"shape{num_clients}x{num_experts}/w{w_f}-{w_u}/draw{draw}"
                    instances.append(
                        OracleInstance(
                            num_clients=num_clients,
                            num_experts=num_experts,
                            fitness=fitness,
                            usage=usage,
                            budgets=budgets,
                            w_f=w_f,
                            w_u=w_u,
                            label=label,
                        )
                    )
    return instances


def run_oracle_check(seed: int = 0, draws_per_shape: int = 24) -> OracleCheckResult:
    """Compare assign_round(load_balanced) with brute force on every instance."""
    result = OracleCheckResult()
    for inst in enumerate_instances(seed, draws_per_shape):
        plan = _instance_plan(inst)
        result.instances_checked += 1
        for c in range(inst.num_clients):
            k = min(int(inst.budgets[c] // 1.0), 2)
            expected = brute_force_selection(inst.fitness[c], inst.usage, inst.w_f, inst.w_u, k)
            actual = set(plan.assignments[c])
            if actual != expected:
                result.mismatches.append((inst, c, expected, actual))
    return result
