"""Communication-round engine.

One round runs: participant selection -> capacity-constrained assignment
(plus optional coverage repair) -> local training on each participant ->
per-expert aggregation -> usage update -> fitness update, then evaluates the
new global model on a held-out task-uniform test set.  A synchronous
straggler model prices the round at the slowest participant's modeled time.

Rounds are strictly sequential (round r's assignment sees exactly rounds
0..r-1), but per-client training inside a round is independent; with
``workers > 1`` clients train in a thread pool and results reduce in
ascending client id, bit-identical to the sequential order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import datagen, model, scheduler
from .errors import ConfigError
from .rng import STREAM_ASSIGN, STREAM_SELECT, STREAM_SHUFFLE, derive_seed, stream


@dataclass(frozen=True)
class SimConfig:
    """Everything one simulation run depends on; the master seed is the only
    source of randomness."""

    # round structure
    num_rounds: int = 60
    clients_per_round: int = 8
    strategy: str = scheduler.STRATEGY_LOAD_BALANCED
    seed: int = 0
    workers: int = 1

    # scheduler
    alpha: float = 0.3
    delta: float = 0.02
    gamma: float = 0.9
    w_f: float = 1.0
    w_u: float = 1.0
    system_cap: int = 4
    coverage_repair: bool = True
    fitness_decay_target: float = 0.5

    # model
    input_dim: int = 16
    hidden_dim: int = 16
    num_classes: int = 4
    num_experts: int = 8

    # local training
    epochs: int = 1
    lr: float = 0.3
    batch_size: int = 50

    # data
    num_clients: int = 16
    samples_per_client: int = 1000
    noise_sigma: float = 0.3
    skew: float = 0.9
    test_samples: int = 2000

    # client capacity, cycled by client id
    memory_budgets: tuple[float, ...] = (2.0, 3.0, 1.0, 2.0)
    compute_rates: tuple[float, ...] = (20000.0, 40000.0, 10000.0)
    bandwidths_down: tuple[float, ...] = (1_000_000.0,)
    bandwidths_up: tuple[float, ...] = (500_000.0,)
    latencies: tuple[float, ...] = (0.05,)
    availability: tuple[float, ...] = (1.0,)

    # expert resource footprint (uniform across experts)
    expert_memory_cost: float = 1.0
    expert_param_bytes: int = 1_000_000
    expert_compute_cost: float = 1.0

    def validate(self) -> None:
        if self.num_rounds < 0:
            raise ConfigError(f"num_rounds must be >= 0, got {self.num_rounds}")
        for name in ("clients_per_round", "num_clients", "samples_per_client", "test_samples",
                     "input_dim", "hidden_dim", "num_classes", "num_experts",
                     "epochs", "batch_size", "workers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.strategy not in scheduler.STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigError(f"delta must be in [0, 1), got {self.delta}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.w_f < 0 or self.w_u < 0:
            raise ConfigError("w_f and w_u must be non-negative")
        if self.system_cap < 0:
            raise ConfigError(f"system_cap must be >= 0, got {self.system_cap}")
        if not 0.0 <= self.fitness_decay_target <= 1.0:
            raise ConfigError(f"fitness_decay_target must be in [0, 1], got {self.fitness_decay_target}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.skew <= 1.0:
            raise ConfigError(f"skew must be in [0, 1], got {self.skew}")
        if self.num_experts + self.num_classes > self.input_dim:
            raise ConfigError(
                "num_experts + num_classes must not exceed input_dim (task markers "
                "and class prototypes need orthogonal directions)"
            )
        for name in ("memory_budgets", "compute_rates", "bandwidths_down", "bandwidths_up",
                     "latencies", "availability"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        for p in self.availability:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"availability entries must be in [0, 1], got {p}")

    def dims(self) -> model.ModelDims:
        return model.ModelDims(self.input_dim, self.hidden_dim, self.num_classes, self.num_experts)

    def profile_for(self, client_id: int) -> scheduler.ClientCapacityProfile:
        def cyc(values: tuple, c: int):
            return values[c % len(values)]

        return scheduler.ClientCapacityProfile(
            compute_rate=cyc(self.compute_rates, client_id),
            memory_budget=cyc(self.memory_budgets, client_id),
            bandwidth_down=cyc(self.bandwidths_down, client_id),
            bandwidth_up=cyc(self.bandwidths_up, client_id),
            latency=cyc(self.latencies, client_id),
        )

    def availability_for(self, client_id: int) -> float:
        return self.availability[client_id % len(self.availability)]

    def expert_spec(self) -> scheduler.ExpertResourceSpec:
        return scheduler.ExpertResourceSpec(
            memory_cost=self.expert_memory_cost,
            param_bytes=self.expert_param_bytes,
            compute_cost=self.expert_compute_cost,
        )


@dataclass(frozen=True)
class World:
    """Deterministic derivation of a config: data, capacities, oracle map."""

    tasks: tuple[datagen.TaskSpec, ...]
    client_data: tuple[datagen.ClientDataset, ...]
    test_features: np.ndarray
    test_labels: np.ndarray
    profiles: tuple[scheduler.ClientCapacityProfile, ...]
    spec: scheduler.ExpertResourceSpec
    oracle: dict[int, int]


def build_world(config: SimConfig) -> World:
    """Materialize datasets and capacity profiles for a config (pure per seed)."""
    config.validate()
    tasks = datagen.gen_tasks(
        num_tasks=config.num_experts,
        input_dim=config.input_dim,
        num_classes=config.num_classes,
        noise_sigma=config.noise_sigma,
        seed=config.seed,
    )
    client_data = datagen.gen_client_data(
        tasks,
        num_clients=config.num_clients,
        samples_per_client=config.samples_per_client,
        seed=config.seed,
        skew=config.skew,
    )
    test_x, test_y = datagen.gen_test_data(tasks, config.test_samples, config.seed)
    profiles = tuple(config.profile_for(c) for c in range(config.num_clients))
    return World(
        tasks=tuple(tasks),
        client_data=tuple(client_data),
        test_features=test_x,
        test_labels=test_y,
        profiles=profiles,
        spec=config.expert_spec(),
        oracle=datagen.oracle_alignment(config.num_clients, config.num_experts),
    )


@dataclass(frozen=True)
class RoundRecord:
    """Everything that happened in one communication round."""

    round_index: int
    participants: tuple[int, ...]
    plan: scheduler.AssignmentPlan | None
    observations: tuple[scheduler.RewardObservation, ...]
    contributions: np.ndarray  # per-expert summed sample counts
    round_time_seconds: float
    accuracy: float
    loss: float
    skipped: bool = False

    def assignment_counts(self, num_experts: int) -> np.ndarray:
        """Clients assigned per expert this round (heatmap column increments)."""
        counts = np.zeros(num_experts, dtype=np.int64)
        if self.plan is not None:
            for experts in self.plan.assignments.values():
                for e in experts:
                    counts[e] += 1
        return counts


def select_clients(
    availability: Sequence[float], clients_per_round: int, round_seed: int
) -> tuple[int, ...]:
    """Draw this round's participants: availability coin per client, then a
    uniform subset of the available pool (everyone if the pool is small)."""
    if clients_per_round <= 0:
        raise ConfigError(f"clients_per_round must be positive, got {clients_per_round}")
    rng = stream(round_seed)
    available = [c for c, p in enumerate(availability) if rng.random() < p]
    if len(available) <= clients_per_round:
        return tuple(available)
    picked = rng.choice(len(available), size=clients_per_round, replace=False)
    return tuple(sorted(available[i] for i in picked))


def round_time(
    plan: scheduler.AssignmentPlan,
    profiles: Sequence[scheduler.ClientCapacityProfile],
    spec: scheduler.SpecLike,
    samples_per_client: int | Sequence[int],
    epochs: int,
) -> float:
    """Synchronous straggler model: the slowest participant prices the round.

    Per client: two latency hits, expert download, local compute over
    epochs * samples * summed expert cost, expert upload.  Empty assignments
    cost nothing.
    """
    worst = 0.0
    for c, experts in plan.assignments.items():
        if not experts:
            continue
        p = profiles[c]
        n = samples_per_client if isinstance(samples_per_client, int) else samples_per_client[c]
        total_bytes = sum(scheduler.spec_for(spec, e).param_bytes for e in experts)
        total_cost = sum(scheduler.spec_for(spec, e).compute_cost for e in experts)
        t = (
            2.0 * p.latency
            + total_bytes / p.bandwidth_down
            + epochs * n * total_cost / p.compute_rate
            + total_bytes / p.bandwidth_up
        )
        worst = max(worst, t)
    return worst


def _reward(stats: model.RoutingStats, expert_id: int, total_samples: int, num_classes: int) -> float:
    """Reward = routed-share * (1 - normalized loss), both clamped to [0, 1].

    The share term captures how often the client's gate picked the expert;
    the loss term normalizes by ln(num_classes), the uniform-prediction loss.
    """
    count = int(stats.counts[expert_id])
    if count == 0 or total_samples == 0:
        return 0.0
    share = count / total_samples
    norm = np.log(num_classes) if num_classes > 1 else 1.0
    loss_hat = min(1.0, max(0.0, float(stats.mean_loss[expert_id]) / norm))
    return min(1.0, max(0.0, share * (1.0 - loss_hat)))


def _train_one(
    params: model.MoEParams,
    config: SimConfig,
    world: World,
    client_id: int,
    assigned: tuple[int, ...],
    round_index: int,
) -> model.ClientUpdate | None:
    ds = world.client_data[client_id]
    result = model.local_train(
        params,
        assigned,
        ds.features,
        ds.labels,
        epochs=config.epochs,
        lr=config.lr,
        batch_size=config.batch_size,
        seed=derive_seed(config.seed, STREAM_SHUFFLE, round_index, client_id),
    )
    if result is None:
        return None
    expert_weights, (gate_w, gate_b), stats = result
    return model.ClientUpdate(
        client_id=client_id,
        expert_weights=expert_weights,
        gate_w=gate_w,
        gate_b=gate_b,
        stats=stats,
    )


def run_round(
    params: model.MoEParams,
    state: scheduler.ScoreState,
    config: SimConfig,
    round_index: int,
    world: World | None = None,
) -> tuple[model.MoEParams, scheduler.ScoreState, RoundRecord]:
    """Execute one communication round; pure given (inputs, derived seeds)."""
    if world is None:
        world = build_world(config)

    participants = select_clients(
        [config.availability_for(c) for c in range(config.num_clients)],
        config.clients_per_round,
        derive_seed(config.seed, STREAM_SELECT, round_index),
    )
    if not participants:
        accuracy, loss = model.evaluate(params, world.test_features, world.test_labels)
        record = RoundRecord(
            round_index=round_index,
            participants=(),
            plan=None,
            observations=(),
            contributions=np.zeros(config.num_experts),
            round_time_seconds=0.0,
            accuracy=accuracy,
            loss=loss,
            skipped=True,
        )
        return params, state, record

    plan = scheduler.assign_round(
        state,
        world.profiles,
        world.spec,
        participants,
        config.strategy,
        config.w_f,
        config.w_u,
        seed=derive_seed(config.seed, STREAM_ASSIGN, round_index),
        system_cap=config.system_cap,
    )
    if config.coverage_repair:
        plan = scheduler.coverage_repair(plan, state, world.profiles, world.spec, config.w_f, config.w_u)

    trainees = [(c, plan.assignments[c]) for c in sorted(plan.assignments) if plan.assignments[c]]
    if config.workers > 1 and len(trainees) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(_train_one, params, config, world, c, assigned, round_index)
                for c, assigned in trainees
            ]
            results = [f.result() for f in futures]
    else:
        results = [_train_one(params, config, world, c, assigned, round_index) for c, assigned in trainees]
    updates = [u for u in results if u is not None]

    new_params = model.aggregate(params, updates)

    observations = []
    stats_by_client = {u.client_id: u.stats for u in updates}
    for c, assigned in trainees:
        stats = stats_by_client[c]
        n_c = len(world.client_data[c])
        for e in assigned:
            observations.append(
                scheduler.RewardObservation(
                    client_id=c,
                    expert_id=e,
                    reward=_reward(stats, e, n_c, config.num_classes),
                    sample_contribution=int(stats.counts[e]),
                )
            )

    contributions = np.zeros(config.num_experts)
    for obs in observations:
        contributions[obs.expert_id] += obs.sample_contribution

    new_state = scheduler.update_usage(state, contributions)
    new_state = scheduler.update_fitness(new_state, observations, config.fitness_decay_target)

    seconds = round_time(
        plan,
        world.profiles,
        world.spec,
        [len(ds) for ds in world.client_data],
        config.epochs,
    )
    accuracy, loss = model.evaluate(new_params, world.test_features, world.test_labels)

    record = RoundRecord(
        round_index=round_index,
        participants=participants,
        plan=plan,
        observations=tuple(observations),
        contributions=contributions,
        round_time_seconds=seconds,
        accuracy=accuracy,
        loss=loss,
    )
    return new_params, new_state, record


ProgressFn = Callable[[RoundRecord], None]


def run_simulation(
    config: SimConfig,
    world: World | None = None,
    progress: ProgressFn | None = None,
) -> tuple[model.MoEParams, scheduler.ScoreState, list[RoundRecord]]:
    """Fold run_round over num_rounds; the record list is a pure function of
    the config."""
    config.validate()
    if world is None:
        world = build_world(config)
    params = model.init_params(config.dims(), config.seed)
    state = scheduler.init_scores(
        config.num_clients, config.num_experts, config.alpha, config.delta, config.gamma
    )
    records: list[RoundRecord] = []
    for r in range(config.num_rounds):
        params, state, record = run_round(params, state, config, r, world)
        records.append(record)
        if progress is not None:
            progress(record)
    return params, state, records
