"""Orchestration of the federated training loop and attack scheduling.

One round: broadcast the global model, let the sampled clients train locally,
let active attackers replace their submissions with a crafted update, apply
the configured aggregation rule, and take a global step. The whole experiment
is a pure function of (config, datasets, seed).

Updates travel gradient-style: client i submits g^t - w_i and the server
applies g^{t+1} = g^t - eta * aggregate(updates), so the global model moves
toward the trained local models.

Malicious clients are by convention the first n_attackers client indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks
from .aggregation import AggregatorSpec, aggregate, validate_spec
from .attacks import FmpaConfig, PreciseConfig, SmoothingState
from .data import Dataset, PartitionSpec, partition
from .errors import ConfigError, ContractError
from .model import LabeledBatch, MlpArchitecture, accuracy, ce_loss, init_params, local_train
from .seeding import derive_seed
from .vecmath import coordwise_stats

ATTACK_NAMES = (
    "none",
    "indiscriminate",
    "precise",
    "agr_tailored",
    "lie",
    "ipm",
    "mpaf",
    "min_max",
    "min_sum",
)

# seed-stream tags so every random decision draws from its own stream
_INIT, _PARTITION, _CLIENT, _SAMPLE, _AGG, _MPAF, _CRAFT, _ORACLE = range(8)


@dataclass(frozen=True)
class Schedule:
    """When attackers act: every round, or every f-th round."""

    mode: str = "fixed_attackers"
    frequency: int = 1

    def __post_init__(self):
        if self.mode not in ("fixed_attackers", "fixed_frequency"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        if self.frequency < 1:
            raise ConfigError("attack frequency must be >= 1")


def schedule_attackers(schedule: Schedule, round_index: int) -> bool:
    if schedule.mode == "fixed_attackers":
        return True
    return round_index % schedule.frequency == 0


def sample_clients(n_clients: int, rate: float, seed: int, round_index: int) -> np.ndarray:
    """ceil(rate*N) distinct client indices, deterministic per (seed, round)."""
    if not 0.0 < rate <= 1.0:
        raise ContractError(f"sampling rate must lie in (0,1], got {rate}")
    k = math.ceil(rate * n_clients)
    rng = np.random.default_rng([seed, round_index, _SAMPLE])
    return np.sort(rng.choice(n_clients, size=k, replace=False))


def attack_impact(acc_benign: float, acc_attacked: float) -> float:
    """Relative accuracy degradation in percent."""
    if acc_benign <= 0:
        raise ContractError("benign accuracy must be positive")
    return (acc_benign - acc_attacked) / acc_benign * 100.0


def attack_deviation(expected_drop: float, acc_benign: float, acc_attacked: float) -> float:
    """|expected - actual| accuracy drop in percentage points (inputs in [0,100])."""
    return abs(expected_drop - (acc_benign - acc_attacked))


@dataclass
class AttackPlan:
    """Which attack runs and with what knobs."""

    name: str = "none"
    fmpa: FmpaConfig = field(default_factory=FmpaConfig)
    precise: PreciseConfig = field(default_factory=PreciseConfig)
    lie_z: float | None = None  # None -> quantile rule from (N, m)
    ipm_eps: float = 0.5
    mpaf_scale: float = 10.0
    direction: str = "unit"
    gamma_init: float = 10.0
    gamma_tol: float = 1e-3
    omniscient: bool = False

    def __post_init__(self):
        if self.name not in ATTACK_NAMES:
            raise ConfigError(f"unknown attack {self.name!r}")


@dataclass(frozen=True)
class FlConfig:
    """All protocol-level settings for one experiment."""

    n_clients: int = 100
    n_attackers: int = 20
    rounds: int = 120
    local_epochs: int = 3
    batch_size: int = 16
    eta: float = 0.05
    local_lr: float = 0.001
    sampling_rate: float = 1.0
    partition_mode: str = "iid"
    bias: float = 0.0
    aggregator: AggregatorSpec = field(default_factory=lambda: AggregatorSpec("fedavg"))
    attack: AttackPlan = field(default_factory=AttackPlan)
    schedule: Schedule = field(default_factory=Schedule)
    seeds: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("need at least one round")
        if self.n_attackers < 0 or self.n_clients < 1:
            raise ConfigError("client counts out of range")
        if self.attack.name != "none" and self.n_attackers / self.n_clients >= 0.5:
            raise ConfigError(
                f"attacker fraction must stay below 50% "
                f"(m={self.n_attackers}, N={self.n_clients})"
            )
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("local epochs and batch size must be >= 1")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ConfigError("sampling rate must lie in (0,1]")
        validate_spec(self.aggregator, math.ceil(self.sampling_rate * self.n_clients))


@dataclass
class RoundTrace:
    round_index: int
    test_accuracy: float
    train_loss: float
    kept_clients: tuple[int, ...]
    attacker_active: bool


@dataclass
class SeedOutcome:
    seed: int
    benign_trace: list[RoundTrace]
    attacked_trace: list[RoundTrace]
    acc_benign: float  # best benign test accuracy, fraction
    acc_attacked_best: float
    acc_attacked_final: float
    phi: float  # attack impact, percent
    deviation: float | None  # percentage points, precise attack only


@dataclass
class ExperimentRecord:
    outcomes: list[SeedOutcome]
    summary: dict[str, float]


class _AttackRuntime:
    """Per-pass mutable attacker state (smoothing, cached lambda, rho history)."""

    def __init__(self, plan: AttackPlan, cfg: FlConfig, target_accuracy: float | None):
        self.plan = plan
        self.smoothing = SmoothingState(alpha=plan.fmpa.alpha)
        self.lam = plan.fmpa.lam
        self.rho_history: list[tuple[float, float]] = []
        self.last_rho: float | None = None
        self.target_accuracy = target_accuracy
        if plan.name == "precise" and target_accuracy is None:
            raise ContractError("precise attack needs the benign reference accuracy")
        self.mpaf_base: np.ndarray | None = None

    @property
    def predictive(self) -> bool:
        return self.plan.name in ("indiscriminate", "precise")


def _resolve_lambda(runtime, arch, g, batches, cfg, round_index, seed, tau):
    """Find the largest perturbation coefficient that still early-stops."""
    plan = runtime.plan

    def kappa(lam):
        if plan.name == "precise":
            res = attacks.craft_precise(
                arch, g, runtime.smoothing, batches, plan.fmpa, lam,
                target_accuracy=tau, rho=1.0,
                round_index=round_index, local_epochs=cfg.local_epochs,
                batch_size=cfg.batch_size, local_lr=cfg.local_lr, seed=seed,
            )
        else:
            res = attacks.craft_indiscriminate(
                arch, g, runtime.smoothing, batches,
                replace(plan.fmpa, tau=tau), lam,
                round_index=round_index, local_epochs=cfg.local_epochs,
                batch_size=cfg.batch_size, local_lr=cfg.local_lr, seed=seed,
            )
        return res.early_stop

    lam, found = attacks.search_lambda(kappa, plan.fmpa.lambda_init, plan.fmpa.lambda_eps)
    return lam if found else 0.0


def _craft_update(
    runtime: _AttackRuntime,
    cfg: FlConfig,
    arch: MlpArchitecture,
    g: np.ndarray,
    prev_update: np.ndarray | None,
    attacker_ids: list[int],
    attacker_batches: list[LabeledBatch],
    client_seeds: list[int],
    benign_updates: list[np.ndarray],
    round_index: int,
    seed: int,
) -> np.ndarray | None:
    """The single malicious update every active attacker submits (None = behave benignly)."""
    plan = runtime.plan
    m_active = len(attacker_ids)

    if plan.name in ("indiscriminate", "precise"):
        if round_index < 1:
            return None
        tau = plan.fmpa.tau
        if plan.name == "precise":
            tau = runtime.target_accuracy - plan.precise.xi / 100.0
            tau = min(max(tau, 1e-6), 1.0 - 1e-6)
        elif tau is None:
            tau = 1.0 / arch.num_classes
        if runtime.lam is None or plan.fmpa.lambda_research:
            runtime.lam = _resolve_lambda(
                runtime, arch, g, attacker_batches, cfg, round_index,
                derive_seed(seed, round_index, _CRAFT), tau,
            )
        craft_seed = derive_seed(seed, _CRAFT)
        if plan.name == "indiscriminate":
            res = attacks.craft_indiscriminate(
                arch, g, runtime.smoothing, attacker_batches,
                replace(plan.fmpa, tau=tau), runtime.lam,
                round_index=round_index, local_epochs=cfg.local_epochs,
                batch_size=cfg.batch_size, local_lr=cfg.local_lr,
                seed=craft_seed, client_seeds=client_seeds,
            )
            return res.update if res.attacked else None

        # precise: resolve the scaling factor, observing last round's effect
        pooled = attacks.pool_batches(attacker_batches)
        _, val = attacks.split_train_val(
            pooled, plan.fmpa.val_fraction, [craft_seed, round_index, 5]
        )
        if runtime.last_rho is not None:
            runtime.rho_history.append((runtime.last_rho, accuracy(arch, g, val)))
        if plan.precise.rho is not None:
            rho = plan.precise.rho
        elif plan.precise.use_known_constants:
            rho = cfg.n_clients / (cfg.eta * m_active)
        else:
            rho = attacks.search_rho(
                runtime.rho_history, tau,
                plan.precise.growth, plan.precise.cap, plan.precise.margin,
            )
        runtime.last_rho = rho
        res = attacks.craft_precise(
            arch, g, runtime.smoothing, attacker_batches, plan.fmpa, runtime.lam,
            target_accuracy=tau, rho=rho,
            round_index=round_index, local_epochs=cfg.local_epochs,
            batch_size=cfg.batch_size, local_lr=cfg.local_lr,
            seed=craft_seed, client_seeds=client_seeds,
        )
        return res.update if res.attacked else None

    # baseline attacks build on the attackers' would-be honest updates
    honest = [
        g - local_train(arch, g, b, cfg.local_epochs, cfg.batch_size, cfg.local_lr, s)
        for b, s in zip(attacker_batches, client_seeds)
    ]
    visible = benign_updates + honest if plan.omniscient else honest

    if plan.name == "lie":
        mean, std = coordwise_stats(visible)
        z = plan.lie_z if plan.lie_z is not None else attacks.lie_z(
            cfg.n_clients, cfg.n_attackers
        )
        return attacks.lie_attack(mean, std, z)
    if plan.name == "ipm":
        mean, _ = coordwise_stats(visible)
        return attacks.ipm_attack(mean, plan.ipm_eps)
    if plan.name == "mpaf":
        if runtime.mpaf_base is None:
            runtime.mpaf_base = init_params(arch, derive_seed(seed, _MPAF))
        return attacks.mpaf_attack(g, runtime.mpaf_base, plan.mpaf_scale)
    if plan.name == "min_max":
        return attacks.min_max_attack(visible, plan.direction, plan.gamma_init, plan.gamma_tol)
    if plan.name == "min_sum":
        return attacks.min_sum_attack(visible, plan.direction, plan.gamma_init, plan.gamma_tol)
    if plan.name == "agr_tailored":
        oracle_seed = derive_seed(seed, round_index, _ORACLE)
        oracle = lambda ups: aggregate(
            cfg.aggregator, ups, prev_global_update=prev_update, seed=oracle_seed
        )
        return attacks.agr_tailored_attack(
            visible, g, oracle, m_active, plan.gamma_init, plan.gamma_tol
        )
    raise ConfigError(f"unknown attack {plan.name!r}")


@dataclass
class RoundState:
    """Global model plus attacker-side state, carried round to round."""

    global_params: np.ndarray
    round_index: int = 0
    prev_update: np.ndarray | None = None
    runtime: _AttackRuntime | None = None


def run_round(
    cfg: FlConfig,
    arch: MlpArchitecture,
    client_batches: list[LabeledBatch],
    state: RoundState,
    seed: int,
) -> tuple[RoundState, tuple[int, ...], bool]:
    """Advance the protocol one round.

    Returns (next state, kept client ids, attacker-active flag). The attacker
    smoothing state is folded over the broadcast model whether or not the
    attack fires this round.
    """
    g = state.global_params
    t = state.round_index
    runtime = state.runtime
    if runtime is not None and runtime.predictive:
        runtime.smoothing = attacks.smoothing_update(runtime.smoothing, g)

    participants = sample_clients(cfg.n_clients, cfg.sampling_rate, seed, t)
    attacker_ids = [int(i) for i in participants if i < cfg.n_attackers]
    active = (
        runtime is not None
        and schedule_attackers(cfg.schedule, t)
        and len(attacker_ids) > 0
    )

    def honest_update(i: int) -> np.ndarray:
        w = local_train(
            arch, g, client_batches[i], cfg.local_epochs, cfg.batch_size,
            cfg.local_lr, derive_seed(seed, t, i, _CLIENT),
        )
        return g - w

    updates: dict[int, np.ndarray] = {}
    for i in participants:
        i = int(i)
        if active and i < cfg.n_attackers:
            continue  # replaced by the crafted update below
        updates[i] = honest_update(i)

    if active:
        benign_updates = [updates[i] for i in sorted(updates)]
        crafted = _craft_update(
            runtime, cfg, arch, g, state.prev_update,
            attacker_ids, [client_batches[i] for i in attacker_ids],
            [derive_seed(seed, t, i, _CLIENT) for i in attacker_ids],
            benign_updates, t, seed,
        )
        if crafted is None:
            active = False
            for i in attacker_ids:  # behave exactly as benign clients
                updates[i] = honest_update(i)
        else:
            for i in attacker_ids:
                updates[i] = crafted

    ordered_ids = sorted(updates)
    outcome = aggregate(
        cfg.aggregator,
        [updates[i] for i in ordered_ids],
        prev_global_update=state.prev_update,
        seed=derive_seed(seed, t, _AGG),
    )
    next_state = RoundState(
        global_params=g - cfg.eta * outcome.update,
        round_index=t + 1,
        prev_update=outcome.update,
        runtime=runtime,
    )
    kept_clients = tuple(ordered_ids[k] for k in outcome.kept)
    return next_state, kept_clients, bool(active)


def run_pass(
    cfg: FlConfig,
    arch: MlpArchitecture,
    client_batches: list[LabeledBatch],
    train_batch: LabeledBatch,
    test_batch: LabeledBatch,
    seed: int,
    attack: AttackPlan | None,
    target_accuracy: float | None = None,
) -> list[RoundTrace]:
    """One full training run (benign when attack is None)."""
    state = RoundState(
        global_params=init_params(arch, derive_seed(seed, _INIT)),
        runtime=_AttackRuntime(attack, cfg, target_accuracy) if attack else None,
    )
    traces: list[RoundTrace] = []
    for t in range(cfg.rounds):
        state, kept, active = run_round(cfg, arch, client_batches, state, seed)
        traces.append(
            RoundTrace(
                round_index=t,
                test_accuracy=accuracy(arch, state.global_params, test_batch),
                train_loss=ce_loss(arch, state.global_params, train_batch),
                kept_clients=kept,
                attacker_active=active,
            )
        )
    return traces


def run_experiment(
    cfg: FlConfig,
    arch: MlpArchitecture,
    train_ds: Dataset,
    test_ds: Dataset,
) -> ExperimentRecord:
    """Benign and attacked passes per seed, with impact/deviation metrics.

    Both passes share the data partition and every client seed so the metric
    differences isolate the attack itself.
    """
    train_batch = LabeledBatch(train_ds.inputs, train_ds.labels)
    test_batch = LabeledBatch(test_ds.inputs, test_ds.labels)
    outcomes: list[SeedOutcome] = []

    for seed in cfg.seeds:
        spec = PartitionSpec(
            cfg.partition_mode, cfg.n_clients, cfg.bias, seed=derive_seed(seed, _PARTITION)
        )
        parts = partition(train_ds, spec)
        client_batches = [LabeledBatch(p.inputs, p.labels) for p in parts]

        benign = run_pass(cfg, arch, client_batches, train_batch, test_batch, seed, None)
        acc_benign = max(tr.test_accuracy for tr in benign)

        if cfg.attack.name == "none":
            attacked = benign
        else:
            attacked = run_pass(
                cfg, arch, client_batches, train_batch, test_batch, seed,
                cfg.attack, target_accuracy=acc_benign,
            )
        acc_best = max(tr.test_accuracy for tr in attacked)
        acc_final = attacked[-1].test_accuracy
        phi = attack_impact(acc_benign * 100.0, acc_best * 100.0)
        deviation = (
            attack_deviation(cfg.attack.precise.xi, acc_benign * 100.0, acc_final * 100.0)
            if cfg.attack.name == "precise"
            else None
        )
        outcomes.append(
            SeedOutcome(seed, benign, attacked, acc_benign, acc_best, acc_final, phi, deviation)
        )

    def _stats(values):
        arr = np.array(values, dtype=float)
        return float(arr.mean()), float(arr.std())

    summary: dict[str, float] = {}
    summary["acc_benign_mean"], summary["acc_benign_std"] = _stats(
        [o.acc_benign for o in outcomes]
    )
    summary["acc_attacked_best_mean"], summary["acc_attacked_best_std"] = _stats(
        [o.acc_attacked_best for o in outcomes]
    )
    summary["acc_attacked_final_mean"], summary["acc_attacked_final_std"] = _stats(
        [o.acc_attacked_final for o in outcomes]
    )
    summary["phi_mean"], summary["phi_std"] = _stats([o.phi for o in outcomes])
    if all(o.deviation is not None for o in outcomes):
        summary["deviation_mean"], summary["deviation_std"] = _stats(
            [o.deviation for o in outcomes]
        )
    return ExperimentRecord(outcomes, summary)
