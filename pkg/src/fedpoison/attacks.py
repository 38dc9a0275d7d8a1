"""Attack crafting: the predictive poisoning family and six baseline attacks.

The predictive family forecasts the next global model with double exponential
smoothing, fine-tunes that reference into a low-accuracy model under a
perturbation penalty, and disguises the resulting update. Its two variants are
"indiscriminate" (drive accuracy to chance, staying inside a certified radius
of the expected benign update) and "precise" (hit an exact accuracy drop by
inverting the server's averaging step).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import ContractError
from .seeding import derive_seed
from .model import (
    LabeledBatch,
    MlpArchitecture,
    OptimizerState,
    accuracy,
    adam_step,
    local_train,
    minibatches,
    poison_objective,
)
from .vecmath import coordwise_stats, l2_norm, project_to_ball

REFERENCE_MODES = ("historical", "average", "predictive")


# ------------------------------------------------------------- forecasting


@dataclass
class SmoothingState:
    """First and second order exponential smoothing of the global model."""

    alpha: float = 0.7
    s1: np.ndarray | None = None
    s2: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ContractError(f"smoothing factor must lie in (0,1), got {self.alpha}")

    @property
    def initialized(self) -> bool:
        return self.s1 is not None


def smoothing_update(state: SmoothingState, g_t: np.ndarray) -> SmoothingState:
    """Fold one observed global model into the smoothing state (pure)."""
    g = np.asarray(g_t, dtype=np.float64)
    if not state.initialized:
        return SmoothingState(state.alpha, g.copy(), g.copy())
    if state.s1.shape != g.shape:
        raise ContractError("dimension changed mid-experiment")
    a = state.alpha
    s1 = a * g + (1 - a) * state.s1
    s2 = a * s1 + (1 - a) * state.s2
    return SmoothingState(a, s1, s2)


def predict_reference(state: SmoothingState) -> np.ndarray:
    """Next-round model estimate: (2-a)/(1-a) s1 - 1/(1-a) s2."""
    if not state.initialized:
        raise ContractError("smoothing state has not seen any global model yet")
    a = state.alpha
    return (2 - a) / (1 - a) * state.s1 - 1.0 / (1 - a) * state.s2


def reference_model(
    mode: str,
    state: SmoothingState,
    g_t: np.ndarray,
    local_models: list[np.ndarray] | None = None,
) -> np.ndarray:
    """The attacker's stand-in for the next benign global model."""
    if mode == "historical":
        return np.asarray(g_t, dtype=np.float64).copy()
    if mode == "average":
        if not local_models:
            raise ContractError("average reference needs at least one local model")
        return np.mean(local_models, axis=0)
    if mode == "predictive":
        return predict_reference(state)
    raise ContractError(f"unknown reference mode {mode!r}")


def certified_radius(updates: list[np.ndarray], reference_update: np.ndarray) -> float:
    """Largest distance from the attacker's honest updates to the reference update."""
    if not updates:
        raise ContractError("need at least one update for the radius")
    return max(l2_norm(u - reference_update) for u in updates)


# ------------------------------------------------------------- configs/results


@dataclass
class FmpaConfig:
    """Knobs for the predictive poisoning optimizer.

    tau None means "resolve to 1/num_classes at runtime"; lam None means
    "binary-search once at the first attacked round and reuse".
    """

    tau: float | None = None
    lam: float | None = None
    lambda_init: float = 1.0
    lambda_eps: float = 1e-3
    lambda_research: bool = False
    epochs: int = 5
    lr: float = 0.01
    reference: str = "predictive"
    alpha: float = 0.7
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.tau is not None and not 0.0 < self.tau < 1.0:
            raise ContractError(f"tau must lie in (0,1), got {self.tau}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractError("validation fraction must lie in (0,1)")
        if self.reference not in REFERENCE_MODES:
            raise ContractError(f"unknown reference mode {self.reference!r}")


@dataclass
class PreciseConfig:
    """Settings for the exact-accuracy-drop variant."""

    xi: float = 10.0  # desired accuracy drop, percentage points
    rho: float | None = None  # explicit scaling factor; None resolves at runtime
    use_known_constants: bool = True  # rho = N/(eta*m) when the attacker knows them
    growth: float = 1.5
    cap: float = 1e4
    margin: float = 0.02  # accuracy dead zone (fraction) for the rho controller

    def __post_init__(self):
        if not 0.0 <= self.xi < 100.0:
            raise ContractError("expected drop must lie in [0, 100) points")
        if self.rho is not None and self.rho <= 0:
            raise ContractError("rho must be positive")
        if self.growth <= 1.0:
            raise ContractError("growth factor must exceed 1")


@dataclass
class MaliciousResult:
    """Crafted model/update plus optimization diagnostics."""

    model: np.ndarray
    update: np.ndarray
    radius: float
    attacked: bool
    early_stop: bool = False
    epochs_used: int = 0
    val_accuracy: float = float("nan")
    rho: float | None = None


# ------------------------------------------------------------- optimization core


def split_train_val(
    pooled: LabeledBatch, val_fraction: float, seed_keys
) -> tuple[LabeledBatch, LabeledBatch]:
    """Deterministic shuffled split; both sides always get at least one sample."""
    n = len(pooled)
    if n < 2:
        return pooled, pooled
    rng = np.random.default_rng(seed_keys)
    order = rng.permutation(n)
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    return pooled.subset(order[n_val:]), pooled.subset(order[:n_val])


def pool_batches(batches: list[LabeledBatch]) -> LabeledBatch:
    if not batches:
        raise ContractError("no attacker data")
    return LabeledBatch(
        np.vstack([b.inputs for b in batches]),
        np.concatenate([b.labels for b in batches]),
    )


def optimize_poison_model(
    arch: MlpArchitecture,
    start: np.ndarray,
    reference: np.ndarray,
    train: LabeledBatch,
    val: LabeledBatch,
    tau: float,
    lam: float,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
):
    """Adam on the poisoning objective until validation accuracy drops to tau.

    The early-stop check runs before the first step and after every
    mini-batch step; a start model already at or below tau is returned
    untouched (otherwise the fine-grained variant would drift one step lower
    every round). Returns (model, early_stop, epochs_used, val_accuracy).
    """
    theta = start.copy()
    start_acc = accuracy(arch, theta, val)
    if start_acc <= tau:
        return theta, True, 0, start_acc
    opt = OptimizerState.fresh(theta.shape[0], lr)
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 3, epoch])
        for idx in minibatches(len(train), batch_size, rng):
            _, grad = poison_objective(arch, theta, reference, train.subset(idx), lam)
            theta, opt = adam_step(opt, theta, grad)
            acc = accuracy(arch, theta, val)
            if acc <= tau:
                return theta, True, epoch, acc
    return theta, False, epochs, accuracy(arch, theta, val)


def _honest_attacker_updates(
    arch, g_t, attacker_batches, local_epochs, batch_size, local_lr, client_seeds
):
    """Gradient-style updates (g_t - w_i) the attacker's clients would submit."""
    updates = []
    for batch, cseed in zip(attacker_batches, client_seeds):
        w = local_train(arch, g_t, batch, local_epochs, batch_size, local_lr, cseed)
        updates.append(g_t - w)
    return updates


def craft_indiscriminate(
    arch: MlpArchitecture,
    g_t: np.ndarray,
    state: SmoothingState,
    attacker_batches: list[LabeledBatch],
    cfg: FmpaConfig,
    lam: float,
    *,
    round_index: int,
    local_epochs: int,
    batch_size: int,
    local_lr: float,
    seed: int,
    client_seeds: list[int] | None = None,
) -> MaliciousResult:
    """One round of the accuracy-to-chance poisoning attack.

    Trains the attacker's clients honestly to measure the certified radius,
    fine-tunes the reference model to validation accuracy <= tau, and projects
    the resulting update onto the radius ball around the expected benign
    update. Every controlled client submits the same result.
    """
    if round_index < 1:
        # round 0 only primes the smoothing state; nothing to submit
        return MaliciousResult(g_t.copy(), np.zeros_like(g_t), 0.0, attacked=False)
    if cfg.tau is None:
        raise ContractError("tau must be resolved before crafting")
    if client_seeds is None:
        client_seeds = [derive_seed(seed, round_index, i) for i in range(len(attacker_batches))]

    pooled = pool_batches(attacker_batches)
    train, val = split_train_val(pooled, cfg.val_fraction, [seed, round_index, 5])
    honest = _honest_attacker_updates(
        arch, g_t, attacker_batches, local_epochs, batch_size, local_lr, client_seeds
    )
    reference = reference_model(
        cfg.reference, state, g_t, [g_t - u for u in honest]
    )
    expected_update = g_t - reference
    radius = certified_radius(honest, expected_update)

    theta, early, epochs_used, val_acc = optimize_poison_model(
        arch, reference, reference, train, val,
        cfg.tau, lam, cfg.epochs, cfg.lr, batch_size,
        seed=derive_seed(seed, round_index, 7),
    )
    update = project_to_ball(g_t - theta, expected_update, radius)
    return MaliciousResult(
        theta, update, radius, attacked=True,
        early_stop=early, epochs_used=epochs_used, val_accuracy=val_acc,
    )


def precise_update(
    honest_mean: np.ndarray, reference: np.ndarray, target: np.ndarray, rho: float
) -> np.ndarray:
    """Update that makes plain averaging land on the target model.

    With rho = N/(eta*m) and a perfect reference this inverts the server's
    averaging step exactly: honest_mean + rho * (reference - target).
    """
    return honest_mean + rho * (reference - target)


def craft_precise(
    arch: MlpArchitecture,
    g_t: np.ndarray,
    state: SmoothingState,
    attacker_batches: list[LabeledBatch],
    cfg: FmpaConfig,
    lam: float,
    target_accuracy: float,
    rho: float,
    *,
    round_index: int,
    local_epochs: int,
    batch_size: int,
    local_lr: float,
    seed: int,
    client_seeds: list[int] | None = None,
    reference_override: np.ndarray | None = None,
) -> MaliciousResult:
    """One round of the exact-accuracy-drop attack.

    Obtains a target model with validation accuracy <= target_accuracy (no
    radius, no projection), then submits nabla + rho * (reference - target) so
    that averaging lands the next global model on the target.
    """
    if round_index < 1:
        return MaliciousResult(g_t.copy(), np.zeros_like(g_t), 0.0, attacked=False)
    if client_seeds is None:
        client_seeds = [derive_seed(seed, round_index, i) for i in range(len(attacker_batches))]

    pooled = pool_batches(attacker_batches)
    train, val = split_train_val(pooled, cfg.val_fraction, [seed, round_index, 5])
    honest = _honest_attacker_updates(
        arch, g_t, attacker_batches, local_epochs, batch_size, local_lr, client_seeds
    )
    honest_mean = np.mean(honest, axis=0)
    if reference_override is not None:
        reference = np.asarray(reference_override, dtype=np.float64)
    else:
        reference = reference_model(cfg.reference, state, g_t, [g_t - u for u in honest])

    theta, early, epochs_used, val_acc = optimize_poison_model(
        arch, reference, reference, train, val,
        target_accuracy, lam, cfg.epochs, cfg.lr, batch_size,
        seed=derive_seed(seed, round_index, 7),
    )
    update = precise_update(honest_mean, reference, theta, rho)
    return MaliciousResult(
        theta, update, 0.0, attacked=True,
        early_stop=early, epochs_used=epochs_used, val_accuracy=val_acc, rho=rho,
    )


# ------------------------------------------------------------- parameter searches


def search_lambda(kappa, lambda_init: float, eps: float) -> tuple[float, bool]:
    """Halving search for the largest coefficient the optimizer still tolerates.

    kappa(lam) reports whether poisoning optimization early-stops with that
    coefficient; it is assumed monotone (true below some threshold). Returns
    (largest accepted lambda, found flag); (0.0, False) if nothing passes.
    """
    if lambda_init <= 0 or eps <= 0:
        raise ContractError("lambda_init and eps must be positive")
    step = lambda_init / 2.0
    lam = lambda_init
    lam_end = 0.0
    found = False
    while abs(lam_end - lam) >= eps:
        if kappa(lam):
            lam_end = lam
            found = True
            lam = lam + step
        else:
            lam = lam - step
        step = step / 2.0
    return lam_end, found


def search_rho(
    history: list[tuple[float, float]],
    target_accuracy: float,
    growth: float = 1.5,
    cap: float = 1e4,
    margin: float = 0.02,
) -> float:
    """Replay the scaling-factor controller over (rho, observed accuracy) history.

    Grows rho while the observed accuracy still sits above the target, backs
    off on overshoot (below target - margin), and halves its own step factor
    on every direction reversal so oscillations damp out. Result is clamped to
    [1, cap] and fully determined by the history.
    """
    if growth <= 1.0:
        raise ContractError("growth factor must exceed 1")
    rho = 1.0
    factor = growth
    prev_dir = 0
    for _, acc in history:
        if acc > target_accuracy:
            direction = 1
        elif acc < target_accuracy - margin:
            direction = -1
        else:
            direction = 0
        if direction != 0 and prev_dir != 0 and direction != prev_dir:
            factor = 1.0 + (factor - 1.0) / 2.0
        if direction == 1:
            rho = min(rho * factor, cap)
        elif direction == -1:
            rho = max(rho / factor, 1.0)
        if direction != 0:
            prev_dir = direction
    return rho


# ------------------------------------------------------------- baseline attacks


def lie_z(n_clients: int, n_attackers: int) -> float:
    """Standard-normal quantile for the statistics-hugging attack.

    s = floor(N/2 + 1) - m supporters are needed; z is the quantile putting
    the malicious value just inside the benign spread.
    """
    s = math.floor(n_clients / 2 + 1) - n_attackers
    p = (n_clients - n_attackers - s) / (n_clients - n_attackers)
    if not 0.0 < p < 1.0:
        raise ContractError(f"degenerate quantile {p} for N={n_clients}, m={n_attackers}")
    return NormalDist().inv_cdf(p)


def lie_attack(mean: np.ndarray, std: np.ndarray, z: float) -> np.ndarray:
    """mean + z * std, coordinate-wise."""
    if mean.shape != std.shape:
        raise ContractError("mean and std dims differ")
    return mean + z * std


def ipm_attack(benign_mean: np.ndarray, eps: float = 0.5) -> np.ndarray:
    """Scaled sign flip of the benign mean (negative inner product with it)."""
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    return -eps * benign_mean


def mpaf_attack(g_t: np.ndarray, base_model: np.ndarray, scale: float) -> np.ndarray:
    """Pull toward a frozen low-accuracy base model: scale * (base - g_t)."""
    if scale <= 0:
        raise ContractError(f"scale must be positive, got {scale}")
    if g_t.shape != base_model.shape:
        raise ContractError("base model dim mismatch")
    return scale * (base_model - g_t)


def perturbation_direction(mode: str, visible: list[np.ndarray]) -> np.ndarray:
    """The agreed harmful directions: inverse unit mean, inverse std, inverse sign."""
    mean, std = coordwise_stats(visible)
    if mode == "unit":
        norm = l2_norm(mean)
        if norm == 0.0:
            raise ContractError("mean update is zero; unit direction undefined")
        return -mean / norm
    if mode == "std":
        return -std
    if mode == "sign":
        return -np.sign(mean)
    raise ContractError(f"unknown direction mode {mode!r}")


def _halving_gamma_search(accept, gamma_init: float, tol: float, max_iters: int = 50):
    """Largest accepted scale along a fixed direction; None if nothing passes."""
    if gamma_init <= 0 or tol <= 0:
        raise ContractError("gamma_init and tol must be positive")
    gamma = gamma_init
    step = gamma_init / 2.0
    best = None
    for _ in range(max_iters):
        if gamma > 0 and accept(gamma):
            best = gamma
            gamma = gamma + step
        else:
            gamma = gamma - step
        step = step / 2.0
        if step < tol:
            break
    return best


def _distance_budget_attack(
    visible: list[np.ndarray],
    mode: str,
    gamma_init: float,
    tol: float,
    budget: str,
) -> np.ndarray:
    if len(visible) < 2:
        raise ContractError("need at least two visible benign updates")
    stack = np.stack(visible)
    mean = stack.mean(axis=0)
    direction = perturbation_direction(mode, visible)
    sq = lambda x: float(np.dot(x, x))
    pairwise = [
        sq(stack[i] - stack[j])
        for i in range(len(visible))
        for j in range(len(visible))
        if i != j
    ]
    if budget == "max":
        limit = max(pairwise)
        measure = lambda cand: max(sq(cand - u) for u in stack)
    else:
        limit = max(
            sum(sq(stack[i] - stack[j]) for j in range(len(visible)))
            for i in range(len(visible))
        )
        measure = lambda cand: sum(sq(cand - u) for u in stack)

    accept = lambda gamma: measure(mean + gamma * direction) <= limit
    best = _halving_gamma_search(accept, gamma_init, tol)
    if best is None:
        return mean.copy()
    return mean + best * direction


def min_max_attack(
    visible: list[np.ndarray],
    mode: str = "unit",
    gamma_init: float = 10.0,
    tol: float = 1e-3,
) -> np.ndarray:
    """Push along the chosen direction while staying within the largest
    observed pairwise distance of the visible updates."""
    return _distance_budget_attack(visible, mode, gamma_init, tol, budget="max")


def min_sum_attack(
    visible: list[np.ndarray],
    mode: str = "unit",
    gamma_init: float = 10.0,
    tol: float = 1e-3,
) -> np.ndarray:
    """Like min_max_attack but budgeted by the largest sum of squared distances."""
    return _distance_budget_attack(visible, mode, gamma_init, tol, budget="sum")


def agr_tailored_attack(
    visible: list[np.ndarray],
    g_t: np.ndarray,
    agr_oracle,
    n_attackers: int,
    gamma_init: float = 10.0,
    tol: float = 1e-3,
) -> np.ndarray:
    """Scale search against a known aggregation rule.

    Probes the rule with the malicious copies prepended (indices 0..m-1). For
    filtering rules a scale is accepted while a malicious copy stays in the
    kept set; for keep-everything rules, while the output's projection onto
    the harmful direction still improves over half the scale.
    """
    if not visible:
        raise ContractError("need visible benign updates")
    if n_attackers < 1:
        raise ContractError("need at least one attacker")
    mean = np.mean(visible, axis=0)
    g_norm = l2_norm(g_t)
    if g_norm == 0.0:
        direction = -np.sign(mean)
    else:
        direction = -g_t / g_norm

    def outcome_for(gamma):
        malicious = mean + gamma * direction
        return agr_oracle([malicious] * n_attackers + list(visible))

    def accept(gamma):
        out = outcome_for(gamma)
        total = n_attackers + len(visible)
        if len(out.kept) < total:
            return any(i < n_attackers for i in out.kept)
        half = outcome_for(gamma / 2.0)
        return float(np.dot(out.update, direction)) > float(np.dot(half.update, direction))

    best = _halving_gamma_search(accept, gamma_init, tol)
    if best is None:
        return mean.copy()
    return mean + best * direction
