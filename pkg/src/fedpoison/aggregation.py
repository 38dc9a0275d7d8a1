"""Server-side aggregation rules.

Every rule is a pure function from a list of client updates (equal-dim 1-D
arrays) to an AggregationOutcome. Ties are always broken by lowest client
index, so each rule is fully deterministic given its inputs (plus an explicit
seed where subsampling is involved).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .vecmath import cosine_similarity, pairwise_sq_dists, top_right_singular_vector

RULE_NAMES = (
    "fedavg",
    "krum",
    "mkrum",
    "median",
    "trmean",
    "norm_bounding",
    "bulyan",
    "faba",
    "afa",
    "cc",
    "dnc",
)


@dataclass
class AggregationOutcome:
    update: np.ndarray
    kept: tuple[int, ...]
    scores: dict[int, float] = field(default_factory=dict)


def _stack(updates: list[np.ndarray]) -> np.ndarray:
    if len(updates) == 0:
        raise ContractError("no updates to aggregate")
    stack = np.stack([np.asarray(u, dtype=np.float64) for u in updates])
    if stack.ndim != 2:
        raise ContractError("updates must be 1-D vectors of equal dim")
    return stack


def fedavg(updates: list[np.ndarray], weights=None) -> AggregationOutcome:
    """Plain (optionally weighted) averaging; keeps every client."""
    stack = _stack(updates)
    if weights is None:
        update = stack.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (stack.shape[0],):
            raise ContractError("one weight per update required")
        update = (w[:, None] * stack).sum(axis=0) / w.sum()
    return AggregationOutcome(update, tuple(range(stack.shape[0])))


def _krum_scores(d2: np.ndarray, members: list[int], n_neighbors: int) -> np.ndarray:
    """Sum of squared distances to each member's n_neighbors nearest peers."""
    sub = d2[np.ix_(members, members)]
    n = len(members)
    scores = np.empty(n)
    for row in range(n):
        others = np.sort(np.delete(sub[row], row))
        scores[row] = others[:n_neighbors].sum()
    return scores


def _iterative_krum(d2: np.ndarray, n: int, m: int, count: int) -> list[int]:
    """Repeated Krum winners; the neighbor count shrinks with the pool.

    When the remaining pool gets too small for the canonical (pool - m - 2)
    neighbor count, the count is clamped (down to 0, where every score ties
    and the lowest index wins).
    """
    if count > n:
        raise ConfigError(f"cannot select {count} of {n} updates")
    remaining = list(range(n))
    selected: list[int] = []
    for _ in range(count):
        n_neighbors = max(0, min(len(remaining) - m - 2, len(remaining) - 1))
        scores = _krum_scores(d2, remaining, n_neighbors)
        winner = remaining[int(np.argmin(scores))]
        selected.append(winner)
        remaining.remove(winner)
    return selected


def krum(updates: list[np.ndarray], m: int) -> AggregationOutcome:
    """Select the single update closest to its N-m-2 nearest neighbors."""
    stack = _stack(updates)
    n = stack.shape[0]
    if n < m + 3:
        raise ConfigError(f"krum needs N >= m+3, got N={n}, m={m}")
    d2 = pairwise_sq_dists(list(stack))
    scores = _krum_scores(d2, list(range(n)), n - m - 2)
    winner = int(np.argmin(scores))
    return AggregationOutcome(
        stack[winner].copy(), (winner,), {i: float(s) for i, s in enumerate(scores)}
    )


def mkrum(
    updates: list[np.ndarray], m: int, selection_size: int | None = None
) -> AggregationOutcome:
    """Mean of an iteratively Krum-selected set (default size N-m)."""
    stack = _stack(updates)
    n = stack.shape[0]
    if selection_size is None:
        selection_size = n - m
    if not 1 <= selection_size <= n:
        raise ConfigError(f"selection size {selection_size} outside [1, {n}]")
    if n < m + 3:
        raise ConfigError(f"mkrum needs N >= m+3, got N={n}, m={m}")
    d2 = pairwise_sq_dists(list(stack))
    selected = _iterative_krum(d2, n, m, selection_size)
    kept = tuple(sorted(selected))
    return AggregationOutcome(stack[list(kept)].mean(axis=0), kept)


def coordinate_median(updates: list[np.ndarray]) -> AggregationOutcome:
    """Per-coordinate median (mean of the two middle values for even N)."""
    stack = _stack(updates)
    return AggregationOutcome(np.median(stack, axis=0), tuple(range(stack.shape[0])))


def trimmed_mean(updates: list[np.ndarray], beta: int) -> AggregationOutcome:
    """Drop the beta largest and smallest values per coordinate, average the rest."""
    stack = _stack(updates)
    n = stack.shape[0]
    if beta < 0:
        raise ConfigError(f"trim count must be nonnegative, got {beta}")
    if n <= 2 * beta:
        raise ConfigError(f"trimmed mean needs N > 2*beta, got N={n}, beta={beta}")
    if beta == 0:
        update = stack.mean(axis=0)
    else:
        update = np.sort(stack, axis=0)[beta : n - beta].mean(axis=0)
    return AggregationOutcome(update, tuple(range(n)))


def norm_bounding(updates: list[np.ndarray]) -> AggregationOutcome:
    """Clip every update to the round's average norm, then average."""
    stack = _stack(updates)
    norms = np.linalg.norm(stack, axis=1)
    bound = float(norms.mean())
    scale = np.where(norms > bound, bound / np.maximum(norms, 1e-300), 1.0)
    clipped = stack * scale[:, None]
    return AggregationOutcome(
        clipped.mean(axis=0),
        tuple(range(stack.shape[0])),
        {i: float(v) for i, v in enumerate(norms)},
    )


def bulyan(
    updates: list[np.ndarray], m: int, gamma: int | None = None
) -> AggregationOutcome:
    """Iterative Krum selection of gamma updates followed by a beta=m trimmed mean."""
    stack = _stack(updates)
    n = stack.shape[0]
    if n < 4 * m + 3:
        raise ConfigError(f"bulyan needs N >= 4m+3, got N={n}, m={m}")
    if gamma is None:
        gamma = n - 2 * m
    if not 2 * m < gamma <= n - 2 * m:
        raise ConfigError(f"bulyan selection size {gamma} outside (2m, N-2m]")
    d2 = pairwise_sq_dists(list(stack))
    selected = _iterative_krum(d2, n, m, gamma)
    kept = tuple(sorted(selected))
    inner = trimmed_mean([stack[i] for i in kept], m)
    return AggregationOutcome(inner.update, kept)


def faba(updates: list[np.ndarray], m: int) -> AggregationOutcome:
    """Repeatedly drop the update farthest from the mean of the survivors, m times."""
    stack = _stack(updates)
    n = stack.shape[0]
    if m < 0:
        raise ConfigError(f"attacker count must be nonnegative, got {m}")
    if n <= m:
        raise ConfigError(f"faba needs N > m, got N={n}, m={m}")
    remaining = list(range(n))
    scores: dict[int, float] = {}
    for _ in range(m):
        center = stack[remaining].mean(axis=0)
        dists = np.linalg.norm(stack[remaining] - center, axis=1)
        worst = remaining[int(np.argmax(dists))]
        scores[worst] = float(dists.max())
        remaining.remove(worst)
    return AggregationOutcome(stack[remaining].mean(axis=0), tuple(remaining), scores)


def afa(
    updates: list[np.ndarray],
    prev_global_update: np.ndarray,
    threshold: float = 0.5,
    max_passes: int = 10,
) -> AggregationOutcome:
    """Filter by the distribution of cosine similarity to the previous global update.

    Each pass compares the mean and median of the remaining similarities and
    strips the tail the skew points at, at threshold*std from the median. A
    zero reference vector makes every similarity 0, so the first round is a
    no-op pass. At least one client always survives.
    """
    stack = _stack(updates)
    n = stack.shape[0]
    cs = np.array([cosine_similarity(u, prev_global_update) for u in stack])
    remaining = list(range(n))
    for _ in range(max_passes):
        vals = cs[remaining]
        mu, med, sd = float(vals.mean()), float(np.median(vals)), float(vals.std())
        if mu < med:
            bad = [i for i in remaining if cs[i] < med - threshold * sd]
        else:
            bad = [i for i in remaining if cs[i] > med + threshold * sd]
        if len(bad) == len(remaining):
            # never remove the last survivors; keep the similarity closest to the median
            keep = min(remaining, key=lambda i: (abs(cs[i] - med), i))
            bad = [i for i in bad if i != keep]
        if not bad:
            break
        remaining = [i for i in remaining if i not in bad]
    return AggregationOutcome(
        stack[remaining].mean(axis=0),
        tuple(remaining),
        {i: float(v) for i, v in enumerate(cs)},
    )


def centered_clip(
    updates: list[np.ndarray],
    iters: int = 1,
    radius: float = 100.0,
    v0: np.ndarray | None = None,
) -> AggregationOutcome:
    """Iteratively move a center by radius-clipped residuals of the updates."""
    stack = _stack(updates)
    if iters < 1:
        raise ConfigError(f"clipping iterations must be >= 1, got {iters}")
    if radius <= 0:
        raise ConfigError(f"clipping radius must be positive, got {radius}")
    v = np.zeros(stack.shape[1]) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    for _ in range(iters):
        resid = stack - v
        dists = np.linalg.norm(resid, axis=1)
        factor = np.minimum(1.0, radius / np.maximum(dists, 1e-300))
        v = v + (factor[:, None] * resid).mean(axis=0)
    return AggregationOutcome(v, tuple(range(stack.shape[0])))


def dnc(
    updates: list[np.ndarray],
    m: int,
    subsample_dim: int | None = None,
    filter_coeff: float = 1.0,
    seed: int = 0,
    power_iters: int = 50,
) -> AggregationOutcome:
    """Spectral outlier filtering on a random coordinate subsample.

    Scores each update by its squared projection onto the top right singular
    vector of the centered subsampled matrix and removes the
    ceil(filter_coeff*m) highest scorers.
    """
    stack = _stack(updates)
    n, dim = stack.shape
    n_remove = math.ceil(filter_coeff * m)
    if n <= n_remove:
        raise ConfigError(f"dnc would remove {n_remove} of {n} updates")
    if n_remove == 0:
        return AggregationOutcome(stack.mean(axis=0), tuple(range(n)))
    if subsample_dim is None:
        subsample_dim = max(1, dim // 2)
    if not 1 <= subsample_dim <= dim:
        raise ConfigError(f"subsample dim {subsample_dim} outside [1, {dim}]")
    rng = np.random.default_rng([seed, 2])
    coords = np.sort(rng.choice(dim, size=subsample_dim, replace=False))
    sub = stack[:, coords]
    centered = sub - sub.mean(axis=0)
    v, _ = top_right_singular_vector(list(centered), iters=power_iters, seed=seed)
    scores = (centered @ v) ** 2
    order = np.argsort(-scores, kind="stable")  # ties drop the lowest index first
    removed = set(int(i) for i in order[:n_remove])
    kept = tuple(i for i in range(n) if i not in removed)
    return AggregationOutcome(
        stack[list(kept)].mean(axis=0), kept, {i: float(s) for i, s in enumerate(scores)}
    )


@dataclass(frozen=True)
class AggregatorSpec:
    """A rule name plus its rule-specific parameters.

    Recognized params: m (declared attacker count), selection_size (mkrum),
    beta (trmean), gamma (bulyan), threshold/max_passes (afa), iters/radius
    (cc), subsample_dim/filter_coeff/power_iters (dnc).
    """

    rule: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in RULE_NAMES:
            raise ConfigError(f"unknown aggregation rule {self.rule!r}")


def validate_spec(spec: AggregatorSpec, n_clients: int) -> None:
    """Raise ConfigError if the spec cannot run with n_clients updates."""
    p = spec.params
    m = int(p.get("m", 0))
    if spec.rule in ("krum", "mkrum") and n_clients < m + 3:
        raise ConfigError(f"{spec.rule} needs N >= m+3 (N={n_clients}, m={m})")
    if spec.rule == "trmean":
        beta = int(p.get("beta", m))
        if n_clients <= 2 * beta:
            raise ConfigError(f"trmean needs N > 2*beta (N={n_clients}, beta={beta})")
    if spec.rule == "bulyan" and n_clients < 4 * m + 3:
        raise ConfigError(f"bulyan needs N >= 4m+3 (N={n_clients}, m={m})")
    if spec.rule == "faba" and n_clients <= m:
        raise ConfigError(f"faba needs N > m (N={n_clients}, m={m})")
    if spec.rule == "dnc":
        coeff = float(p.get("filter_coeff", 1.0))
        if n_clients <= math.ceil(coeff * m):
            raise ConfigError(f"dnc would remove every update (N={n_clients}, m={m})")


def aggregate(
    spec: AggregatorSpec,
    updates: list[np.ndarray],
    prev_global_update: np.ndarray | None = None,
    seed: int = 0,
) -> AggregationOutcome:
    """Dispatch to the configured rule."""
    p = spec.params
    m = int(p.get("m", 0))
    if spec.rule == "fedavg":
        return fedavg(updates)
    if spec.rule == "krum":
        return krum(updates, m)
    if spec.rule == "mkrum":
        size = p.get("selection_size")
        return mkrum(updates, m, int(size) if size is not None else None)
    if spec.rule == "median":
        return coordinate_median(updates)
    if spec.rule == "trmean":
        return trimmed_mean(updates, int(p.get("beta", m)))
    if spec.rule == "norm_bounding":
        return norm_bounding(updates)
    if spec.rule == "bulyan":
        gamma = p.get("gamma")
        return bulyan(updates, m, int(gamma) if gamma is not None else None)
    if spec.rule == "faba":
        return faba(updates, m)
    if spec.rule == "afa":
        ref = prev_global_update
        if ref is None:
            ref = np.zeros_like(np.asarray(updates[0], dtype=np.float64))
        return afa(updates, ref, float(p.get("threshold", 0.5)), int(p.get("max_passes", 10)))
    if spec.rule == "cc":
        return centered_clip(updates, int(p.get("iters", 1)), float(p.get("radius", 100.0)))
    if spec.rule == "dnc":
        sub = p.get("subsample_dim")
        return dnc(
            updates,
            m,
            int(sub) if sub is not None else None,
            float(p.get("filter_coeff", 1.0)),
            seed=seed,
            power_iters=int(p.get("power_iters", 50)),
        )
    raise ConfigError(f"unknown aggregation rule {spec.rule!r}")
