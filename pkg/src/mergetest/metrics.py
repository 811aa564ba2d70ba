"""Per-case performance scoring and failure-mode coverage (FMC).

The score collapses an episode into a scalar P = mu1*I_crash + mu2*P_safety
+ mu3*P_task with both sub-scores bounded in [-1, 1], so with the default
weights a crash (and only a crash) drives P below the failure threshold.

FMC is the volume of the union of radius-rho balls around failing cases in
the normalized [0, 1]^d case space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .sim_core import EpisodeOutcome, ACTION_SET


@dataclass(frozen=True)
class ScoreWeights:
    mu1: float = -1000.0  # crash
    mu2: float = 100.0  # safety sub-score
    mu3: float = 100.0  # task sub-score
    lam: float = -500.0  # failure threshold

    def __post_init__(self):
        # crash must force P below the threshold for any bounded sub-scores
        worst_case_non_crash = abs(self.mu2) + abs(self.mu3)
        if self.mu1 + worst_case_non_crash >= self.lam:
            raise ValueError("crash weight cannot guarantee P < lambda")


@dataclass(frozen=True)
class FmcConfig:
    rho: float = 0.05
    lam: float = -500.0
    estimator: str = "monte-carlo"  # "exact-1d" | "grid-2d" | "monte-carlo"
    mc_points: int = 100_000
    mc_seed: int = 0
    grid_resolution: int = 400

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.estimator not in ("exact-1d", "grid-2d", "monte-carlo"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


# scoring ------------------------------------------------------------------

TTC_FULL_CREDIT = 7.0  # s; terminal TTC at/above this saturates the safety score
DX_FULL_CREDIT = 100.0  # m; terminal gap at/above this saturates the safety score
SPEED_BAND = (24.6, 35.0)  # m/s; desired terminal merging speed
SPEED_TOL = 10.0  # m/s of band deviation that zeroes the speed credit
ACCEL_REF = 4.0  # m/s^2; mean |a| that zeroes the smoothness credit


def safety_subscore(ttc: float, dx1: float) -> float:
    """Bounded [-1, 1] blend of terminal time-to-collision and gap margins."""
    s_ttc = 2.0 * min(ttc, TTC_FULL_CREDIT) / TTC_FULL_CREDIT - 1.0
    s_dx = 2.0 * min(abs(dx1), DX_FULL_CREDIT) / DX_FULL_CREDIT - 1.0
    return 0.5 * s_ttc + 0.5 * s_dx


def task_subscore(outcome: EpisodeOutcome) -> float:
    """Bounded [-1, 1]: merge completion, terminal speed band, smoothness."""
    if not outcome.merged:
        return -1.0
    v_end = float(outcome.trajectory.states[-1, 3])
    lo, hi = SPEED_BAND
    dev = max(0.0, lo - v_end) + max(0.0, v_end - hi)
    s_speed = 1.0 - min(dev, SPEED_TOL) / SPEED_TOL
    acts = outcome.trajectory.actions
    if acts.shape[0] > 0:
        mean_a = float(np.mean(np.abs([ACTION_SET[i] for i in acts[:, 1]])))
    else:
        mean_a = 0.0
    s_smooth = 1.0 - min(mean_a, ACCEL_REF) / ACCEL_REF
    return 0.4 + 0.3 * s_speed + 0.3 * s_smooth


def performance_score(
    outcome: EpisodeOutcome, weights: ScoreWeights | None = None
) -> float:
    if weights is None:
        weights = ScoreWeights()
    crash = 1.0 if outcome.safety.crashed else 0.0
    p_safety = safety_subscore(outcome.safety.ttc, outcome.safety.dx1)
    p_task = task_subscore(outcome)
    return weights.mu1 * crash + weights.mu2 * p_safety + weights.mu3 * p_task


# failure-mode coverage ----------------------------------------------------


def exact_union_1d(points: np.ndarray, rho: float) -> float:
    """Length of the union of [p - rho, p + rho] intervals clipped to [0, 1]."""
    pts = np.sort(np.asarray(points, dtype=float).ravel())
    if pts.size == 0 or rho == 0.0:
        return 0.0
    total = 0.0
    cur_lo = cur_hi = None
    for p in pts:
        lo, hi = max(p - rho, 0.0), min(p + rho, 1.0)
        if cur_hi is None:
            cur_lo, cur_hi = lo, hi
        elif lo <= cur_hi:
            cur_hi = max(cur_hi, hi)
        else:
            total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


def _covered_fraction(centers: np.ndarray, queries: np.ndarray, rho: float) -> float:
    tree = cKDTree(centers)
    dist, _ = tree.query(queries, k=1)
    return float(np.mean(dist <= rho))


def union_volume_grid_2d(centers: np.ndarray, rho: float, resolution: int) -> float:
    """Midpoint-grid estimate of the covered area of the unit square."""
    g = (np.arange(resolution) + 0.5) / resolution
    xx, yy = np.meshgrid(g, g)
    queries = np.column_stack([xx.ravel(), yy.ravel()])
    return _covered_fraction(centers, queries, rho)


def union_volume_monte_carlo(
    centers: np.ndarray, rho: float, n_points: int, seed: int
) -> tuple[float, float]:
    """Uniform Monte-Carlo estimate of the covered volume, with its SE."""
    d = centers.shape[1]
    rng = np.random.default_rng(seed)
    queries = rng.uniform(size=(n_points, d))
    p = _covered_fraction(centers, queries, rho)
    se = math.sqrt(max(p * (1.0 - p), 0.0) / n_points)
    return p, se


@dataclass(frozen=True)
class FmcResult:
    volume: float
    n_failing: int
    estimator: str
    std_error: float | None
    seed: int | None


def fmc(
    cases: np.ndarray,
    scores: np.ndarray,
    cfg: FmcConfig | None = None,
) -> FmcResult:
    """Failure-mode coverage of a scored, normalized case set.

    ``cases`` is (n, d) in [0, 1]^d; a case counts as failing when its score
    is strictly below the threshold.
    """
    if cfg is None:
        cfg = FmcConfig()
    cases = np.atleast_2d(np.asarray(cases, dtype=float))
    scores = np.asarray(scores, dtype=float).ravel()
    if cases.shape[0] != scores.shape[0]:
        raise ValueError("cases/scores length mismatch")
    failing = cases[scores < cfg.lam]
    if failing.shape[0] == 0 or cfg.rho == 0.0:
        return FmcResult(0.0, failing.shape[0], cfg.estimator, None, None)
    d = cases.shape[1]
    if cfg.estimator == "exact-1d":
        if d != 1:
            raise ValueError("exact-1d estimator needs 1-D cases")
        vol = exact_union_1d(failing[:, 0], cfg.rho)
        return FmcResult(vol, failing.shape[0], cfg.estimator, 0.0, None)
    if cfg.estimator == "grid-2d":
        if d != 2:
            raise ValueError("grid-2d estimator needs 2-D cases")
        vol = union_volume_grid_2d(failing, cfg.rho, cfg.grid_resolution)
        return FmcResult(vol, failing.shape[0], cfg.estimator, None, None)
    vol, se = union_volume_monte_carlo(failing, cfg.rho, cfg.mc_points, cfg.mc_seed)
    return FmcResult(vol, failing.shape[0], cfg.estimator, se, cfg.mc_seed)
