"""Reward features and SVO-modulated reward composition for agent training.

Ego features accrue every step; safety features are evaluated once, on the
terminal state of the episode.  All features are piecewise-linear hinges so
that the weights alone set the priorities (crash >> terminal safety margins
>> per-step comfort).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .sim_core import SafetyFeatures, State


@dataclass(frozen=True)
class RewardParams:
    """Thresholds and weights of the reward design.

    The threshold block mirrors the scenario's published parameter table; the
    weights are our declared defaults (overridable, pinned by the tests).
    """

    v_hw_max: float = 35.0
    v_hw_min: float = 24.6
    v_min: float = 12.0
    ttc_min: float = 7.0
    dx_crash: float = 6.0
    dx_critical: float = 15.0
    dx_saturation: float = 100.0
    # per-step ego weights
    w_acc: float = 0.02
    w_vhw: float = 0.02
    w_vmin: float = 0.02
    # terminal weights
    w_vend: float = 5.0
    w_ttc: float = 5.0
    w_dx: float = 10.0
    w_crash: float = 1000.0

    def __post_init__(self):
        if not self.dx_crash < self.dx_critical:
            raise ValueError("dx_crash must be below dx_critical")
        if not self.v_min < self.v_hw_min < self.v_hw_max:
            raise ValueError("speed thresholds must be ordered")

    def scaled(self, c: float) -> "RewardParams":
        d = asdict(self)
        for k in ("w_acc", "w_vhw", "w_vmin", "w_vend", "w_ttc", "w_dx", "w_crash"):
            d[k] = d[k] * c
        return RewardParams(**d)


@dataclass(frozen=True)
class RewardBreakdown:
    r_pov_ego: float
    r_vut_ego: float
    r_safe: float
    r_total: float


def _band_exceedance(v: float, lo: float, hi: float) -> float:
    """Distance outside [lo, hi]; zero inside."""
    if v > hi:
        return v - hi
    if v < lo:
        return lo - v
    return 0.0


def pov_ego_features(v_pov: float, a_pov: float, params: RewardParams) -> np.ndarray:
    """[phi_acc, phi_vHW]: comfort penalty and highway speed-band penalty."""
    phi_acc = -abs(a_pov)
    phi_vhw = -_band_exceedance(v_pov, params.v_hw_min, params.v_hw_max)
    return np.array([phi_acc, phi_vhw])


def vut_ego_features(
    v_vut: float, a_vut: float, params: RewardParams, terminal: bool = False
) -> np.ndarray:
    """[phi_acc, phi_vmin, phi_vend]; the merge-speed term is terminal-only."""
    phi_acc = -abs(a_vut)
    phi_vmin = -max(0.0, params.v_min - v_vut)
    phi_vend = 0.0
    if terminal:
        phi_vend = -_band_exceedance(v_vut, params.v_hw_min, params.v_hw_max)
    return np.array([phi_acc, phi_vmin, phi_vend])


def safety_features(safety: SafetyFeatures, params: RewardParams) -> np.ndarray:
    """[phi_TTC, phi_dx, phi_crash] from the terminal safety state."""
    phi_ttc = -max(0.0, params.ttc_min - min(safety.ttc, params.ttc_min))
    adx = abs(safety.dx1)
    phi_dx = (min(adx, params.dx_saturation) - params.dx_critical) / (
        params.dx_saturation - params.dx_critical
    )
    phi_crash = -1.0 if adx < params.dx_crash else 0.0
    return np.array([phi_ttc, phi_dx, phi_crash])


def pov_ego_reward(v_pov: float, a_pov: float, params: RewardParams) -> float:
    w = np.array([params.w_acc, params.w_vhw])
    return float(w @ pov_ego_features(v_pov, a_pov, params))


def vut_ego_reward(
    v_vut: float, a_vut: float, params: RewardParams, terminal: bool = False
) -> float:
    w = np.array([params.w_acc, params.w_vmin, params.w_vend])
    return float(w @ vut_ego_features(v_vut, a_vut, params, terminal=terminal))


def safety_reward(safety: SafetyFeatures, params: RewardParams) -> float:
    w = np.array([params.w_ttc, params.w_dx, params.w_crash])
    return float(w @ safety_features(safety, params))


def compose_reward(
    role: str,
    psi: float,
    r_pov_ego: float,
    r_vut_ego: float,
    r_safe: float,
) -> RewardBreakdown:
    """Combine reward components for one agent.

    The VUT ignores the orientation angle; a challenger with angle psi trades
    its own ego reward (cos psi) against the opponent's (sin psi).
    """
    if role not in ("POV", "VUT"):
        raise ValueError(f"unknown role {role!r}")
    if role == "POV":
        if not 0.0 <= psi < math.pi / 2:
            raise ValueError("SVO angle must lie in [0, pi/2)")
        total = r_safe + r_pov_ego * math.cos(psi) + r_vut_ego * math.sin(psi)
    else:
        total = r_safe + r_vut_ego
    return RewardBreakdown(
        r_pov_ego=r_pov_ego, r_vut_ego=r_vut_ego, r_safe=r_safe, r_total=total
    )


def step_reward(
    role: str,
    psi: float,
    state: State,
    a_pov: float,
    a_vut: float,
    params: RewardParams,
    terminal: bool = False,
    safety: SafetyFeatures | None = None,
) -> float:
    """Per-step training reward; terminal steps add the safety block."""
    r_pe = pov_ego_reward(state.v_pov, a_pov, params)
    r_ve = vut_ego_reward(state.v_vut, a_vut, params, terminal=terminal)
    r_sf = safety_reward(safety, params) if (terminal and safety is not None) else 0.0
    return compose_reward(role, psi, r_pe, r_ve, r_sf).r_total
