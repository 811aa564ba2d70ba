"""Episode-rollout backends.

The compiled Cython kernel is preferred when it built; the pure-Python
reference loop is the fallback.  Set MERGETEST_BACKEND=python (or =cython)
to force a choice.
"""

from __future__ import annotations

import os

import numpy as np

from ..agents import BoundQPolicy, Level0Pov, Level0Vut, QPolicy, RuleBasedVut
from ..sim_core import (
    EpisodeOutcome,
    ScenarioConfig,
    Trajectory,
    compute_safety_features,
)
from . import rollout_py

try:
    from . import _rollout_cy
except ImportError:
    _rollout_cy = None

_forced = os.environ.get("MERGETEST_BACKEND", "").lower()
if _forced == "python":
    BACKEND = "python"
elif _forced == "cython":
    if _rollout_cy is None:
        raise ImportError("MERGETEST_BACKEND=cython but the compiled kernel is missing")
    BACKEND = "cython"
else:
    BACKEND = "cython" if _rollout_cy is not None else "python"


def make_spec(policy) -> dict:
    """Neutral description of a policy, consumable by either backend."""
    if isinstance(policy, Level0Pov):
        return {"kind": "level0_pov"}
    if isinstance(policy, Level0Vut):
        return {"kind": "level0_vut"}
    if isinstance(policy, BoundQPolicy):
        spec = make_spec(policy.policy)
        spec["psi"] = policy.psi
        return spec
    if isinstance(policy, QPolicy):
        return {
            "kind": "qnet",
            "weights": [w for w in policy.network.weights],
            "biases": [b for b in policy.network.biases],
            "role": policy.role,
            "level": policy.level,
            "psi": None,
        }
    if isinstance(policy, RuleBasedVut):
        cfg = policy.cfg
        return {
            "kind": "rule_based",
            "config": {
                "x_rb1": cfg.x_rb1,
                "x_rb2": cfg.x_rb2,
                "dx_safe": cfg.dx_safe,
                "gap_setpoint": cfg.gap_setpoint,
                "kp": cfg.kp,
                "ki": cfg.ki,
                "kd": cfg.kd,
                "dt": cfg.dt,
            },
        }
    raise TypeError(f"no spec representation for {type(policy).__name__}")


def const_spec(action_index: int) -> dict:
    return {"kind": "const", "action_index": action_index}


def compile_spec(spec: dict):
    """Pre-parse a spec for repeated rollouts on the active backend."""
    if BACKEND == "cython":
        return _rollout_cy.CompiledPolicy(spec)
    return spec


def rollout_case(
    pov_spec,
    vut_spec,
    x_pov0: float,
    v_pov0: float,
    cfg: ScenarioConfig | None = None,
    dx_crash: float = 6.0,
    backend: str | None = None,
) -> EpisodeOutcome:
    """Run one episode from policy specs and return the full outcome."""
    if cfg is None:
        cfg = ScenarioConfig()
    use = backend if backend is not None else BACKEND
    if use == "python":
        if not isinstance(pov_spec, dict) or not isinstance(vut_spec, dict):
            raise TypeError("python backend takes plain spec dicts")
        return rollout_py.rollout_case(
            pov_spec, vut_spec, x_pov0, v_pov0, cfg, dx_crash=dx_crash
        )
    states, actions, merged = _rollout_cy.rollout(
        pov_spec,
        vut_spec,
        x_pov0,
        v_pov0,
        cfg.x_vut0,
        cfg.v_vut0,
        cfg.dt,
        cfg.max_steps,
        cfg.merge_point,
    )
    traj = Trajectory(states=np.ascontiguousarray(states), actions=np.ascontiguousarray(actions))
    return EpisodeOutcome(
        trajectory=traj,
        safety=compute_safety_features(traj, dx_crash=dx_crash),
        terminated_by="merge" if merged else "timeout",
    )
