"""Pure-Python rollout backend.

Builds policy objects from the neutral policy-spec dicts and delegates to the
reference episode loop in ``sim_core``, so this backend *is* the reference
semantics the compiled kernel must match.
"""

from __future__ import annotations

import numpy as np

from ..agents import MLP, Level0Pov, Level0Vut, QPolicy, RuleBasedVut, RuleBasedVutConfig
from ..sim_core import ScenarioConfig, run_episode


class _ConstPolicy:
    def __init__(self, action_index: int):
        self.action_index = action_index

    def __call__(self, state) -> int:
        return self.action_index


def policy_from_spec(spec: dict):
    kind = spec["kind"]
    if kind == "const":
        return _ConstPolicy(spec["action_index"])
    if kind == "level0_pov":
        return Level0Pov()
    if kind == "level0_vut":
        return Level0Vut()
    if kind == "qnet":
        policy = QPolicy(
            network=MLP(
                [np.asarray(w) for w in spec["weights"]],
                [np.asarray(b) for b in spec["biases"]],
            ),
            role=spec["role"],
            level=spec["level"],
            uses_psi=spec["psi"] is not None,
        )
        if spec["psi"] is not None:
            return policy.bind(spec["psi"])
        return policy
    if kind == "rule_based":
        return RuleBasedVut(RuleBasedVutConfig(**spec["config"]))
    raise ValueError(f"unknown policy kind {kind!r}")


def rollout_case(
    pov_spec: dict,
    vut_spec: dict,
    x_pov0: float,
    v_pov0: float,
    cfg: ScenarioConfig,
    dx_crash: float = 6.0,
):
    outcome = run_episode(
        policy_from_spec(pov_spec),
        policy_from_spec(vut_spec),
        x_pov0,
        v_pov0,
        cfg,
        dx_crash=dx_crash,
    )
    return outcome
