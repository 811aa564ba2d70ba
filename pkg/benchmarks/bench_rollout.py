"""Benchmark the compiled episode kernel against the pure-Python loop.

Usage: python benchmarks/bench_rollout.py [--episodes 200]

Rolls identical workloads (level-0 POV vs rule-based design #2, and a random
Q-network POV vs rule-based design #2) through both backends, reports
wall-clock per episode and the speedup, and cross-checks that the
trajectories agree bit for bit.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mergetest import backends
from mergetest.agents import MLP, Level0Pov, QPolicy, RULE_BASED_DESIGNS, RuleBasedVut


def episodes(n, seed):
    rng = np.random.default_rng(seed)
    return [(float(rng.uniform(-400, -150)), float(rng.uniform(20, 35))) for _ in range(n)]


def bench(pov_spec, vut_spec, cases, backend):
    if backend == "cython":
        pov = backends._rollout_cy.CompiledPolicy(pov_spec)
        vut = backends._rollout_cy.CompiledPolicy(vut_spec)
    else:
        pov, vut = pov_spec, vut_spec
    t0 = time.perf_counter()
    outs = [
        backends.rollout_case(pov, vut, x0, v0, backend=backend) for x0, v0 in cases
    ]
    return time.perf_counter() - t0, outs


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=200)
    args = ap.parse_args()

    if backends._rollout_cy is None:
        print("compiled kernel not built; nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    qnet = QPolicy(
        network=MLP.init([4, 64, 64, 7], rng), role="POV", level=1, uses_psi=False
    )
    workloads = {
        "level0-pov vs rule2": (
            backends.make_spec(Level0Pov()),
            backends.make_spec(RuleBasedVut(RULE_BASED_DESIGNS[2])),
        ),
        "qnet-pov vs rule2": (
            backends.make_spec(qnet),
            backends.make_spec(RuleBasedVut(RULE_BASED_DESIGNS[2])),
        ),
    }
    cases = episodes(args.episodes, seed=1)

    print(f"{'workload':<22}{'python':>12}{'cython':>12}{'speedup':>9}")
    for name, (pov_spec, vut_spec) in workloads.items():
        t_py, out_py = bench(pov_spec, vut_spec, cases, "python")
        t_cy, out_cy = bench(pov_spec, vut_spec, cases, "cython")
        for a, b in zip(out_py, out_cy):
            assert np.array_equal(a.trajectory.states, b.trajectory.states), name
        per_py = t_py / args.episodes * 1e3
        per_cy = t_cy / args.episodes * 1e3
        print(f"{name:<22}{per_py:>10.2f}ms{per_cy:>10.2f}ms{t_py / t_cy:>8.1f}x")
    print(f"({args.episodes} episodes per workload; outputs verified identical)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
