"""Command-line orchestration: train the challenger library, run campaigns,
compute failure-mode coverage, and compare methods.

Outputs are plain CSV/JSON so any external tool can plot or post-process
them; every output embeds the resolved config hash and seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from .agents import RULE_BASED_DESIGNS, QPolicy, RuleBasedVut, RuleBasedVutConfig
from .backends import BACKEND, make_spec
from .metrics import FmcConfig, ScoreWeights, fmc
from .rewards import RewardParams
from .samplers import (
    AnnealingSchedule,
    CampaignRecord,
    CaseRunner,
    Pool,
    SamplerConfig,
    SubsetConfig,
    run_adaptive_campaign,
    simulated_annealing_campaign,
    subset_simulation_campaign,
    uniform_campaign,
)
from .sim_core import ScenarioConfig
from .trainer import TrainerConfig, build_pov_library, load_library

METHODS = ("gpr", "uniform", "sa", "subset", "ground-truth")


class CliError(RuntimeError):
    pass


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a mapping")
    return cfg


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _build(section: dict | None, cls):
    return cls(**(section or {}))


def resolve_vut(name: str, cfg: dict):
    if name in ("rule1", "rule2"):
        design = int(name[-1])
        overrides = (cfg.get("rule_based") or {}).get(f"design{design}")
        if overrides:
            return RuleBasedVut(RuleBasedVutConfig(**overrides))
        return RuleBasedVut(RULE_BASED_DESIGNS[design])
    if os.path.exists(name):
        return QPolicy.load(name)
    raise CliError(f"unknown VUT {name!r} (use rule1, rule2, or a policy file)")


def build_runner(args, cfg: dict) -> CaseRunner:
    scenario = _build(cfg.get("scenario"), ScenarioConfig)
    weights = _build(cfg.get("score_weights"), ScoreWeights)
    vut = resolve_vut(args.vut, cfg)
    library = load_library(args.library)
    return CaseRunner(library, vut, scenario=scenario, weights=weights, jobs=args.jobs)


def write_cases_csv(path, record: CampaignRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "x_pov0", "v_pov0", "psi", "batch", "P", "crashed"])
        for r in record.results:
            w.writerow(
                [
                    r.case.level,
                    repr(r.case.x_pov0),
                    repr(r.case.v_pov0),
                    repr(r.case.psi),
                    r.batch,
                    repr(r.score),
                    int(r.crashed),
                ]
            )


def read_cases_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"level", "x_pov0", "v_pov0", "psi", "batch", "P", "crashed"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise CliError(f"malformed case CSV: {path}")
        for row in reader:
            rows.append(
                {
                    "level": int(row["level"]),
                    "x_pov0": float(row["x_pov0"]),
                    "v_pov0": float(row["v_pov0"]),
                    "psi": float(row["psi"]),
                    "batch": int(row["batch"]),
                    "P": float(row["P"]),
                    "crashed": bool(int(row["crashed"])),
                }
            )
    return rows


def fmc_from_rows(rows, pool: Pool, fmc_cfg: FmcConfig) -> dict:
    report = {}
    for level in sorted({r["level"] for r in rows}):
        sub = [r for r in rows if r["level"] == level]
        from .samplers import TestCase

        z = np.array(
            [
                pool.normalize(TestCase(r["x_pov0"], r["v_pov0"], r["psi"], level))
                for r in sub
            ]
        )
        scores = np.array([r["P"] for r in sub])
        res = fmc(z, scores, fmc_cfg)
        report[str(level)] = {
            "fmc": res.volume,
            "n_failing": res.n_failing,
            "n_cases": len(sub),
            "estimator": res.estimator,
            "std_error": res.std_error,
            "seed": res.seed,
        }
    return report


# --- subcommands ----------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    trainer_cfgs = {}
    for stage, section in (cfg.get("trainer") or {}).items():
        trainer_cfgs[stage] = TrainerConfig(**section)
    reward_params = _build(cfg.get("reward_params"), RewardParams)
    scenario = _build(cfg.get("scenario"), ScenarioConfig)
    manifest = build_pov_library(
        args.out,
        cfgs=trainer_cfgs,
        reward_params=reward_params,
        scenario=scenario,
        force=args.force,
    )
    print(os.path.join(args.out, "manifest.json"))
    print(json.dumps({k: v["sha256"][:12] for k, v in manifest["policies"].items()}))
    return 0


def cmd_campaign(args) -> int:
    cfg = load_config(args.config)
    pool = _build(cfg.get("pool"), Pool)
    fmc_cfg = _build(cfg.get("fmc"), FmcConfig)
    runner = build_runner(args, cfg)
    level = args.level

    sampler_section = dict(cfg.get("sampler") or {})
    if args.n is not None:
        sampler_section["n_total"] = args.n
    sampler_section["seed"] = args.seed
    scfg = _build(sampler_section, SamplerConfig)

    if args.method == "gpr":
        levels = [level] if level is not None else [0, 1, 2]
        record = run_adaptive_campaign(runner, levels, scfg, pool, fmc_cfg)
    else:
        if level is None:
            raise CliError("baseline methods need --level")
        if args.method in ("uniform", "ground-truth"):
            record = uniform_campaign(runner, scfg.n_total, level, pool, seed=args.seed)
            record.method = args.method
        elif args.method == "sa":
            schedule = _build(cfg.get("annealing"), AnnealingSchedule)
            record = simulated_annealing_campaign(
                runner, scfg.n_total, level, pool, schedule, seed=args.seed
            )
        elif args.method == "subset":
            sub = _build(cfg.get("subset"), SubsetConfig)
            record = subset_simulation_campaign(
                runner, scfg.n_total, level, pool, sub, lam=fmc_cfg.lam, seed=args.seed
            )
        else:
            raise CliError(f"unknown method {args.method!r}")
        record.compute_fmc(fmc_cfg)
    if not record.fmc_by_level:
        record.compute_fmc(fmc_cfg)

    os.makedirs(args.out, exist_ok=True)
    cases_path = os.path.join(args.out, "cases.csv")
    write_cases_csv(cases_path, record)
    resolved = {
        "method": args.method,
        "level": level,
        "vut": args.vut,
        "seed": args.seed,
        "config": cfg,
        "n_total": scfg.n_total,
    }
    summary = {
        "tool_version": __version__,
        "backend": BACKEND,
        "method": args.method,
        "vut": args.vut,
        "seed": args.seed,
        "config_hash": config_hash(resolved),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "fmc": {
            str(lvl): {
                "fmc": res.volume,
                "n_failing": res.n_failing,
                "estimator": res.estimator,
                "std_error": res.std_error,
            }
            for lvl, res in record.fmc_by_level.items()
        },
        "allocations": [
            {"batch": b.index, "allocations": b.allocations, "eps": b.eps}
            for b in record.batches
        ],
    }
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(cases_path)
    return 0


def cmd_fmc(args) -> int:
    cfg = load_config(args.config)
    pool = _build(cfg.get("pool"), Pool)
    section = dict(cfg.get("fmc") or {})
    if args.rho is not None:
        section["rho"] = args.rho
    fmc_cfg = _build(section, FmcConfig)
    rows = read_cases_csv(args.cases)
    report = {
        "cases": args.cases,
        "rho": fmc_cfg.rho,
        "lambda": fmc_cfg.lam,
        "levels": fmc_from_rows(rows, pool, fmc_cfg),
    }
    out = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out + "\n")
    print(out)
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    pool = _build(cfg.get("pool"), Pool)
    fmc_cfg = _build(cfg.get("fmc"), FmcConfig)
    table = []
    for path in args.campaigns:
        summary_path = os.path.join(path, "summary.json")
        with open(summary_path) as fh:
            summary = json.load(fh)
        rows = read_cases_csv(os.path.join(path, "cases.csv"))
        per_level = fmc_from_rows(rows, pool, fmc_cfg)
        for level, entry in per_level.items():
            table.append(
                {
                    "method": summary["method"],
                    "level": int(level),
                    "fmc": entry["fmc"],
                    "n_failing": entry["n_failing"],
                    "n_cases": entry["n_cases"],
                }
            )
    table.sort(key=lambda r: (r["level"], -r["fmc"]))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "level", "fmc", "n_failing", "n_cases"])
            w.writeheader()
            w.writerows(table)
    header = f"{'method':<14}{'level':>6}{'FMC':>10}{'failing':>9}{'cases':>7}"
    print(header)
    print("-" * len(header))
    for r in table:
        print(
            f"{r['method']:<14}{r['level']:>6}{r['fmc']:>10.4f}"
            f"{r['n_failing']:>9}{r['n_cases']:>7}"
        )
    return 0


def cmd_trajectory(args) -> int:
    cfg = load_config(args.config)
    scenario = _build(cfg.get("scenario"), ScenarioConfig)
    vut = resolve_vut(args.vut, cfg)
    library = load_library(args.library)
    pov = library[args.level]
    if args.level == 2:
        pov = pov.bind(args.psi)
    from .backends import rollout_case

    outcome = rollout_case(
        make_spec(pov), make_spec(vut), args.x_pov0, args.v_pov0, scenario
    )
    outcome.trajectory.to_csv(args.out, dt=scenario.dt)
    print(args.out)
    print(
        json.dumps(
            {
                "terminated_by": outcome.terminated_by,
                "dx1": outcome.safety.dx1,
                "dv1": outcome.safety.dv1,
                "ttc": "inf" if math.isinf(outcome.safety.ttc) else outcome.safety.ttc,
                "crashed": outcome.safety.crashed,
            }
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergetest",
        description="Adaptive testing of highway-merge policies against "
        "game-theoretic challenger vehicles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and cache the challenger library")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("campaign", help="run one test campaign")
    p.add_argument("--config", default=None)
    p.add_argument("--library", required=True, help="trained library directory")
    p.add_argument("--method", choices=METHODS, default="gpr")
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--vut", default="rule2")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("fmc", help="failure-mode coverage of a case CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--cases", required=True)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fmc)

    p = sub.add_parser("compare", help="tabulate FMC across campaign outputs")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("campaigns", nargs="+")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("trajectory", help="dump one episode as CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--library", required=True)
    p.add_argument("--vut", default="rule2")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--x-pov0", type=float, required=True)
    p.add_argument("--v-pov0", type=float, required=True)
    p.add_argument("--psi", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trajectory)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
