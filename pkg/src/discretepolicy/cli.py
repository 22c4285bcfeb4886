"""Command-line experiment harness.

Every command writes CSV tables with a fixed header plus JSON manifests into
``--out`` and nowhere else. Files are written to a temporary name in the
same directory and renamed into place.

Exit codes: 0 success, 2 configuration error, 3 numeric failure in every seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import capacity_scan, cost_scan, sensitivity_scan, variance_scan
from .diffmath import tensor as T
from .distributions import CATEGORICAL_HEADS, HEAD_KINDS, density_on_grid
from .envs import ENVIRONMENTS
from .errors import InvalidConfig
from .onpolicy.algorithms import ALGORITHMS, AlgoConfig
from .onpolicy.train import STREAMS, RunResult, TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CURVE_COLUMNS = ("steps", "mean_return", "std_return", "kl", "clip_frac", "wall_ms")
DENSITY_POINTS = 1001


class UsageError(Exception):
    """Bad command line; reported with exit code 2."""


# --- file output -----------------------------------------------------------


class OutputDir:
    """Write-only view of the output directory that refuses paths outside it."""

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        target = (self.root / name).resolve()
        if target.parent != self.root:
            raise UsageError(f"refusing to write {name!r} outside {self.root}")
        return target

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return target

    def write_csv(self, name: str, columns, rows) -> Path:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])
        return self.write_text(name, buf.getvalue())

    def write_json(self, name: str, payload: dict) -> Path:
        return self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


# --- configuration ---------------------------------------------------------


def parse_seeds(text: str) -> list[int]:
    """``"0..4"`` (inclusive range), ``"0,2,5"`` or a mix such as ``"0..2,7"``."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if ".." in part:
                lo, hi = part.split("..")
                if int(hi) < int(lo):
                    raise ValueError
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise UsageError(f"--seeds: cannot parse {text!r}; use e.g. 0..4 or 0,1,2") from None
    if not seeds or any(s < 0 for s in seeds):
        raise UsageError("--seeds must name at least one non-negative seed")
    if len(set(seeds)) != len(seeds):
        raise UsageError("--seeds contains duplicates")
    return seeds


def parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{flag} is empty")
    return values


def _algo_from_args(args) -> AlgoConfig:
    algo = args.algo
    if algo == "trpo" and args.lr is not None:
        raise UsageError("--lr does not apply to trpo; use --delta")
    if algo != "trpo" and args.delta is not None:
        raise UsageError(f"--delta only applies to trpo, not {algo}")
    overrides = {
        "lr": args.lr,
        "delta": args.delta,
        "gamma": args.gamma,
        "lam": args.lam,
        "clip": args.clip,
        "entropy_coef": args.entropy_coef,
        "batch_size": args.batch_size,
    }
    return AlgoConfig(algo=algo, **{k: v for k, v in overrides.items() if v is not None})


def _train_config(args, head: str | None = None, bins: int | None = None) -> TrainConfig:
    if head is None:
        head, bins = args.head, args.bins
    if head is None:
        raise UsageError("--head is required")
    if head in CATEGORICAL_HEADS and bins is None:
        raise UsageError(f"--bins is required for --head {head}")
    if head not in CATEGORICAL_HEADS and bins is not None:
        raise UsageError(f"--bins only applies to discrete/ordinal heads, not {head}")
    return TrainConfig(
        env=args.env,
        head=head,
        bins=bins,
        steps=args.steps,
        algo=_algo_from_args(args),
        master_seed=args.master_seed,
    )


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["algo"] = AlgoConfig(**d["algo"])
    d["hidden"] = tuple(d["hidden"])
    d["value_hidden"] = tuple(d["value_hidden"])
    return TrainConfig(**d)


# --- runs ------------------------------------------------------------------


def curve_rows(result: RunResult, timing: bool) -> list[dict]:
    return [
        {
            "steps": r.steps,
            "mean_return": r.mean_return,
            "std_return": r.std_return,
            "kl": r.kl,
            "clip_frac": r.clip_frac,
            "wall_ms": r.wall_ms if timing else None,
        }
        for r in result.records
    ]


def manifest(command: str, config: TrainConfig, seed: int, result: RunResult | None, timing: bool, files) -> dict:
    return {
        "command": command,
        "code_version": __version__,
        "config": config.to_dict(),
        "seed": seed,
        "seed_streams": {name: [config.master_seed, [seed, k]] for name, k in STREAMS.items()},
        "timing": timing,
        "terminated_early": None if result is None else result.terminated_early,
        "error": None if result is None else result.error,
        "iterations": None if result is None else len(result.records),
        "files": list(files),
    }


@dataclass(frozen=True)
class RunJob:
    command: str
    config: TrainConfig
    seed: int
    out: str
    curve: str
    manifest: str
    density: str | None = None
    timing: bool = False


def run_job(job: RunJob) -> dict:
    """Train one seed and write its curve, manifest and optional density; runs in a worker.

    The curve file is rewritten after every iteration so a run that dies
    keeps its partial curve.
    """
    out = OutputDir(job.out)
    partial = RunResult(job.config, job.seed, [], [], np.zeros(0))

    def on_record(record) -> None:
        partial.records.append(record)
        out.write_csv(job.curve, CURVE_COLUMNS, curve_rows(partial, job.timing))

    result = train(job.config, job.seed, on_record=on_record)
    out.write_csv(job.curve, CURVE_COLUMNS, curve_rows(result, job.timing))
    files = [job.curve]
    if job.density:
        grid = np.linspace(-1.0, 1.0, DENSITY_POINTS)
        policy = job.config.policy_network
        obs = np.zeros((1, policy.obs_dim))
        with T.no_grad():
            density = density_on_grid(policy.forward(result.theta, obs), grid)
        out.write_csv(job.density, ("action", "density"), [{"action": a, "density": p} for a, p in zip(grid, density)])
        files.append(job.density)
    info = manifest(job.command, job.config, job.seed, result, job.timing, files)
    info["final_return"] = result.final_return
    out.write_json(job.manifest, info)
    return {"seed": job.seed, "name": job.curve, "terminated_early": result.terminated_early, "error": result.error}


def run_jobs(jobs: list[RunJob], parallelism: int) -> list[dict]:
    if parallelism <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(parallelism, len(jobs))) as pool:
        return list(pool.map(run_job, jobs))


def _report(outcomes: list[dict]) -> int:
    for o in outcomes:
        status = f"terminated early: {o['error']}" if o["terminated_early"] else "ok"
        print(f"{o['name']}: {status}")
    if outcomes and all(o["terminated_early"] for o in outcomes):
        return EXIT_NUMERIC
    return EXIT_OK


# --- commands --------------------------------------------------------------


def cmd_train(args) -> int:
    if args.manifest:
        info = json.loads(Path(args.manifest).read_text())
        config = train_config_from_dict(info["config"])
        seeds = [info["seed"]] if args.seeds is None else parse_seeds(args.seeds)
        timing = bool(info.get("timing", False))
    else:
        if args.env is None:
            raise UsageError("--env is required")
        config = _train_config(args)
        seeds = parse_seeds(args.seeds or "0")
        timing = args.timing
    jobs = [RunJob("train", config, s, args.out, f"seed_{s}.csv", f"seed_{s}.json", timing=timing) for s in seeds]
    return _report(run_jobs(jobs, args.parallelism))


def cmd_bandit_demo(args) -> int:
    seeds = parse_seeds(args.seeds or "0..4")
    env = args.env or "bimodal-bandit"
    ns = replace_ns(args, env=env)
    jobs = []
    for head, bins in (("discrete", args.bins or 11), ("gaussian", None)):
        config = _train_config(ns, head, bins)
        label = head if bins is None else f"{head}{bins}"
        for s in seeds:
            stem = f"{label}_seed_{s}"
            jobs.append(RunJob(
                "bandit-demo", config, s, args.out, f"curve_{stem}.csv", f"manifest_{stem}.json",
                f"density_{stem}.csv", args.timing,
            ))
    return _report(run_jobs(jobs, args.parallelism))


def replace_ns(args, **changes) -> argparse.Namespace:
    ns = argparse.Namespace(**vars(args))
    for k, v in changes.items():
        setattr(ns, k, v)
    return ns


def cmd_variance_scan(args) -> int:
    ks = parse_int_list(args.ks or "2,5,11,30,50", "--ks")
    result = variance_scan(
        args.env or "bimodal-bandit", ks, n_inits=args.n_inits, n_grad_samples=args.n_grad_samples,
        rng=args.master_seed, anchor=args.anchor,
    )
    out = OutputDir(args.out)
    out.write_csv("variance.csv", ("K", "empirical_norm", "theoretical_norm", "raw_variance"), result.rows())
    out.write_json("variance.json", {
        "command": "variance-scan",
        "code_version": __version__,
        "env": args.env or "bimodal-bandit",
        "K": result.K,
        "anchor": result.anchor,
        "n_inits": result.n_inits,
        "n_grad_samples": result.n_grad_samples,
        "master_seed": args.master_seed,
        "raw_stderr": [float(s) for s in result.raw_stderr],
    })
    return EXIT_OK


def cmd_capacity_scan(args) -> int:
    ks = parse_int_list(args.ks or "2,5,11,15", "--ks")
    env = args.env or "pendulum-swingup"
    seeds = parse_seeds(args.seeds or "0..2")
    algo = _algo_from_args(args)
    result = capacity_scan(env, ks, algo, args.steps, seeds, args.master_seed)
    out = OutputDir(args.out)
    rows = [vars(c) | {"error": c.error or ""} for c in result.cells]
    out.write_csv("capacity.csv", ("K", "seed", "final_return", "terminated_early", "error"), rows)
    out.write_json("capacity.json", {
        "command": "capacity-scan", "code_version": __version__, "env": env, "K": ks, "seeds": seeds,
        "steps": args.steps, "master_seed": args.master_seed, "algo": vars(algo),
    })
    return EXIT_OK


def cmd_cost_scan(args) -> int:
    ks = parse_int_list(args.ks or "5,11,30,100", "--ks")
    env = args.env or "pointmass-reacher"
    result = cost_scan(env, ks, args.steps, args.repeats, _algo_from_args(args))
    out = OutputDir(args.out)
    out.write_csv("cost.csv", ("head", "seconds", "percent"), result.rows())
    out.write_json("cost.json", {
        "command": "cost-scan", "code_version": __version__, "env": env, "K": ks, "steps": args.steps,
        "repeats": args.repeats,
    })
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    heads = [h.strip() for h in (args.heads or "gaussian,beta,discrete,ordinal").split(",") if h.strip()]
    unknown = [h for h in heads if h not in HEAD_KINDS]
    if unknown:
        raise UsageError(f"--heads: unknown head(s) {', '.join(unknown)}")
    env = args.env or "pendulum-swingup"
    results = sensitivity_scan(env, heads, args.n_draws, args.master_seed, args.steps, _algo_from_args(args))
    out = OutputDir(args.out)
    for head, res in results.items():
        out.write_csv(f"sensitivity_{head}.csv", ("log10_lr", "bins", "seed", "final_return", "terminated_early"),
                      [vars(d) for d in res.draws])
        out.write_csv(f"sensitivity_{head}_quantiles.csv", ("quantile", "final_return"), res.quantile_rows())
    out.write_json("sensitivity.json", {
        "command": "sensitivity", "code_version": __version__, "env": env, "heads": heads,
        "n_draws": args.n_draws, "steps": args.steps, "master_seed": args.master_seed,
    })
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "bandit-demo": cmd_bandit_demo,
    "variance-scan": cmd_variance_scan,
    "capacity-scan": cmd_capacity_scan,
    "cost-scan": cmd_cost_scan,
    "sensitivity": cmd_sensitivity,
}

HELP = {
    "train": "train one config over several seeds; CSV columns " + ",".join(CURVE_COLUMNS),
    "bandit-demo": "discrete K=11 vs gaussian on the bimodal bandit; curves plus densities on a 1001-point grid",
    "variance-scan": "encoder score-gradient variance vs K; CSV columns K,empirical_norm,theoretical_norm,raw_variance",
    "capacity-scan": "final return per (K, seed); CSV columns K,seed,final_return,terminated_early,error",
    "cost-scan": "wall time per head relative to gaussian = 100; CSV columns head,seconds,percent",
    "sensitivity": "random learning-rate draws per head; CSV per head (log10_lr,bins,seed,final_return,"
    "terminated_early) plus a quantile file (quantile,final_return)",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--env", choices=sorted(ENVIRONMENTS))
    common.add_argument("--algo", choices=ALGORITHMS, default="ppo")
    common.add_argument("--head", choices=HEAD_KINDS)
    common.add_argument("--bins", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--delta", type=float)
    common.add_argument("--steps", type=int, default=100_000)
    common.add_argument("--seeds", help="e.g. 0..4 or 0,1,2")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--parallelism", type=int, default=1)
    common.add_argument("--gamma", type=float)
    common.add_argument("--lam", type=float)
    common.add_argument("--clip", type=float)
    common.add_argument("--entropy-coef", type=float)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--master-seed", type=int, default=0)
    common.add_argument("--timing", action="store_true", help="record wall_ms (makes CSVs machine-dependent)")

    parser = argparse.ArgumentParser(prog="discretepolicy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
        if name == "train":
            p.add_argument("--manifest", help="rerun the config and seed recorded in a manifest")
        if name in ("variance-scan", "capacity-scan", "cost-scan"):
            p.add_argument("--ks", help="comma-separated list of K")
        if name == "variance-scan":
            p.add_argument("--n-inits", type=int, default=20)
            p.add_argument("--n-grad-samples", type=int, default=10_000)
            p.add_argument("--anchor", type=int)
        if name == "cost-scan":
            p.add_argument("--repeats", type=int, default=3)
        if name == "sensitivity":
            p.add_argument("--heads", help="comma-separated head kinds")
            p.add_argument("--n-draws", type=int, default=30)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.parallelism < 1:
            raise UsageError("--parallelism must be >= 1")
        return COMMANDS[args.command](args)
    except (UsageError, InvalidConfig) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
