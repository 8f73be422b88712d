"""Command-line entry points: run experiments, verify run logs, merge results.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .envs import ENV_REGISTRY, make_env
from .inference import MHConfig
from .loop import METRICS_HEADER, AlignmentConfig, LoopError, run_experiment
from .oracle import OracleConfig, OracleError
from .ranking import Ranking, discrepancy_pairs, rank_by_reward
from .preference import returns_under
from .rewards import (
    BUILTIN_SPECS,
    FeatureRecord,
    RewardError,
    RewardSpec,
    Trajectory,
    builtin_spec,
    load_spec,
    spec_to_toml,
)
from .rl import CEMConfig
from .tomlio import dump_toml

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs; maps 1:1 onto the TOML config file."""

    env: str
    reward_spec: str
    out_dir: str
    seeds: tuple[int, ...] = (0,)
    label: str = ""
    initial_params: dict = field(default_factory=dict)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("field 'seeds' must list at least one seed")

    def to_dict(self) -> dict:
        data = {
            "env": self.env,
            "reward_spec": self.reward_spec,
            "out_dir": self.out_dir,
            "seeds": list(self.seeds),
            "label": self.label,
            "initial_params": dict(self.initial_params),
            "oracle": _strip(asdict(self.alignment.oracle)),
            "alignment": {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(self.alignment).items()
                if k not in ("mh", "cem", "oracle", "seed")
            },
        }
        data["alignment"]["mh"] = _strip(asdict(self.alignment.mh), drop=("seed",))
        data["alignment"]["cem"] = _strip(asdict(self.alignment.cem), drop=("seed",))
        return data


def _strip(d: dict, drop: tuple = ()) -> dict:
    return {k: v for k, v in d.items() if k not in drop}


def _build(cls, data: dict, where: str, **extra):
    try:
        return cls(**{**data, **extra})
    except TypeError as err:
        raise ConfigError(f"bad field under [{where}]: {err}") from None


def parse_config(data: dict, path: str = "<config>") -> RunConfig:
    for required in ("env", "reward_spec", "out_dir"):
        if required not in data:
            raise ConfigError(f"{path}: missing required field '{required}'")
    oracle_data = data.get("oracle", {})
    align_data = dict(data.get("alignment", {}))
    mh_data = align_data.pop("mh", {})
    cem_data = align_data.pop("cem", {})
    align_data.pop("oracle", None)
    if "radii" in align_data:
        align_data["radii"] = tuple(float(r) for r in align_data["radii"])
    try:
        alignment = _build(
            AlignmentConfig,
            align_data,
            "alignment",
            mh=_build(MHConfig, mh_data, "alignment.mh"),
            cem=_build(CEMConfig, cem_data, "alignment.cem"),
            oracle=_build(OracleConfig, oracle_data, "oracle"),
        )
    except (LoopError, OracleError) as err:
        raise ConfigError(f"{path}: {err}") from None
    return RunConfig(
        env=data["env"],
        reward_spec=data["reward_spec"],
        out_dir=data["out_dir"],
        seeds=tuple(int(s) for s in data.get("seeds", [0])),
        label=data.get("label", ""),
        initial_params={k: float(v) for k, v in data.get("initial_params", {}).items()},
        alignment=alignment,
    )


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{p}: not valid TOML: {err}")
    return parse_config(data, str(p))


def resolve_spec(name_or_path: str) -> RewardSpec:
    if name_or_path in BUILTIN_SPECS:
        return builtin_spec(name_or_path)
    p = Path(name_or_path)
    if not p.exists():
        raise ConfigError(
            f"reward_spec '{name_or_path}' is neither a built-in "
            f"({', '.join(BUILTIN_SPECS)}) nor an existing file"
        )
    return load_spec(p)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
        if args.env:
            cfg = replace(cfg, env=args.env)
        if args.seed:
            cfg = replace(cfg, seeds=tuple(int(s) for s in args.seed.split(",")))
        if args.out:
            cfg = replace(cfg, out_dir=args.out)
        overrides = {}
        if args.max_iters is not None:
            overrides["max_iterations"] = args.max_iters
        if args.oracle:
            backend = "llm-http" if args.oracle == "llm" else "scripted"
            overrides["oracle"] = replace(cfg.alignment.oracle, backend=backend)
        if overrides:
            cfg = replace(cfg, alignment=replace(cfg.alignment, **overrides))

        if cfg.env not in ENV_REGISTRY:
            raise ConfigError(
                f"unknown environment '{cfg.env}' (have {', '.join(sorted(ENV_REGISTRY))})"
            )
        spec = resolve_spec(cfg.reward_spec)
        env = make_env(cfg.env)
        spec.check_features_declared(env.spec.feature_names)
        init_params = spec.make_params(cfg.initial_params)
    except (ConfigError, RewardError, KeyError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    failures = 0
    for seed in cfg.seeds:
        run_dir = Path(cfg.out_dir) / f"seed_{seed:04d}"
        seed_cfg = replace(cfg, seeds=(seed,))
        snapshot = dump_toml(seed_cfg.to_dict())
        align = replace(cfg.alignment, seed=seed)
        try:
            result = run_experiment(
                cfg.env, spec, align, run_dir,
                initial_params=init_params,
                label=cfg.label or cfg.alignment.update_mode,
                config_snapshot=snapshot,
            )
            (run_dir / "reward_spec.toml").write_text(spec_to_toml(spec))
            print(
                f"seed {seed}: {result.summary['iterations']} iterations, "
                f"final success {result.summary['final_success_rate']:.2f} -> {run_dir}"
            )
        except Exception as err:  # per-seed failure: record, keep going
            failures += 1
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "summary.json").write_text(
                json.dumps({"seed": seed, "error": str(err)}, indent=1)
            )
            print(f"seed {seed}: failed: {err}", file=sys.stderr)
    return EXIT_OK


def _load_trajectories(jsonl_path: Path) -> dict[int, Trajectory]:
    headers: dict[int, dict] = {}
    steps: dict[int, list[dict]] = {}
    for line in jsonl_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        tid = rec["traj"]
        if "step" in rec:
            steps.setdefault(tid, []).append(rec)
        else:
            headers[tid] = rec
    out = {}
    for tid, header in headers.items():
        rows = sorted(steps.get(tid, []), key=lambda r: r["step"])
        out[tid] = Trajectory(
            tid,
            tuple(tuple(r["state"]) for r in rows),
            tuple(tuple(r["action"]) for r in rows),
            tuple(FeatureRecord(r["features"], step=r["step"]) for r in rows),
            success=header["success"],
        )
    return out


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:] if ln.strip()]


def cmd_replay(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    required = ["metrics.csv", "params.csv", "reward_spec.toml"]
    missing = [name for name in required if not (run_dir / name).exists()]
    if missing:
        print(f"replay error: missing files in {run_dir}: {', '.join(missing)}", file=sys.stderr)
        return EXIT_RUNTIME

    spec = load_spec(run_dir / "reward_spec.toml")
    m_header, m_rows = _read_csv(run_dir / "metrics.csv")
    if ",".join(m_header) != METRICS_HEADER:
        print(f"replay error: metrics.csv header mismatch: {m_header}", file=sys.stderr)
        return EXIT_RUNTIME
    p_header, p_rows = _read_csv(run_dir / "params.csv")
    if p_header[0] != "iteration" or tuple(p_header[1:]) != spec.param_names:
        print(f"replay error: params.csv header mismatch: {p_header}", file=sys.stderr)
        return EXIT_RUNTIME

    def params_at(i: int):
        row = p_rows[i]
        return spec.default_params().with_values(float(v) for v in row[1:])

    problems: list[str] = []
    for row in m_rows:
        i = int(row[0])
        before, after = int(row[1]), int(row[2])
        batch_file = run_dir / "batches" / f"iter_{i:03d}.jsonl"
        meta_file = run_dir / "batches" / f"iter_{i:03d}.meta.json"
        if before < 0 or not batch_file.exists():
            continue  # skipped iteration (oracle failure)
        if not meta_file.exists():
            problems.append(f"iteration {i}: missing {meta_file.name}")
            continue
        table = _load_trajectories(batch_file)
        meta = json.loads(meta_file.read_text())
        batch = [table[tid] for tid in meta["ids"]]
        oracle = Ranking(tuple(meta["oracle_ranking"]), provenance="oracle")
        pb, pa = params_at(i), params_at(i + 1)
        got_before = len(discrepancy_pairs(rank_by_reward(batch, spec, pb), oracle))
        got_after = len(discrepancy_pairs(rank_by_reward(batch, spec, pa), oracle))
        if got_before != before:
            problems.append(f"iteration {i}: inconsistency_before {before} != recomputed {got_before}")
        if got_after != after:
            problems.append(f"iteration {i}: inconsistency_after {after} != recomputed {got_after}")
        returns = returns_under(pb, spec, batch)
        for traj, r in zip(batch, returns):
            logged = meta["returns_before"][str(traj.tid)]
            if abs(logged - r) > 1e-9:
                problems.append(
                    f"iteration {i}: trajectory {traj.tid} return {logged} != recomputed {r}"
                )
    if problems:
        for p in problems:
            print(f"replay mismatch: {p}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{run_dir}: replay consistent ({len(m_rows)} iterations checked)")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    dirs = [Path(d) for d in args.run_dirs]
    if len(dirs) < 2:
        print("compare error: need at least two run directories", file=sys.stderr)
        return EXIT_CONFIG
    rows = ["condition,seed,iteration,success_rate"]
    for d in dirs:
        summary_file = d / "summary.json"
        metrics_file = d / "metrics.csv"
        if not summary_file.exists() or not metrics_file.exists():
            print(f"compare error: {d} lacks summary.json/metrics.csv", file=sys.stderr)
            return EXIT_RUNTIME
        summary = json.loads(summary_file.read_text())
        header, m_rows = _read_csv(metrics_file)
        if ",".join(header) != METRICS_HEADER:
            print(f"compare error: {d} metrics.csv schema mismatch", file=sys.stderr)
            return EXIT_RUNTIME
        for row in m_rows:
            rows.append(f"{summary['label']},{summary['seed']},{row[0]},{row[3]}")
    out = Path(args.out or "compare.csv")
    out.write_text("\n".join(rows) + "\n")
    print(f"wrote {out} ({len(rows) - 1} rows from {len(dirs)} runs)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankalign",
        description="Reward-parameter learning from ranking feedback",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run experiments from a TOML config")
    p_run.add_argument("--config", required=True, help="path to the run config (TOML)")
    p_run.add_argument("--seed", help="comma-separated seed list override")
    p_run.add_argument("--oracle", choices=["scripted", "llm"], help="oracle backend override")
    p_run.add_argument("--out", help="output directory override")
    p_run.add_argument("--max-iters", type=int, dest="max_iters", help="iteration budget override")
    p_run.add_argument("--env", help="environment name override")
    p_run.set_defaults(func=cmd_run)

    p_replay = sub.add_parser("replay", help="recompute and verify a run directory")
    p_replay.add_argument("run_dir")
    p_replay.set_defaults(func=cmd_replay)

    p_cmp = sub.add_parser("compare", help="merge metrics from several runs")
    p_cmp.add_argument("run_dirs", nargs="+")
    p_cmp.add_argument("--out", help="merged CSV path (default compare.csv)")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
