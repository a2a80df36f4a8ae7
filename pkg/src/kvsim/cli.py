"""Command line front end: gen-trace, run, compare, validate-config."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from .config import ConfigError, ExperimentConfig, build, dump_yaml, load_config, to_dict
from .metrics import CompareError, atomic_write, compare_runs, write_comparison, write_run
from .simcore import run
from .workload import WorkloadError, load_trace, save_trace

log = logging.getLogger("kvsim")

OUTPUT_ENV = "KVSIM_OUTPUT"
DEFAULT_OUTPUT = "runs"


def _config(args) -> ExperimentConfig:
    """Defaults < file < --set overrides < dedicated flags."""
    overrides = list(args.set or [])
    for flag, key in (("seed", "seed"), ("sessions", "workload.sessions"),
                      ("corpus", "workload.corpus"), ("synthetic", "workload.synthetic"),
                      ("miss_fraction", "workload.miss_fraction"),
                      ("high_fraction", "workload.high_fraction"),
                      ("nodes", "cluster.nodes"), ("output", "output")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{key}={json.dumps(v)}")
    users = getattr(args, "users", None)
    if users:
        overrides.append(f"workload.users={json.dumps(users)}")
    policies = getattr(args, "policies", None)
    if policies:
        overrides.append(f"policies={json.dumps(policies)}")
    if getattr(args, "prefill_heavy", False):
        overrides.append("workload.reshape=[1024, 1]")
    return load_config(args.config, overrides)


# ---------------------------------------------------------------- gen-trace

def cmd_gen_trace(args) -> int:
    cfg = _config(args)
    users = cfg.workload.users[0]
    trace = cfg.build_trace(users)
    save_trace(trace, args.out)
    summary = trace.summary()
    summary["concurrency_target"] = trace.concurrency_target
    summary["path"] = str(args.out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- run

def cell_name(policy: str, users: int, seed: int) -> str:
    return f"{policy}_{users}_{seed}"


def _run_cell(cfg_dict: dict, policy: str, users: int, trace_path: str | None,
              outdir: str) -> dict:
    cfg = build(ExperimentConfig, cfg_dict)
    trace = load_trace(trace_path) if trace_path else cfg.build_trace(users)
    t0 = time.perf_counter()
    res = run(trace, cfg.run_config(), policy, seed=cfg.seed)
    extra = {"config": cfg_dict, "policy": policy, "users": users,
             "trace_file": trace_path, "trace_summary": trace.summary()}
    rep = write_run(res, outdir, extra=extra)
    rep["wall_s"] = time.perf_counter() - t0
    return rep


def cmd_run(args) -> int:
    cfg = _config(args)
    root = Path(cfg.output or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    trace_path = str(args.trace) if args.trace else None
    if trace_path:
        users_list = (load_trace(trace_path).concurrency_target,)
    else:
        users_list = cfg.workload.users
    cfg_dict = to_dict(cfg)
    cells = []
    failed = 0
    for users in users_list:
        for policy in cfg.policies:
            out = root / cell_name(policy, users, cfg.seed)
            if out.exists():
                if not args.force:
                    log.error("%s exists; pass --force to overwrite", out)
                    failed += 1
                    continue
                shutil.rmtree(out)
            cells.append((policy, users, out))
    root.mkdir(parents=True, exist_ok=True)
    atomic_write(root / "config.yaml", dump_yaml(cfg))
    workers = max(1, min(args.workers, len(cells))) if cells else 1
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [(c, pool.submit(_run_cell, cfg_dict, c[0], c[1], trace_path, str(c[2])))
                for c in cells]
        for (policy, users, out), fut in futs:
            try:
                rep = fut.result()
            except Exception as exc:  # a failed cell must not stop the others
                failed += 1
                log.error("%s failed: %s: %s", out.name, type(exc).__name__, exc)
                continue
            print(f"{out.name}: tpot={rep['tpot_mean_s'] * 1e3:.2f}ms "
                  f"ttft={rep['ttft_mean_s']:.3f}s rps={rep['requests_per_sec']:.2f} "
                  f"imbalance={rep['load_imbalance_ratio']:.2f} "
                  f"prefill={rep['prefill_compute_s']:.1f}s ({rep['wall_s']:.1f}s wall)")
    return 1 if failed else 0


# ---------------------------------------------------------------- compare

def _read_report(path: Path) -> dict:
    if path.is_dir():
        path = path / "report.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise CompareError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CompareError(f"{path}:{exc.lineno}: invalid JSON") from None


def cmd_compare(args) -> int:
    paths = [Path(p) for p in args.reports]
    reports = [_read_report(p) for p in paths]
    names = [p.name if p.is_dir() else p.parent.name or p.stem for p in paths]
    base = args.baseline
    if base.isdigit():
        idx = int(base)
    elif base in names:
        idx = names.index(base)
    else:
        raise CompareError(f"baseline {base!r} is neither an index nor one of {names}")
    if not 0 <= idx < len(reports):
        raise CompareError(f"baseline index {idx} out of range")
    rows = compare_runs(reports, baseline=idx, names=names)
    if args.out:
        write_comparison(rows, args.out)
    for row in rows:
        cells = " ".join(f"{k}={v:.3f}" for k, v in row.items() if isinstance(v, float))
        print(f"{row['run']}: {cells}")
    return 0


# ---------------------------------------------------------------- validate

def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.set or [])
    text = dump_yaml(cfg)
    again = build(ExperimentConfig, yaml.safe_load(text))
    if again != cfg:
        raise ConfigError("configuration does not survive a round trip")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment YAML file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. cluster.nodes=4 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--nodes", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--corpus", help="line-delimited conversation corpus")
    p.add_argument("--synthetic", choices=("sharegpt", "heavy", "single_turn"))
    p.add_argument("--miss-fraction", type=float)
    p.add_argument("--high-fraction", type=float)
    p.add_argument("--prefill-heavy", action="store_true",
                   help="every turn becomes 1024 prompt / 1 response tokens")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kvsim", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-trace", help="write a closed-loop trace file")
    _common(g)
    g.add_argument("--users", type=int, nargs=1, help="concurrency target")
    g.add_argument("-o", "--out", type=Path, required=True)
    g.set_defaults(fn=cmd_gen_trace)

    r = sub.add_parser("run", help="run every (policy, users) cell")
    _common(r)
    r.add_argument("--trace", type=Path, help="use this trace instead of generating one")
    r.add_argument("--users", type=int, nargs="+")
    r.add_argument("--policies", nargs="+")
    r.add_argument("--output", help=f"output root (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    r.add_argument("--force", action="store_true", help="overwrite existing cell directories")
    r.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("compare", help="ratios of run metrics against a baseline run")
    c.add_argument("reports", nargs="+", help="cell directories or report.json files")
    c.add_argument("--baseline", default="0", help="index or cell name of the baseline")
    c.add_argument("-o", "--out", type=Path, help="write the table as CSV")
    c.set_defaults(fn=cmd_compare)

    v = sub.add_parser("validate-config", help="check a config and print it normalized")
    v.add_argument("config", type=Path)
    v.add_argument("--set", action="append", metavar="KEY=VALUE")
    v.set_defaults(fn=cmd_validate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CompareError, WorkloadError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
