#!/usr/bin/env python3
"""Sweep one config key over several values, one `kvsim run` per value.

Each value gets its own output directory under --out; a compare table of every
cell against the first value's cell of the same policy is written next to them.

    python3 scripts/sweep.py scripts/configs/small.yaml workload.miss_fraction 0 0.1 0.3
"""

import argparse
import sys
from pathlib import Path

from kvsim.cli import cell_name, main as kvsim
from kvsim.config import load_config


def main() -> int:
    ap = argparse.ArgumentParser(description="sweep one config key")
    ap.add_argument("config", type=Path)
    ap.add_argument("key", help="dotted key, e.g. cluster.nodes")
    ap.add_argument("values", nargs="+")
    ap.add_argument("--out", type=Path, default=Path("sweep"))
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    dirs = []
    for v in args.values:
        out = args.out / f"{args.key}={v}"
        rc = kvsim(["run", "--config", str(args.config), "--set", f"{args.key}={v}",
                    "--output", str(out), "--workers", str(args.workers), "--force"])
        if rc:
            return rc
        dirs.append(out)

    cfg = load_config(args.config)
    rc = 0
    for policy in cfg.policies:
        for users in cfg.workload.users:
            cells = [d / cell_name(policy, users, cfg.seed) for d in dirs]
            print(f"# {policy}, {users} users, baseline {args.key}={args.values[0]}")
            rc |= kvsim(["compare", *map(str, cells),
                         "-o", str(args.out / f"compare_{policy}_{users}.csv")])
    return rc


if __name__ == "__main__":
    sys.exit(main())
