#!/usr/bin/env python3
"""Run the acceptance suite and print just the per-criterion verdicts.

    python3 scripts/run_acceptance.py            # all criteria
    python3 scripts/run_acceptance.py -k "1 or 7"
"""

import argparse
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-k", help="pytest -k expression selecting criteria")
    args = ap.parse_args()
    cmd = [sys.executable, "-m", "pytest", "-s", "-q", str(ROOT / "tests" / "test_acceptance.py")]
    if args.k:
        cmd += ["-k", args.k]
    proc = subprocess.run(cmd, cwd=ROOT, capture_output=True, text=True)
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith("criterion ")]
    print("\n".join(lines))
    print(proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr)
    return proc.returncode


if __name__ == "__main__":
    sys.exit(main())
