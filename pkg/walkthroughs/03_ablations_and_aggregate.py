"""Run the ablation matrix through the CLI, then aggregate it.

Run with ``python3 walkthroughs/03_ablations_and_aggregate.py [runs_dir]``.
The full matrix (7 methods x 5 seeds) takes a few minutes on a laptop; pass
``--quick`` to shorten every run to 2000 steps.
"""
import csv
import sys
import tempfile
from pathlib import Path

from rize.cli import main

args = [a for a in sys.argv[1:] if a != "--quick"]
runs = Path(args[0]) if args else Path(tempfile.mkdtemp()) / "runs"
config = Path(__file__).resolve().parents[1] / "configs" / "grid5x5-ablations-3demos.toml"
extra = ["--override", "total_steps=2000", "--override", "pretrain_steps=200"] \
    if "--quick" in sys.argv else []

code = main(["run", str(config), "--runs-dir", str(runs)] + extra)
if code:
    sys.exit(code)

out = runs.parent / "report"
main(["aggregate", str(runs), str(out)])

with open(out / "report.csv") as fh:
    for row in csv.DictReader(fh):
        print(f"{row['method']:<14} iqm {float(row['iqm']):.4f} "
              f"[{float(row['iqm_lo']):.4f}, {float(row['iqm_hi']):.4f}]")
print(f"curves and bound series are in {out}")
