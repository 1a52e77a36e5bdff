"""Run the five-detector comparison on the tiny config through the Python API.

    python demos/tiny_table1.py [out_dir]

Takes a few minutes on one core.  The same run from the shell:

    python -m bevda run-table1 --config demos/tiny.ini --out runs/tiny
"""
import sys
from pathlib import Path

from bevda.harness import MODELS, cmd_run_table1, load_config


def main(out: Path) -> None:
    cfg = load_config(Path(__file__).with_name("tiny.ini"))
    results = cmd_run_table1(cfg, out, log=lambda m, r: print(f"  trained and evaluated {m}"))
    print(f"\n{'model':9s} {'role':11s}     AP")
    for model, r in results.items():
        print(f"{model:9s} {MODELS[model][0]:11s} {100 * r.ap:6.2f}%")
    print(f"\nTable written to {out / 'table1.csv'}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/tiny"))
