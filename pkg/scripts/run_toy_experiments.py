"""Train and score the toy-corpus runs used by the acceptance suite.

    python3 scripts/run_toy_experiments.py --out runs/toy --runs full,no_style,lgfs_only,one_shot
"""

import argparse
import json
import logging
from pathlib import Path

from manifest_i2i.experiments import RUNS, prepare_corpus, run_experiment

KEYS = ("fd_source", "fd_untrained", "fd_general", "fd_exemplar", "exemplar_gain",
        "consistency_sky", "fd_anchor_uncorrected", "fd_anchor_corrected", "mean_change",
        "train_seconds")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawTextHelpFormatter)
    p.add_argument("--out", type=Path, default=Path("runs/toy"))
    p.add_argument("--data-root", type=Path, help="defaults to <out>/data, generated if absent")
    p.add_argument("--runs", default=",".join(RUNS))
    p.add_argument("--iterations", type=int, help="override the per-run iteration count")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    root = prepare_corpus(args.data_root or args.out / "data")
    overrides = {"iterations": args.iterations} if args.iterations else {}
    results = {}
    for name in args.runs.split(","):
        results[name] = run_experiment(name, root, args.out, **overrides)
        (args.out / "summary.json").write_text(json.dumps(results, indent=2))

    print("run".ljust(12) + "".join(k[:14].rjust(16) for k in KEYS))
    for name, rep in results.items():
        cells = "".join(f"{rep[k]:16.4f}" if isinstance(rep.get(k), float) else " " * 15 + "-"
                        for k in KEYS)
        print(name.ljust(12) + cells)


if __name__ == "__main__":
    main()
