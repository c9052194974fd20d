"""Train the full model and every single-component ablation on the toy corpus
and tabulate the general-mode metrics.

    python3 scripts/ablation_sweep.py --out runs/ablations --iterations 1000
"""

import argparse
import json
import logging
from pathlib import Path

from manifest_i2i.config import ABLATIONS
from manifest_i2i.experiments import N_EVAL, prepare_corpus, toy_config
from manifest_i2i.evaluation import evaluate_run
from manifest_i2i.training import fit, load_datasets


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawTextHelpFormatter)
    p.add_argument("--out", type=Path, default=Path("runs/ablations"))
    p.add_argument("--data-root", type=Path)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    root = prepare_corpus(args.data_root or args.out / "data")
    rows = {}
    for flag in ("",) + ABLATIONS:
        name = flag or "full"
        cfg = toy_config(root, args.out / name, ablate=flag, iterations=args.iterations,
                         seed=args.seed)
        ckpt = fit(cfg, load_datasets(cfg), progress_every=250)
        rows[name] = evaluate_run(ckpt, root, args.out / name / "eval", n_eval=N_EVAL)
        (args.out / "ablations.json").write_text(json.dumps(rows, indent=2))

    keys = ("fd_general", "consistency_sky", "consistency", "exemplar_gain")
    print("| run | " + " | ".join(keys) + " |")
    print("|---" * (len(keys) + 1) + "|")
    for name, rep in rows.items():
        print(f"| {name} | " + " | ".join(f"{rep[k]:.4f}" if k in rep else "-" for k in keys) + " |")


if __name__ == "__main__":
    main()
