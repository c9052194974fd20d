"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainingConfig, load_config, parse_value
from .data import DataError, ToyCorpusSpec, generate_toy_corpus, list_images, read_image, write_image
from .evaluation import anchor_based_translate, evaluate_run, mask_from_meta, translate_images
from .germ import EXEMPLAR, GENERAL
from .losses import NonFiniteLossError
from .training import fit, read_metrics

log = logging.getLogger("manifest_i2i")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags, which would collide with the I/O code
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per TrainingConfig field; unset flags do not override the config file."""
    group = parser.add_argument_group("config keys (override the config file)")
    for f in dataclasses.fields(TrainingConfig):
        kw = dict(dest=f"cfg_{f.name}", default=argparse.SUPPRESS, metavar=f.name.upper(),
                  type=lambda raw, key=f.name: parse_value(key, raw),
                  help=f"default: {f.default!r}")
        if f.type in (bool, "bool"):
            kw.update(nargs="?", const=True)
        group.add_argument(_flag(f.name), **kw)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="manifest-i2i",
                            description="Few-shot image translation on a learned style manifold.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("synth-data", help="generate the procedural toy corpus")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--spec", type=Path, help="JSON file with ToyCorpusSpec fields")
    for f in dataclasses.fields(ToyCorpusSpec):
        if f.type in (int, float, "int", "float"):
            p.add_argument(_flag(f.name), dest=f"spec_{f.name}", default=argparse.SUPPRESS,
                           type=float if f.type in (float, "float") else int,
                           help=f"default: {f.default!r}")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--log-every", type=int, default=100)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a directory of images")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--output", required=True, type=Path)
    p.add_argument("--mode", choices=(GENERAL, EXEMPLAR), default=GENERAL)
    p.add_argument("--exemplar", type=Path, help="exemplar image (required in exemplar mode)")
    p.add_argument("--from-anchor", action="store_true",
                   help="inputs are anchor images: route them through the source style "
                        "and add the residual")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="compute metrics and a contact sheet")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data-root", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--refs", type=Path, help="target-domain reference images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-eval", type=int, default=64)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render loss curves from a metrics log")
    p.add_argument("--metrics", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("inspect-weights", help="print the anchor interpolation weights")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.set_defaults(func=cmd_inspect_weights)
    return parser


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    values = json.loads(args.spec.read_text()) if args.spec else {}
    values.update({k[5:]: v for k, v in vars(args).items() if k.startswith("spec_")})
    try:
        spec = ToyCorpusSpec.from_dict(values)
    except TypeError as err:
        raise UsageError(str(err)) from err
    root = generate_toy_corpus(spec, args.out)
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        print(f"{d}/  {len(list_images(d))} images")
    print(f"{root / 'manifest.jsonl'}")
    return EXIT_OK


def training_config_from_args(args) -> TrainingConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = training_config_from_args(args)
    ckpt = fit(cfg, progress_every=args.log_every)
    print(ckpt)
    return EXIT_OK


def cmd_translate(args) -> int:
    if args.mode == EXEMPLAR and args.exemplar is None:
        raise UsageError("--mode exemplar requires --exemplar")
    bundle, meta, _ = load_checkpoint(args.checkpoint)
    mask = mask_from_meta(meta)
    res = meta.get("training", {}).get("resolution", 64)
    files = list_images(args.input)
    if not files:
        raise DataError(f"no images found in {args.input}")
    exemplar = read_image(args.exemplar, res)[None] if args.exemplar else None
    gen = torch.Generator().manual_seed(args.seed)
    try:
        images = torch.stack([read_image(f, res) for f in files])
        if args.from_anchor:
            out = anchor_based_translate(bundle, mask, images, args.mode, exemplar, gen)
        else:
            out = translate_images(bundle, mask, images, args.mode, exemplar, gen)
    except ValueError as err:
        raise UsageError(str(err)) from err
    args.output.mkdir(parents=True, exist_ok=True)
    for f, img in zip(files, out):
        write_image(args.output / f"{f.stem}.png", img)
    print(f"wrote {len(files)} images to {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = evaluate_run(args.checkpoint, args.data_root, args.out, args.seed, args.n_eval,
                          args.refs)
    for k, v in report.items():
        print(f"{k} = {v}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = read_metrics(args.metrics)
    args.out.mkdir(parents=True, exist_ok=True)
    panels = {
        "losses.png": [k for k in ("total_G", "total_D", "style", "patch_G", "patch_D",
                                    "adv_G", "adv_D") if k in series],
        "reconstruction.png": [k for k in series if k.startswith("recon_")],
        "anchor_weights.png": [k for k in series if k.startswith("w_")],
    }
    for name, keys in panels.items():
        if not keys:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for k in keys:
            steps, values = zip(*series[k])
            ax.plot(steps, values, label=k, linewidth=1)
        ax.set_xlabel("step")
        ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(args.out / name, dpi=100)
        plt.close(fig)
        print(args.out / name)
    return EXIT_OK


def cmd_inspect_weights(args) -> int:
    bundle, meta, _ = load_checkpoint(args.checkpoint)
    w = torch.softmax(bundle.anchor_logits.detach(), -1)
    print(f"step {meta.get('step', 0)}")
    for name, value in zip(bundle.anchors, w.tolist()):
        print(f"{name}\t{value:.6f}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, json.JSONDecodeError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
