"""Toy-corpus experiment protocol shared by the acceptance tests and scripts/.

Each run trains on the procedural corpus at 64x64 with ten few-shot images and
is then scored by :func:`evaluation.evaluate_run` plus a few extras that need
the untrained network or the raw sources.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path

import torch

from .checkpoint import load_checkpoint
from .config import AblationMask, TrainingConfig
from .data import MANIFEST_NAME, ToyCorpusSpec, generate_toy_corpus, load_domain
from .evaluation import (
    embed, evaluate_run, frechet_distance, mask_from_meta, refs_dir_for, sources_dir,
    translate_images,
)
from .germ import GENERAL
from .networks import NetworkBundle
from .training import fit, load_datasets

log = logging.getLogger(__name__)

TOY_SPEC = ToyCorpusSpec()

# width 16 keeps a 64x64 step under a second on one CPU core
TOY_TRAINING = dict(resolution=64, fewshot_size=10, iterations=1000, batch_size=4,
                    base_width=16, disc_width=16, mlp_dim=128, n_patches=8,
                    checkpoint_every=500, style_bank_size=32, seed=0)

RUNS = {
    "full": dict(),
    "no_style": dict(ablate="no_style"),
    "lgfs_only": dict(ablate="lgfs_only"),
    "one_shot": dict(fewshot_size=1, iterations=300),
}

N_EVAL = 64


def prepare_corpus(root, spec: ToyCorpusSpec = TOY_SPEC) -> Path:
    root = Path(root)
    if not (root / MANIFEST_NAME).is_file():
        generate_toy_corpus(spec, root)
    return root


def toy_config(data_root, out_dir, **overrides) -> TrainingConfig:
    kw = dict(TOY_TRAINING, data_root=str(data_root), out_dir=str(out_dir))
    kw.update(overrides)
    return TrainingConfig(**kw)


def _eval_sources(data_root, resolution: int, n_eval: int = N_EVAL) -> torch.Tensor:
    return load_domain(sources_dir(Path(data_root)), "source", resolution).images[:n_eval]


def untrained_fd(cfg: TrainingConfig, data_root, seed: int = 0) -> float:
    """Frechet distance to the references of general translations by a freshly
    initialised network with the same configuration."""
    bundle = NetworkBundle(cfg.network_config())
    s = _eval_sources(data_root, cfg.resolution)
    out = translate_images(bundle, AblationMask(), s, GENERAL,
                           generator=torch.Generator().manual_seed(seed))
    refs = load_domain(refs_dir_for(Path(data_root)), "anchor", cfg.resolution).images
    return frechet_distance(embed(bundle.phi, out), embed(bundle.phi, refs))


def mean_change(checkpoint, data_root, seed: int = 0) -> float:
    """Mean absolute pixel difference between general translations and their inputs."""
    bundle, meta, _ = load_checkpoint(checkpoint)
    s = _eval_sources(data_root, meta["training"]["resolution"])
    out = translate_images(bundle, mask_from_meta(meta), s, GENERAL,
                           generator=torch.Generator().manual_seed(seed))
    return float((out - s).abs().mean())


def run_experiment(name: str, data_root, out_root, **overrides) -> dict:
    """Train one named run (see ``RUNS``) and return its metrics report."""
    kw = dict(RUNS[name])
    kw.update(overrides)
    cfg = toy_config(data_root, Path(out_root) / name, **kw)
    # wall time accumulates over resumed sessions
    timing = Path(cfg.out_dir) / "train_seconds.txt"
    before = float(timing.read_text()) if cfg.resume and timing.is_file() else 0.0
    t0 = time.perf_counter()
    ckpt = fit(cfg, load_datasets(cfg), progress_every=250)
    seconds = before + time.perf_counter() - t0
    timing.write_text(f"{seconds:.3f}\n")
    report = evaluate_run(ckpt, data_root, Path(out_root) / name / "eval", n_eval=N_EVAL)
    report["train_seconds"] = seconds
    report["mean_change"] = mean_change(ckpt, data_root)
    if name == "full":
        report["fd_untrained"] = untrained_fd(cfg, data_root)
    report["iterations"] = float(cfg.iterations)
    log.info("%s: %s", name, {k: v for k, v in report.items()})
    return report

