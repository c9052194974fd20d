"""Desk-scale metrics, mask-aware batch inference and anchor-based translation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import AblationMask, TrainingConfig
from .data import DataError, list_images, load_domain, read_manifest, region_masks, write_image
from .germ import EXEMPLAR, GENERAL, compose, conditioning_for, residual
from .losses import statistics_distance
from .manifold import AnchorStyleBank, select_style, translate_interpolated
from .networks import NetworkBundle, image_statistics

log = logging.getLogger(__name__)

FRECHET_EPS = 1e-6
CHUNK = 16


# --------------------------------------------------------------------------
# Frechet distance


@dataclass
class EmbeddingSet:
    features: np.ndarray  # (N, D)
    extractor: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"embeddings must be (N, D), got {self.features.shape}")


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_from_moments(mu1, cov1, mu2, cov2, eps: float = FRECHET_EPS) -> float:
    """||mu1 - mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2)) with C = cov + eps*I.

    The cross term is evaluated as tr sqrt(C1^(1/2) C2 C1^(1/2)), which has the
    same spectrum as C1 C2 but stays symmetric positive semi-definite.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    eye = np.eye(cov1.shape[0])
    c1, c2 = cov1 + eps * eye, cov2 + eps * eye
    root1 = _psd_sqrt(c1)
    cross = np.linalg.eigvalsh(root1 @ c2 @ root1)
    trace_cross = np.sqrt(np.clip(cross, 0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(c1) + np.trace(c2) - 2 * trace_cross)


def frechet_distance(x: EmbeddingSet | np.ndarray, y: EmbeddingSet | np.ndarray,
                     eps: float = FRECHET_EPS) -> float:
    x = x if isinstance(x, EmbeddingSet) else EmbeddingSet(x)
    y = y if isinstance(y, EmbeddingSet) else EmbeddingSet(y)
    fx, fy = x.features, y.features
    if fx.shape[1] != fy.shape[1]:
        raise ValueError(f"embedding dimension mismatch: {fx.shape[1]} vs {fy.shape[1]}")
    if len(fx) < 2 or len(fy) < 2:
        raise ValueError("need at least two embeddings per set")
    if not (np.isfinite(fx).all() and np.isfinite(fy).all()):
        raise ValueError("embeddings contain non-finite values")
    return frechet_from_moments(fx.mean(0), np.cov(fx, rowvar=False),
                                fy.mean(0), np.cov(fy, rowvar=False), eps)


@torch.no_grad()
def embed(phi, images: torch.Tensor) -> EmbeddingSet:
    """Global-average-pooled deepest extractor stage."""
    feats = [phi(images[i:i + CHUNK])[-1].mean(dim=(2, 3)) for i in range(0, len(images), CHUNK)]
    name = f"{type(phi).__name__}(seed={getattr(phi, 'seed', None)})"
    return EmbeddingSet(torch.cat(feats).double().numpy(), name)


# --------------------------------------------------------------------------
# exemplar fidelity and consistency


@dataclass
class ExemplarFidelity:
    matched: float
    mismatched: float

    @property
    def relative_gain(self) -> float:
        return 1.0 - self.matched / self.mismatched


@torch.no_grad()
def exemplar_fidelity(phi, outputs: torch.Tensor, exemplars: torch.Tensor,
                      exemplar_ids=None) -> ExemplarFidelity:
    """Mean statistics distance between each output and its own exemplar,
    against the mean over pairings with the other exemplars.

    ``exemplar_ids`` marks rows that share an exemplar so they are not counted
    as mismatched.
    """
    if len(outputs) != len(exemplars):
        raise ValueError(f"{len(outputs)} outputs vs {len(exemplars)} exemplars")
    n = len(outputs)
    ids = torch.arange(n) if exemplar_ids is None else torch.as_tensor(exemplar_ids)
    so, se = image_statistics(phi, outputs), image_statistics(phi, exemplars)
    dist = torch.empty(n, n, dtype=torch.float64)
    for j in range(n):
        col = type(se)([m[j:j + 1] for m in se.mu], [s[j:j + 1] for s in se.sigma])
        dist[:, j] = statistics_distance(so, col).double()
    matched = dist.diagonal().mean()
    off = ids[:, None] != ids[None, :]
    mismatched = dist[off].mean() if off.any() else torch.tensor(float("nan"))
    return ExemplarFidelity(float(matched), float(mismatched))


def intensity(images: torch.Tensor) -> torch.Tensor:
    return ((images + 1) / 2).mean(dim=1)


def consistency_probe(outputs: torch.Tensor, inputs: torch.Tensor,
                      region_masks: dict[str, torch.Tensor] | None,
                      min_intensity: float = 1e-3) -> float:
    """Within-region variance of the per-pixel output/input intensity ratio,
    averaged over images and the given regions. Zero for a region-wise uniform gain."""
    if not region_masks:
        raise ValueError("consistency probe needs region masks")
    ratio = intensity(outputs) / intensity(inputs).clamp_min(min_intensity)
    values = []
    for name, masks in region_masks.items():
        if masks.shape != ratio.shape:
            raise ValueError(f"mask {name!r} has shape {tuple(masks.shape)}, expected {tuple(ratio.shape)}")
        for r, m in zip(ratio, masks):
            if m.any():
                values.append(r[m].double().var(unbiased=False))
    return float(torch.stack(values).mean())


# --------------------------------------------------------------------------
# inference


def ensure_mode_allowed(mask: AblationMask, mode: str) -> None:
    if mode not in (GENERAL, EXEMPLAR):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == EXEMPLAR and not mask.germ:
        raise ValueError("this model was trained without the residual module; "
                         "exemplar mode is unavailable")


@torch.no_grad()
def translate_images(bundle: NetworkBundle, mask: AblationMask, s: torch.Tensor,
                     mode: str = GENERAL, exemplar: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Inference path matching the training graph of the given ablation."""
    ensure_mode_allowed(mask, mode)
    if mode == EXEMPLAR and exemplar is None:
        raise ValueError("exemplar mode needs an exemplar image")
    bundle.eval()
    bank = AnchorStyleBank.from_bundle(bundle)
    out = []
    for i in range(0, len(s), CHUNK):
        x = s[i:i + CHUNK]
        ex = None
        if exemplar is not None:
            ex = exemplar if len(exemplar) == 1 else exemplar[i:i + CHUNK]
        content = bundle.encode_content(x)
        if mask.wmi:
            s_w = translate_interpolated(bundle, x, bank=bank, content=content)
        else:
            z = select_style(bank, bundle.anchors[1])
            s_w = bundle.decode(content, z.expand(len(x), -1))
        if mask.germ:
            z_r = conditioning_for(bundle, mode, len(x), ex, generator)
            s_w = compose(s_w, residual(bundle, content, z_r))
        out.append(s_w)
    return torch.cat(out)


@torch.no_grad()
def anchor_based_translate(bundle: NetworkBundle, mask: AblationMask, a: torch.Tensor,
                           mode: str = GENERAL, exemplar: torch.Tensor | None = None,
                           generator: torch.Generator | None = None,
                           return_uncorrected: bool = False):
    """Anchor image -> source style -> re-encoded back toward the anchor, plus
    the residual computed on the re-encoded content."""
    if not mask.germ:
        raise ValueError("anchor-based translation needs a model trained with the residual module")
    ensure_mode_allowed(mask, mode)
    bundle.eval()
    bank = AnchorStyleBank.from_bundle(bundle)
    anchor = bundle.anchors[1]
    z_id, z_m = select_style(bank, "id"), select_style(bank, anchor)
    corrected, plain = [], []
    for i in range(0, len(a), CHUNK):
        x = a[i:i + CHUNK]
        n = len(x)
        as_source = bundle.decode(bundle.encode_content(x), z_id.expand(n, -1))
        content = bundle.encode_content(as_source)
        back = bundle.decode(content, z_m.expand(n, -1))
        ex = None
        if exemplar is not None:
            ex = exemplar if len(exemplar) == 1 else exemplar[i:i + CHUNK]
        z_r = conditioning_for(bundle, mode, n, ex, generator)
        corrected.append(compose(back, residual(bundle, content, z_r)))
        plain.append(back)
    if return_uncorrected:
        return torch.cat(corrected), torch.cat(plain)
    return torch.cat(corrected)


# --------------------------------------------------------------------------
# full evaluation


def mask_from_meta(meta: dict) -> AblationMask:
    training = meta.get("training")
    return TrainingConfig(**training).mask() if training else AblationMask()


def contact_sheet(columns: list[torch.Tensor], path, rows: int = 8) -> Path:
    """Grid with one row per sample and one column per tensor in ``columns``."""
    n = min(rows, *(len(c) for c in columns))
    grid = torch.cat([torch.cat([c[i] for c in columns], dim=2) for i in range(n)], dim=1)
    write_image(path, grid)
    return Path(path)


def sources_dir(root: Path) -> Path:
    return root / "source_test" if (root / "source_test").is_dir() else root / "source"


def refs_dir_for(root: Path) -> Path:
    return root / "fewshot_ref" if (root / "fewshot_ref").is_dir() else root / "fewshot"


def evaluate_run(checkpoint, data_root, out_dir=None, seed: int = 0, n_eval: int = 64,
                 refs_dir=None) -> dict[str, float | str]:
    """Render general and exemplar translations and compute every metric.

    Writes ``metrics.txt`` and ``contact_sheet.png`` to ``out_dir`` when given.
    """
    bundle, meta, _ = load_checkpoint(checkpoint)
    mask = mask_from_meta(meta)
    res = meta.get("training", {}).get("resolution", 64)
    fewshot_size = meta.get("training", {}).get("fewshot_size")
    root = Path(data_root)
    refs_dir = Path(refs_dir) if refs_dir else refs_dir_for(root)
    if not refs_dir.is_dir() or not list_images(refs_dir):
        raise DataError(f"few-shot references not found in {refs_dir}")
    src_dir = sources_dir(root)
    sources = load_domain(src_dir, "source", res)
    s = sources.images[:n_eval]
    refs = load_domain(refs_dir, "anchor", res).images
    fewshot = load_domain(root / "fewshot", "fewshot", res, fewshot_size).images
    gen = torch.Generator().manual_seed(seed)

    report: dict[str, float | str] = {}
    phi = bundle.phi
    emb_refs = embed(phi, refs)
    report["extractor"] = emb_refs.extractor
    report["checkpoint_step"] = float(meta.get("step", 0))
    w = torch.softmax(bundle.anchor_logits.detach(), -1)
    for i, a in enumerate(bundle.anchors):
        report[f"w_{a}"] = float(w[i])

    general = translate_images(bundle, mask, s, GENERAL, generator=gen)
    report["fd_source"] = frechet_distance(embed(phi, s), emb_refs)
    report["fd_general"] = frechet_distance(embed(phi, general), emb_refs)
    columns = [s, general]
    if mask.germ:
        ex_ids = torch.arange(len(s)) % len(fewshot)
        exemplars = fewshot[ex_ids]
        exemplar_out = translate_images(bundle, mask, s, EXEMPLAR, exemplars, generator=gen)
        report["fd_exemplar"] = frechet_distance(embed(phi, exemplar_out), emb_refs)
        fid = exemplar_fidelity(phi, exemplar_out, exemplars, ex_ids)
        report["exemplar_matched"] = fid.matched
        report["exemplar_mismatched"] = fid.mismatched
        report["exemplar_gain"] = fid.relative_gain
        # the same pairing scored on general-mode outputs
        report["general_matched"] = exemplar_fidelity(phi, general, exemplars, ex_ids).matched
        columns += [exemplar_out, exemplars]
    try:
        records = {r["file"]: r for r in read_manifest(root) if r["domain"] == src_dir.name}
        masks = region_masks([records[f.name] for f in sources.files[:n_eval]],
                             _corpus_size(root), res)
        report["consistency_sky"] = consistency_probe(general, s, {"sky": masks["sky"]})
        report["consistency_ground"] = consistency_probe(general, s, {"ground": masks["ground"]})
        report["consistency"] = consistency_probe(general, s, masks)
    except (DataError, KeyError) as err:
        log.warning("skipping consistency probe: %s", err)
    anchor_dir = root / f"anchor_{bundle.anchors[1]}"
    if mask.germ and anchor_dir.is_dir():
        a = load_domain(anchor_dir, "anchor", res).images[:n_eval]
        corrected, plain = anchor_based_translate(bundle, mask, a, GENERAL, generator=gen,
                                                  return_uncorrected=True)
        report["fd_anchor_raw"] = frechet_distance(embed(phi, a), emb_refs)
        report["fd_anchor_uncorrected"] = frechet_distance(embed(phi, plain), emb_refs)
        report["fd_anchor_corrected"] = frechet_distance(embed(phi, corrected), emb_refs)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report(report, out_dir / "metrics.txt")
        contact_sheet(columns, out_dir / "contact_sheet.png")
    return report


def _corpus_size(root: Path) -> int:
    spec = root / "toy_spec.json"
    if spec.is_file():
        return int(json.loads(spec.read_text())["size"])
    raise DataError(f"{spec} not found")


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{k} = {v}\n" for k, v in report.items()))
    return path
