"""Image-directory ingestion, batch sampling and the procedural toy corpus.

Toy scenes are a sky gradient over a flat ground, split at a random horizon
row, with a few random shapes on top. Every domain applies a region-wise
``tint * x ** gamma`` transform to such scenes, so all sky pixels of an image
share one transform.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

ROLES = ("source", "anchor", "fewshot")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_NAME = "manifest.jsonl"
DATA_ANCHOR_PREFIX = "anchor_"
DOMAIN_DIRS = {"source": "source", "anchor": "anchor_m", "fewshot": "fewshot",
               "fewshot_ref": "fewshot_ref", "source_test": "source_test"}


class DataError(OSError):
    pass


# --------------------------------------------------------------------------
# image IO


def to_tensor(array: np.ndarray) -> torch.Tensor:
    """uint8 HWC -> float CHW in [-1, 1]."""
    return torch.from_numpy(array.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """float (N)CHW in [-1, 1] -> uint8 (N)HWC."""
    x = ((images.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.movedim(-3, -1).cpu().numpy()


def read_image(path, resolution: int | None = None) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if resolution is not None and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            array = np.asarray(im)
    except (UnidentifiedImageError, OSError) as err:
        raise DataError(f"cannot decode image {path}: {err}") from err
    return to_tensor(array)


def write_image(path, image: torch.Tensor) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def list_images(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"image directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DomainDataset:
    root: Path
    files: tuple[Path, ...]
    images: torch.Tensor
    role: str
    resolution: int

    def __len__(self):
        return len(self.files)


def load_domain(root, role: str, resolution: int, max_images: int | None = None) -> DomainDataset:
    """Load every image under ``root`` in lexicographic order, normalised to [-1, 1].

    For the few-shot role, ``max_images`` caps the set to its first entries.
    """
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
    files = list_images(root)
    if not files:
        raise DataError(f"no images found in {root}")
    if role == "fewshot" and max_images is not None and len(files) > max_images:
        log.warning("%s holds %d images; keeping the first %d", root, len(files), max_images)
        files = files[:max_images]
    images = torch.stack([read_image(f, resolution) for f in files])
    return DomainDataset(Path(root), tuple(files), images, role, resolution)


class DomainSampler:
    """Few-shot sets are sampled uniformly with replacement; other roles walk
    shuffled epochs without replacement."""

    def __init__(self, dataset: DomainDataset, generator: torch.Generator):
        self.dataset = dataset
        self.generator = generator
        self._order = torch.empty(0, dtype=torch.long)
        self._cursor = 0

    def sample_indices(self, n: int) -> torch.Tensor:
        if n < 1:
            raise ValueError("batch size must be at least 1")
        size = len(self.dataset)
        if self.dataset.role == "fewshot":
            return torch.randint(0, size, (n,), generator=self.generator)
        picked, count = [], 0
        while count < n:
            if self._cursor >= len(self._order):
                self._order = torch.randperm(size, generator=self.generator)
                self._cursor = 0
            take = min(n - count, len(self._order) - self._cursor)
            picked.append(self._order[self._cursor:self._cursor + take])
            self._cursor += take
            count += take
        return torch.cat(picked)

    def sample_batch(self, n: int) -> torch.Tensor:
        return self.dataset.images[self.sample_indices(n)]

    def state_dict(self) -> dict:
        return {"order": self._order.clone(), "cursor": self._cursor}

    def load_state_dict(self, state: dict) -> None:
        self._order = torch.as_tensor(state["order"], dtype=torch.long)
        self._cursor = int(state["cursor"])


def sample_batch(dataset: DomainDataset, n: int, rng: torch.Generator) -> torch.Tensor:
    """One-off draw: with replacement for few-shot sets, without otherwise."""
    return DomainSampler(dataset, rng).sample_batch(n)


# --------------------------------------------------------------------------
# toy corpus


@dataclass
class RegionTransform:
    sky_tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sky_gamma: float = 1.0
    ground_tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ground_gamma: float = 1.0


@dataclass
class ToyCorpusSpec:
    seed: int = 7
    size: int = 64
    n_source: int = 200
    n_anchor: int = 200
    n_fewshot: int = 10
    n_fewshot_ref: int = 64
    n_source_test: int = 64
    # synthetic-night anchor: blue, darkened sky and ground
    anchor: RegionTransform = field(default_factory=lambda: RegionTransform(
        (0.45, 0.55, 1.0), 2.0, (0.5, 0.5, 0.7), 1.6))
    # few-shot target: warm dusk, outside the source/anchor family
    fewshot: RegionTransform = field(default_factory=lambda: RegionTransform(
        (1.0, 0.55, 0.4), 1.6, (0.75, 0.5, 0.45), 1.3))
    tint_jitter: float = 0.2
    gamma_jitter: float = 0.3

    @classmethod
    def from_dict(cls, d: dict) -> "ToyCorpusSpec":
        d = dict(d)
        for key in ("anchor", "fewshot"):
            if isinstance(d.get(key), dict):
                d[key] = RegionTransform(**d[key])
        return cls(**d)


def render_scene(scene_seed: int, size: int) -> tuple[np.ndarray, int]:
    """Untransformed scene in [0, 1] (HWC float) and its horizon row."""
    rng = np.random.default_rng(scene_seed)
    H = W = size
    split = int(rng.integers(int(0.35 * H), int(0.65 * H) + 1))
    img = np.empty((H, W, 3))
    top = np.array([0.45, 0.65, 0.95]) + rng.uniform(-0.05, 0.05, 3)
    horizon = np.array([0.85, 0.88, 0.92]) + rng.uniform(-0.05, 0.05, 3)
    a = np.linspace(0.0, 1.0, split)[:, None, None]
    img[:split] = (1 - a) * top + a * horizon
    ground = rng.choice([[0.35, 0.55, 0.25], [0.5, 0.4, 0.3], [0.45, 0.45, 0.4]])
    ground = np.asarray(ground) + rng.uniform(-0.05, 0.05, 3)
    img[split:] = ground
    yy, xx = np.mgrid[:H, :W]
    for _ in range(int(rng.integers(1, 3))):  # clouds
        cy, cx = rng.uniform(0, split), rng.uniform(0, W)
        ry, rx = rng.uniform(2, 5) * size / 64, rng.uniform(5, 12) * size / 64
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        mask[split:] = False
        img[mask] = 0.95
    for _ in range(int(rng.integers(3, 7))):  # houses, trees, rocks
        color = rng.uniform(0.15, 0.8, 3)
        cx, w_ = rng.uniform(0, W), rng.uniform(4, 14) * size / 64
        h_ = rng.uniform(4, 16) * size / 64
        base = rng.uniform(split + 2, H)
        if rng.random() < 0.5:
            mask = (np.abs(xx - cx) <= w_ / 2) & (yy <= base) & (yy >= base - h_)
        else:
            mask = ((yy - (base - h_ / 2)) / (h_ / 2)) ** 2 + ((xx - cx) / (w_ / 2)) ** 2 <= 1
        mask[:split] = False
        img[mask] = color
    return np.clip(img, 0.05, 1.0), split


def apply_transform(scene: np.ndarray, split: int, tf: RegionTransform) -> np.ndarray:
    out = np.empty_like(scene)
    out[:split] = np.asarray(tf.sky_tint) * scene[:split] ** tf.sky_gamma
    out[split:] = np.asarray(tf.ground_tint) * scene[split:] ** tf.ground_gamma
    return np.clip(out, 0.0, 1.0)


def _jitter(tf: RegionTransform, rng: np.random.Generator, tint: float,
            gamma: float) -> RegionTransform:
    def t(v):
        return tuple(float(x) for x in np.clip(np.asarray(v) + rng.uniform(-tint, tint, 3),
                                               0.05, 1.0))
    return RegionTransform(t(tf.sky_tint), float(tf.sky_gamma + rng.uniform(-gamma, gamma)),
                           t(tf.ground_tint),
                           float(tf.ground_gamma + rng.uniform(-gamma, gamma)))


def render_record(record: dict, size: int) -> np.ndarray:
    """Regenerate the uint8 pixels described by a manifest record."""
    scene, split = render_scene(record["scene_seed"], size)
    if split != record["split_row"]:
        raise ValueError(f"record {record['file']} was generated at a different size")
    tf = RegionTransform(**record["transform"])
    return (apply_transform(scene, split, tf) * 255).round().astype(np.uint8)


def toy_records(spec: ToyCorpusSpec) -> list[dict]:
    ss = np.random.SeedSequence(spec.seed)
    domain_seqs = dict(zip(DOMAIN_DIRS, ss.spawn(len(DOMAIN_DIRS))))
    counts = {"source": spec.n_source, "anchor": spec.n_anchor, "fewshot": spec.n_fewshot,
              "fewshot_ref": spec.n_fewshot_ref, "source_test": spec.n_source_test}
    records = []
    for domain, seq in domain_seqs.items():
        scene_seeds = seq.generate_state(counts[domain])
        jitter_rng = np.random.default_rng(seq.spawn(1)[0])
        for i in range(counts[domain]):
            if domain in ("source", "source_test"):
                tf = RegionTransform()
            elif domain == "anchor":
                tf = spec.anchor
            else:
                tf = _jitter(spec.fewshot, jitter_rng, spec.tint_jitter, spec.gamma_jitter)
            _, split = render_scene(int(scene_seeds[i]), spec.size)
            records.append({
                "domain": DOMAIN_DIRS[domain], "file": f"{i:04d}.png",
                "scene_seed": int(scene_seeds[i]), "split_row": split,
                "transform": dataclasses.asdict(tf),
            })
    return records


def generate_toy_corpus(spec: ToyCorpusSpec, out_root) -> Path:
    """Write ``<out_root>/<domain>/NNNN.png`` for the training domains
    (source, anchor_m, fewshot) and the held-out evaluation sets (fewshot_ref,
    source_test), plus a manifest with one JSON record per image."""
    out_root = Path(out_root)
    for d in DOMAIN_DIRS.values():
        (out_root / d).mkdir(parents=True, exist_ok=True)
    records = toy_records(spec)
    for rec in records:
        Image.fromarray(render_record(rec, spec.size)).save(out_root / rec["domain"] / rec["file"])
    with open(out_root / MANIFEST_NAME, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out_root / "toy_spec.json", "w") as fh:
        json.dump(dataclasses.asdict(spec), fh, indent=2)
    return out_root


def read_manifest(root) -> list[dict]:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def region_masks(records: list[dict], size: int, resolution: int) -> dict[str, torch.Tensor]:
    """Boolean (N, H, W) sky and ground masks at ``resolution`` from manifest records."""
    rows = torch.arange(resolution)[None, :, None]
    split = torch.tensor([round(r["split_row"] * resolution / size) for r in records])
    sky = (rows < split[:, None, None]).expand(-1, -1, resolution)
    return {"sky": sky, "ground": ~sky}
