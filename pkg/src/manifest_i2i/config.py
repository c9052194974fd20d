"""Training configuration, its flat ``key = value`` file format, and ablation masks."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .networks import NetworkConfig

ABLATIONS = ("no_style", "no_patch", "no_germ", "no_wmi", "lgfs_only")


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    # data
    data_root: str = "toy_data"
    out_dir: str = "runs/default"
    resolution: int = 64
    fewshot_size: int = 25
    anchors: str = "id,m"
    # optimisation
    iterations: int = 2000
    batch_size: int = 4
    lr_gen: float = 1e-4
    lr_disc: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay_every: int = 0
    lr_decay_gamma: float = 0.5
    # objective
    lambda_style: float = 1.0
    lambda_patch: float = 1.0
    lambda_adv: float = 1.0
    lambda_recon_image: float = 10.0
    lambda_recon_style: float = 1.0
    lambda_recon_content: float = 1.0
    exemplar_prob: float = 0.5
    patch_size: int = 0
    n_patches: int = 8
    ablate: str = ""
    # architecture
    base_width: int = 32
    n_res: int = 2
    style_dim: int = 8
    mlp_dim: int = 128
    disc_width: int = 32
    phi_kind: str = "random"
    phi_seed: int = 1234
    phi_weights: str = ""
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 500
    style_bank_size: int = 32
    resume: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def anchor_list(self) -> tuple[str, ...]:
        return tuple(a.strip() for a in self.anchors.split(",") if a.strip())

    @property
    def effective_patch_size(self) -> int:
        return self.patch_size or self.resolution // 4

    @property
    def ablation_flags(self) -> tuple[str, ...]:
        return tuple(a.strip().replace("-", "_") for a in self.ablate.split(",") if a.strip())

    def validate(self) -> None:
        positive = ("resolution", "fewshot_size", "batch_size", "n_patches", "base_width",
                    "style_dim", "mlp_dim", "disc_width", "checkpoint_every", "style_bank_size")
        for k in positive:
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)}")
        for k in ("iterations", "lr_decay_every", "patch_size", "n_res"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative, got {getattr(self, k)}")
        for k in ("lr_gen", "lr_disc"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)}")
        for k in ("lambda_style", "lambda_patch", "lambda_adv", "lambda_recon_image",
                  "lambda_recon_style", "lambda_recon_content"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative, got {getattr(self, k)}")
        if not 0.0 <= self.exemplar_prob <= 1.0:
            raise ConfigError(f"exemplar_prob must lie in [0, 1], got {self.exemplar_prob}")
        if self.resolution % 8:
            raise ConfigError(f"resolution must be a multiple of 8, got {self.resolution}")
        if self.effective_patch_size > self.resolution or self.effective_patch_size % 4:
            raise ConfigError(f"patch_size {self.effective_patch_size} must be a multiple of 4 "
                              f"no larger than the resolution")
        anchors = self.anchor_list
        if len(anchors) < 2 or anchors[0] != "id" or len(set(anchors)) != len(anchors):
            raise ConfigError(f"anchors must be 'id' followed by distinct names, got {self.anchors!r}")
        AblationMask.from_flags(self.ablation_flags)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            anchors=self.anchor_list, base_width=self.base_width, n_res=self.n_res,
            style_dim=self.style_dim, mlp_dim=self.mlp_dim, disc_width=self.disc_width,
            patch_size=self.effective_patch_size, phi_kind=self.phi_kind,
            phi_seed=self.phi_seed, phi_weights=self.phi_weights or None, init_seed=self.seed,
        )

    def mask(self) -> "AblationMask":
        return AblationMask.from_flags(self.ablation_flags)


@dataclass(frozen=True)
class AblationMask:
    style: bool = True
    patch: bool = True
    germ: bool = True
    wmi: bool = True
    anchor_adv: bool = True

    @property
    def lgfs_only(self) -> bool:
        return not self.anchor_adv

    @classmethod
    def from_flags(cls, flags) -> "AblationMask":
        flags = set(flags)
        unknown = flags - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation(s) {sorted(unknown)}; choose from {ABLATIONS}")
        if {"no_style", "no_patch"} <= flags:
            raise ConfigError("no_style together with no_patch leaves no few-shot objective")
        if "lgfs_only" in flags and flags & {"no_style", "no_patch"}:
            raise ConfigError("lgfs_only cannot drop an LGFS term")
        if "lgfs_only" in flags:
            return cls(wmi=False, germ=False, anchor_adv=False)
        return cls(style="no_style" not in flags, patch="no_patch" not in flags,
                   germ="no_germ" not in flags, wmi="no_wmi" not in flags)


# --------------------------------------------------------------------------
# flat text format


def _field_type(f) -> type:
    hints = typing.get_type_hints(TrainingConfig)
    t = hints[f.name]
    if isinstance(t, types.UnionType):
        t = next(a for a in t.__args__ if a is not type(None))
    return t


def parse_value(key: str, raw: str):
    field_map = {f.name: f for f in fields(TrainingConfig)}
    if key not in field_map:
        raise ConfigError(f"unknown config key {key!r}")
    t = _field_type(field_map[key])
    raw = raw.strip()
    try:
        if t is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return t(raw)
    except ValueError as err:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from err


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def load_config(path=None, overrides: dict | None = None) -> TrainingConfig:
    """Built-in defaults < config file < explicit overrides."""
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    try:
        return TrainingConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def format_config(cfg: TrainingConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


def write_config(cfg: TrainingConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(cfg))
    return path
