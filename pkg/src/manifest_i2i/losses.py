"""Training objectives: anchor adversarial terms, backbone reconstruction,
feature-statistics style loss, rotated-patch adversarial terms, and assembly
of the generator/discriminator totals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

from .networks import FeatureStatistics, image_statistics

# least-squares GAN targets
REAL, FAKE = 1.0, 0.0

GENERATOR_TERMS = ("style", "patch_G", "adv_G", "recon_image", "recon_style", "recon_content")
DISCRIMINATOR_TERMS = ("patch_D", "adv_D")
TERM_WEIGHT = {
    "style": "style", "patch_G": "patch", "patch_D": "patch", "adv_G": "adv", "adv_D": "adv",
    "recon_image": "recon_image", "recon_style": "recon_style",
    "recon_content": "recon_content",
}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    style: float = 1.0
    patch: float = 1.0
    adv: float = 1.0
    recon_image: float = 10.0
    recon_style: float = 1.0
    recon_content: float = 1.0


# --------------------------------------------------------------------------
# statistics alignment


def statistics_distance(a: FeatureStatistics, b: FeatureStatistics) -> torch.Tensor:
    """Per-row sum_k ||mu_k(a) - mu_k(b)||_2 + ||sigma_k(a) - sigma_k(b)||_2.

    Inputs are per-image statistics; a single-row ``b`` broadcasts against ``a``.
    """
    total = 0
    for ma, sa, mb, sb in zip(a.mu, a.sigma, b.mu, b.sigma):
        total = total + torch.linalg.vector_norm(ma - mb, dim=-1) \
            + torch.linalg.vector_norm(sa - sb, dim=-1)
    return total


def style_loss(phi, s_tilde: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the per-image statistics distance to ``t``.

    ``t`` is either one image (compared with every row) or row-paired with ``s_tilde``.
    """
    if t.shape[0] not in (1, s_tilde.shape[0]):
        raise ValueError(f"cannot pair {s_tilde.shape[0]} outputs with {t.shape[0]} targets")
    return statistics_distance(image_statistics(phi, s_tilde), image_statistics(phi, t)).mean()


# --------------------------------------------------------------------------
# patches


def rotate(x: torch.Tensor, k) -> torch.Tensor:
    """Rotate the last two axes clockwise by k quarter turns."""
    return torch.rot90(x, int(k), dims=(-1, -2))


def sample_patches(x: torch.Tensor, n: int, patch_size: int,
                   generator: torch.Generator | None = None,
                   return_params: bool = False):
    """``n`` random crops per image, each rotated by a uniform multiple of 90 degrees.

    Returns (N*n, C, P, P) patches, plus (image, top, left, k) rows if asked.
    """
    N, _, H, W = x.shape
    if patch_size > min(H, W):
        raise ValueError(f"patch size {patch_size} exceeds image size {H}x{W}")
    total = N * n
    tops = torch.randint(0, H - patch_size + 1, (total,), generator=generator)
    lefts = torch.randint(0, W - patch_size + 1, (total,), generator=generator)
    ks = torch.randint(0, 4, (total,), generator=generator)
    idx = torch.arange(N).repeat_interleave(n)
    patches = [rotate(x[i, :, t:t + patch_size, l:l + patch_size], k)
               for i, t, l, k in zip(idx.tolist(), tops.tolist(), lefts.tolist(), ks.tolist())]
    out = torch.stack(patches) if patches else x.new_zeros(0, x.shape[1], patch_size, patch_size)
    if return_params:
        return out, torch.stack([idx, tops, lefts, ks], dim=1)
    return out


def _lsgan(scores: torch.Tensor, target: float) -> torch.Tensor:
    return ((scores - target) ** 2).mean()


def patch_loss_G(disc_fs: Callable, s_tilde: torch.Tensor, n: int = 8, patch_size: int = 16,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    return _lsgan(disc_fs(sample_patches(s_tilde, n, patch_size, generator)), REAL)


def patch_loss_D(disc_fs: Callable, s_tilde: torch.Tensor, t: torch.Tensor, n: int = 8,
                 patch_size: int = 16,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    fake = sample_patches(s_tilde.detach(), n, patch_size, generator)
    real = sample_patches(t, n, patch_size, generator)
    return _lsgan(disc_fs(fake), FAKE) + _lsgan(disc_fs(real), REAL)


# --------------------------------------------------------------------------
# anchor adversarial terms


def adv_loss_G(disc_mt: Callable, s_tilde_c: torch.Tensor, c: str) -> torch.Tensor:
    return _lsgan(disc_mt(s_tilde_c, c), REAL)


def adv_loss_D(disc_mt: Callable, s_tilde_c: torch.Tensor, a_c: torch.Tensor,
               c: str) -> torch.Tensor:
    return _lsgan(disc_mt(a_c, c), REAL) + _lsgan(disc_mt(s_tilde_c.detach(), c), FAKE)


def adv_losses_multitarget(disc_mt: Callable, s_tilde_c: torch.Tensor, a_c: torch.Tensor,
                           c: str) -> tuple[torch.Tensor, torch.Tensor]:
    return adv_loss_G(disc_mt, s_tilde_c, c), adv_loss_D(disc_mt, s_tilde_c, a_c, c)


# --------------------------------------------------------------------------
# reconstruction


def l1(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return (x_hat - x).abs().mean()


def reconstruction_losses(bundle, s: torch.Tensor, domain: str = "id", *,
                          s_tilde_c: torch.Tensor | None = None,
                          z_c: torch.Tensor | None = None, c: str | None = None,
                          content: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Image reconstruction of ``s`` through its own style code, plus the latent
    cycle (content and style re-encoded from a translation ``s_tilde_c``) when given."""
    if content is None:
        content = bundle.encode_content(s)
    out = {"recon_image": l1(bundle.decode(content, bundle.encode_style(s, domain)), s)}
    if s_tilde_c is not None:
        out["recon_content"] = l1(bundle.encode_content(s_tilde_c), content)
        out["recon_style"] = l1(bundle.encode_style(s_tilde_c, c), z_c)
    return out


# --------------------------------------------------------------------------
# assembly


@dataclass
class LossReport:
    terms: dict[str, torch.Tensor]
    total_G: torch.Tensor
    total_D: torch.Tensor
    extras: dict[str, float] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total_G"] = float(self.total_G.detach())
        out["total_D"] = float(self.total_D.detach())
        out.update(self.extras)
        return out


def assemble(losses: Mapping[str, torch.Tensor | float],
             weights: LossWeights | None = None) -> LossReport:
    """Weighted generator and discriminator totals; every term must be present
    (use 0 for a disabled one) and finite."""
    weights = weights or LossWeights()
    missing = [k for k in GENERATOR_TERMS + DISCRIMINATOR_TERMS if k not in losses]
    if missing:
        raise KeyError(f"missing loss components: {missing}")
    terms = {}
    for k in GENERATOR_TERMS + DISCRIMINATOR_TERMS:
        v = losses[k]
        v = v if torch.is_tensor(v) else torch.tensor(float(v))
        value = float(v.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(k, value)
        terms[k] = v

    def total(names):
        return sum(getattr(weights, TERM_WEIGHT[k]) * terms[k] for k in names)

    return LossReport(terms, total(GENERATOR_TERMS), total(DISCRIMINATOR_TERMS))
