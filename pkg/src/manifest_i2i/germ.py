"""General/exemplar residual module: conditioning vectors, residual images and
the final composition on top of the interpolated translation."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .manifold import AnchorStyleBank, AnchorWeights, translate_interpolated
from .networks import NetworkBundle

GENERAL = "general"
EXEMPLAR = "exemplar"
MODES = (GENERAL, EXEMPLAR)


@dataclass
class ResidualConditioning:
    mode: str
    vector: torch.Tensor  # (N, d_r)


def exemplar_conditioning(bundle: NetworkBundle, t: torch.Tensor) -> ResidualConditioning:
    """Per-image (mu_k, sigma_k) of the extractor, concatenated over stages.

    Each row of ``t`` is its own exemplar; statistics are never pooled across rows.
    This is the same extraction path the style loss uses.
    """
    return ResidualConditioning(EXEMPLAR, bundle.image_statistics(t).vector())


def general_conditioning(bundle: NetworkBundle, n: int = 1,
                         generator: torch.Generator | None = None) -> ResidualConditioning:
    z = torch.randn(n, bundle.cfg.conditioning_dim, generator=generator)
    return ResidualConditioning(GENERAL, z)


def residual(bundle: NetworkBundle, content: torch.Tensor,
             z_r: ResidualConditioning | torch.Tensor) -> torch.Tensor:
    vec = z_r.vector if isinstance(z_r, ResidualConditioning) else z_r
    if vec.shape[0] == 1 and content.shape[0] != 1:
        vec = vec.expand(content.shape[0], -1)
    return bundle.residual_generator(content, vec)


def compose(s_w: torch.Tensor, s_r: torch.Tensor) -> torch.Tensor:
    if s_w.shape != s_r.shape:
        raise ValueError(f"shape mismatch: {tuple(s_w.shape)} vs {tuple(s_r.shape)}")
    return torch.clamp(s_w + s_r, -1.0, 1.0)


def conditioning_for(bundle: NetworkBundle, mode: str, n: int,
                     exemplar: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> ResidualConditioning:
    if mode == EXEMPLAR:
        if exemplar is None:
            raise ValueError("exemplar mode needs an exemplar image")
        return exemplar_conditioning(bundle, exemplar)
    if mode == GENERAL:
        return general_conditioning(bundle, n, generator)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def translate(bundle: NetworkBundle, s: torch.Tensor, mode: str = GENERAL,
              exemplar: torch.Tensor | None = None, *,
              w: AnchorWeights | None = None, bank: AnchorStyleBank | None = None,
              generator: torch.Generator | None = None) -> torch.Tensor:
    """Interpolated translation plus a residual conditioned on noise or an exemplar.

    ``exemplar`` may be a single image (shared by the batch) or one per row of ``s``.
    """
    z_r = conditioning_for(bundle, mode, s.shape[0], exemplar, generator)
    content = bundle.encode_content(s)
    s_w = translate_interpolated(bundle, s, w, bank, content=content)
    return compose(s_w, residual(bundle, content, z_r))
