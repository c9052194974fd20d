"""Anchor selection and weighted interpolation of anchor style codes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch

from .networks import NetworkBundle, UnknownDomainError


@dataclass
class AnchorWeights:
    """Simplex point over the anchors, parameterised by unconstrained logits."""

    logits: torch.Tensor

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    def __len__(self):
        return self.logits.shape[-1]


@dataclass
class AnchorStyleBank:
    """One style code (or batch of codes) per anchor, in anchor order."""

    anchors: tuple[str, ...]
    codes: Mapping[str, torch.Tensor]

    def __post_init__(self):
        missing = [a for a in self.anchors if a not in self.codes]
        if missing:
            raise ValueError(f"style bank is missing anchors {missing}")

    @classmethod
    def from_bundle(cls, bundle: NetworkBundle) -> "AnchorStyleBank":
        """Persisted mean style codes, shape (1, d_s) each."""
        return cls(bundle.anchors, {a: bundle.style_bank[i : i + 1]
                                    for i, a in enumerate(bundle.anchors)})

    @classmethod
    def from_images(cls, bundle: NetworkBundle, images: Mapping[str, torch.Tensor]):
        """Per-sample codes from the style encoder applied to anchor images."""
        return cls(bundle.anchors, {a: bundle.encode_style(images[a], a) for a in bundle.anchors})

    def stacked(self) -> torch.Tensor:
        codes = [self.codes[a] for a in self.anchors]
        return torch.stack(torch.broadcast_tensors(*codes), dim=0)


def anchor_weights(bundle: NetworkBundle) -> AnchorWeights:
    return AnchorWeights(bundle.anchor_logits)


def select_style(bank: AnchorStyleBank, c: str) -> torch.Tensor:
    """Hard selection: sum_i [c == i] z_i."""
    if c not in bank.anchors:
        raise UnknownDomainError(f"unknown anchor {c!r}; known: {list(bank.anchors)}")
    return bank.codes[c]


def interpolate_style(bank: AnchorStyleBank, w: AnchorWeights | torch.Tensor) -> torch.Tensor:
    """Convex combination sum_i w_i z_i."""
    weights = w.weights if isinstance(w, AnchorWeights) else w
    if weights.shape[-1] != len(bank.anchors):
        raise ValueError(f"{weights.shape[-1]} weights for {len(bank.anchors)} anchors")
    stacked = bank.stacked()
    return torch.einsum("a,a...->...", weights, stacked)


def translate_to_anchor(bundle: NetworkBundle, s: torch.Tensor, c: str,
                        bank: AnchorStyleBank | None = None) -> torch.Tensor:
    bank = bank or AnchorStyleBank.from_bundle(bundle)
    z = select_style(bank, c)
    return bundle.decode(bundle.encode_content(s), z.expand(s.shape[0], -1))


def translate_interpolated(bundle: NetworkBundle, s: torch.Tensor,
                           w: AnchorWeights | None = None,
                           bank: AnchorStyleBank | None = None,
                           content: torch.Tensor | None = None) -> torch.Tensor:
    bank = bank or AnchorStyleBank.from_bundle(bundle)
    w = w if w is not None else anchor_weights(bundle)
    z = interpolate_style(bank, w)
    if content is None:
        content = bundle.encode_content(s)
    return bundle.decode(content, z.expand(s.shape[0], -1))
