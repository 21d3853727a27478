"""Classifier heads: the concatenation softmax head and the modality-wise cosine head."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import FeatureBlocks


class Variant(enum.Enum):
    VANILLA = "vanilla"
    MMCOSINE = "mmcosine"

    @classmethod
    def parse(cls, value) -> Variant:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown loss variant {value!r}") from None


class ScaleBelowBoundWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ClassifierHead:
    w_a: Tensor
    w_v: Tensor
    b: Tensor | None = None

    def __post_init__(self):
        if self.w_a.values.ndim != 2 or self.w_a.shape != self.w_v.shape:
            raise ad.ShapeError(f"head blocks disagree: {self.w_a.shape} vs {self.w_v.shape}")
        if self.b is not None and self.b.shape != (self.n,):
            raise ad.ShapeError(f"bias shape {self.b.shape} does not match {self.n} classes")

    @property
    def n(self) -> int:
        return self.w_a.shape[1]

    @property
    def width(self) -> int:
        return self.w_a.shape[0]

    @classmethod
    def from_params(cls, params: dict[str, Tensor], prefix: str = "head") -> ClassifierHead:
        return cls(params[f"{prefix}.w_a"], params[f"{prefix}.w_v"], params.get(f"{prefix}.b"))


@dataclass(frozen=True)
class LossConfig:
    """``aux_weight`` only takes effect when the model carries auxiliary heads."""

    variant: Variant = Variant.VANILLA
    s: float | None = None
    aux_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.variant is Variant.MMCOSINE and self.s is not None and not self.s > 0:
            raise ValueError(f"scale s must be positive, got {self.s}")
        if self.aux_weight < 0:
            raise ValueError(f"aux_weight must be non-negative, got {self.aux_weight}")

    def resolved_scale(self, n_classes: int, p: float = 0.9) -> float:
        """``s`` if set, else the scale bound at ``p`` rounded up to one decimal."""
        if self.s is not None:
            return float(self.s)
        return default_scale(n_classes, p)

    def check_scale(self, n_classes: int, p: float = 0.9) -> bool:
        s_min = scale_lower_bound(n_classes, p)
        ok = self.resolved_scale(n_classes, p) >= s_min
        if not ok:
            warnings.warn(
                f"s={self.resolved_scale(n_classes, p):g} is below the lower bound "
                f"{s_min:.4f} for C={n_classes}, p={p}",
                ScaleBelowBoundWarning,
                stacklevel=2,
            )
        return ok


def _check_width(blocks: FeatureBlocks, head: ClassifierHead) -> None:
    if blocks.block_a.values.ndim != 2 or blocks.block_a.shape[1] != head.width:
        raise ad.ShapeError(
            f"feature width {blocks.block_a.shape} does not match head width {head.width}"
        )


def vanilla_logits(blocks: FeatureBlocks, head: ClassifierHead) -> Tensor:
    """One linear layer over the concatenated features ``[phi_a; phi_v]``."""
    _check_width(blocks, head)
    feats = ad.concat(blocks.block_a, blocks.block_v)
    weight = ad.transpose(ad.concat(ad.transpose(head.w_a), ad.transpose(head.w_v)))
    logits = ad.matmul(feats, weight)
    if head.b is not None:
        logits = ad.add(logits, head.b)
    return logits


def cosine_matrix(feats: Tensor, weight: Tensor, eps: float = ad.NORM_EPS) -> Tensor:
    """Cosine between every feature row and every weight column."""
    unit_f = ad.l2_normalize_rows(feats, eps)
    unit_w = ad.transpose(ad.l2_normalize_rows(ad.transpose(weight), eps))
    return ad.matmul(unit_f, unit_w)


def mmcosine_logits(blocks: FeatureBlocks, head: ClassifierHead, s: float) -> Tensor:
    """``s * (cos_a + cos_v)`` per class; the bias is never read."""
    _check_width(blocks, head)
    cos_sum = ad.add(cosine_matrix(blocks.block_a, head.w_a), cosine_matrix(blocks.block_v, head.w_v))
    return ad.scale(cos_sum, s)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        bad = labels[(labels < 0) | (labels >= n)][0]
        raise ValueError(f"label {bad} out of range for {n} classes")
    return ad.softmax_cross_entropy(logits, labels)


def scale_lower_bound(n_classes: int, p: float) -> float:
    """Smallest cosine scale that lets the true class reach posterior ``p``.

    ``(C - 1) / (2 (C + 1)) * ln((C - 1) p / (1 - p))``, natural log.
    """
    if n_classes < 2:
        raise ValueError(f"class count must be at least 2, got {n_classes}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"posterior p must lie in (0, 1), got {p}")
    c = n_classes
    return (c - 1) / (2 * (c + 1)) * math.log((c - 1) * p / (1 - p))


def default_scale(n_classes: int, p: float = 0.9) -> float:
    bound = scale_lower_bound(n_classes, p)
    return max(math.ceil(bound * 10 - 1e-9) / 10, 0.1)


def aux_unimodal_cosine_losses(
    blocks: FeatureBlocks, aux_w_a: Tensor, aux_w_v: Tensor, s: float, labels
) -> tuple[Tensor, Tensor]:
    """Single-modality cosine-softmax losses with a shared scale ``s``."""
    loss_a = cross_entropy_loss(ad.scale(cosine_matrix(blocks.block_a, aux_w_a), s), labels)
    loss_v = cross_entropy_loss(ad.scale(cosine_matrix(blocks.block_v, aux_w_v), s), labels)
    return loss_a, loss_v


def head_logits(blocks: FeatureBlocks, head: ClassifierHead, cfg: LossConfig) -> Tensor:
    if cfg.variant is Variant.MMCOSINE:
        return mmcosine_logits(blocks, head, cfg.resolved_scale(head.n))
    return vanilla_logits(blocks, head)


def training_objective(
    blocks: FeatureBlocks, params: dict[str, Tensor], labels, cfg: LossConfig
) -> tuple[Tensor, Tensor]:
    """Main loss plus ``aux_weight * (loss_a + loss_v)`` when auxiliary heads exist.

    Returns ``(objective, logits)``.
    """
    head = ClassifierHead.from_params(params)
    logits = head_logits(blocks, head, cfg)
    loss = cross_entropy_loss(logits, labels)
    if "aux.w_a" in params:
        s = cfg.resolved_scale(head.n)
        loss_a, loss_v = aux_unimodal_cosine_losses(
            blocks, params["aux.w_a"], params["aux.w_v"], s, labels
        )
        loss = ad.add(loss, ad.scale(ad.add(loss_a, loss_v), cfg.aux_weight))
    return loss, logits
