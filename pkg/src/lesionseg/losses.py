"""Segmentation losses on logits: BCE, Dice, IoU, the focal wrapper, and the
pixel/lesion compound loss.

Every loss takes a ``Tensor[H, W]`` of logits and a :class:`LabelMask` and
returns a differentiable scalar. Batched variants average over tiles.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ndgrad as nd
from .errors import ConfigError, ShapeError
from .lesionfield import LabelMask, MatchRule, binarize, label_components, match_lesions
from .ndgrad import Tensor

FOCAL_FLOOR = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    k: float = 1.0
    gamma: float = 2.0
    c: float = 1.0
    threshold: float = 0.5
    connectivity: int = 8
    match_rho: float = 0.0
    focal_arg_mode: str = "score"

    def __post_init__(self):
        for name in ("alpha", "beta", "threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.c <= 0:
            raise ConfigError(f"c must be positive, got {self.c}")
        if self.k <= 0:
            raise ConfigError(f"k must be positive, got {self.k}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.focal_arg_mode not in ("score", "raw"):
            raise ConfigError(f"focal_arg_mode must be 'score' or 'raw', got {self.focal_arg_mode!r}")
        MatchRule(self.match_rho)

    def to_dict(self) -> dict:
        return asdict(self)


def _truth_array(logits: Tensor, truth: LabelMask) -> np.ndarray:
    bits = truth.bits if isinstance(truth, LabelMask) else np.asarray(truth, dtype=bool)
    if bits.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} and truth {bits.shape} shapes differ")
    return bits.astype(logits.values.dtype)


def bce_with_logits(logits: Tensor, truth: LabelMask) -> Tensor:
    # y*softplus(-z) + (1-y)*softplus(z) == -[y ln s + (1-y) ln(1-s)]
    y = _truth_array(logits, truth)
    per_pixel = nd.softplus(logits) - logits * y
    return nd.reduce_mean(per_pixel)


def _soft_terms(logits: Tensor, truth: LabelMask):
    y = _truth_array(logits, truth)
    prob = nd.sigmoid(logits)
    inter = nd.reduce_sum(prob * y)
    soft_pred = nd.reduce_sum(prob)
    return inter, soft_pred, float(y.sum())


def dice_loss(logits: Tensor, truth: LabelMask, c: float = 1.0) -> Tensor:
    inter, soft_pred, n_true = _soft_terms(logits, truth)
    return 1.0 - (inter * 2.0 + c) / (soft_pred + (n_true + c))


def iou_loss(logits: Tensor, truth: LabelMask, c: float = 1.0) -> Tensor:
    inter, soft_pred, n_true = _soft_terms(logits, truth)
    return 1.0 - (inter + c) / (soft_pred - inter + (n_true + c))


def focal_wrap(x: Tensor, k: float = 1.0, gamma: float = 2.0) -> Tensor:
    """``-k * (1 - x)**gamma * log(x)`` with ``x`` floored at 1e-7 before the log."""
    x = nd.clamp_min(x, FOCAL_FLOOR)
    return nd.power(1.0 - x, gamma) * nd.log(x) * (-k)


def focal_iou_loss(logits: Tensor, truth: LabelMask, c: float = 1.0, k: float = 1.0, gamma: float = 2.0) -> Tensor:
    """The IoU-based focal baseline: the focal wrapper applied to the soft IoU score."""
    return focal_wrap(1.0 - iou_loss(logits, truth, c), k, gamma)


def pixel_loss(logits: Tensor, truth: LabelMask, cfg: LossConfig = LossConfig()) -> Tensor:
    inter, soft_pred, n_true = _soft_terms(logits, truth)
    pre = 1.0 - (inter + cfg.c) / (soft_pred + cfg.c)
    rec = 1.0 - (inter + cfg.c) * (1.0 / (n_true + cfg.c))
    return pre * cfg.beta + rec * (1.0 - cfg.beta)


def lesion_loss_soft(logits: Tensor, truth: LabelMask, cfg: LossConfig = LossConfig()) -> Tensor:
    """Lesion-count precision/recall loss with soft matched counts.

    Component structure comes from the truth and from the binarized prediction and
    is treated as constant; gradients flow through the probabilities only. Each
    true lesion contributes the largest probability inside it, and each predicted
    lesion contributes the largest ``truth * probability`` inside it.
    """
    y = _truth_array(logits, truth)
    prob = nd.sigmoid(logits)
    truth_mask = truth if isinstance(truth, LabelMask) else LabelMask(y > 0)
    true_set = label_components(truth_mask, cfg.connectivity)
    pred_set = label_components(binarize(prob.values, cfg.threshold), cfg.connectivity)
    n_true, n_pred = len(true_set), len(pred_set)

    if n_true:
        matched_true = nd.reduce_sum(nd.segment_max(prob, [comp.pixels for comp in true_set.components]))
    else:
        matched_true = nd.Tensor(0.0, dtype=prob.values.dtype)
    if n_pred:
        hits = prob * y
        matched_pred = nd.reduce_sum(nd.segment_max(hits, [comp.pixels for comp in pred_set.components]))
    else:
        matched_pred = nd.Tensor(0.0, dtype=prob.values.dtype)

    pre = 1.0 - (matched_pred + cfg.c) * (1.0 / (n_pred + cfg.c))
    rec = 1.0 - (matched_true + cfg.c) * (1.0 / (n_true + cfg.c))
    return pre * cfg.beta + rec * (1.0 - cfg.beta)


def lesion_loss_hard(pred: LabelMask, truth: LabelMask, cfg: LossConfig = LossConfig()) -> float:
    """The same lesion loss evaluated on hard matched counts."""
    res = match_lesions(
        label_components(truth, cfg.connectivity), label_components(pred, cfg.connectivity), MatchRule(cfg.match_rho)
    )
    pre = 1.0 - (res.n_matched_pred + cfg.c) / (res.n_pred + cfg.c)
    rec = 1.0 - (res.n_matched_true + cfg.c) / (res.n_true + cfg.c)
    return cfg.beta * pre + (1.0 - cfg.beta) * rec


def blended_loss(logits: Tensor, truth: LabelMask, cfg: LossConfig = LossConfig()) -> Tensor:
    """``alpha * lesion + (1 - alpha) * pixel``, the argument of the focal wrapper."""
    parts = []
    if cfg.alpha > 0:
        parts.append(lesion_loss_soft(logits, truth, cfg) * cfg.alpha)
    if cfg.alpha < 1:
        parts.append(pixel_loss(logits, truth, cfg) * (1.0 - cfg.alpha))
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def compound_loss(logits: Tensor, truth: LabelMask, cfg: LossConfig = LossConfig()) -> Tensor:
    """Focal-wrapped blend of lesion- and pixel-level losses.

    ``"score"`` mode wraps ``1 - L`` so a perfect prediction costs nothing;
    ``"raw"`` mode wraps ``L`` itself.
    """
    blend = blended_loss(logits, truth, cfg)
    if cfg.focal_arg_mode == "score":
        return focal_wrap(1.0 - blend, cfg.k, cfg.gamma)
    return focal_wrap(blend, cfg.k, cfg.gamma)


LOSSES = {
    "bce": lambda z, t, cfg: bce_with_logits(z, t),
    "dice": lambda z, t, cfg: dice_loss(z, t, cfg.c),
    "iou": lambda z, t, cfg: iou_loss(z, t, cfg.c),
    "focal": lambda z, t, cfg: focal_iou_loss(z, t, cfg.c, cfg.k, cfg.gamma),
    "pixel": pixel_loss,
    "lesion": lesion_loss_soft,
    "compound": compound_loss,
}


def batch_loss(name: str, logits: Tensor, truths: list[LabelMask], cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean of the per-tile loss over a ``[N, 1, H, W]`` batch of logits."""
    if name not in LOSSES:
        raise ConfigError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}")
    if logits.ndim != 4 or logits.shape[1] != 1 or logits.shape[0] != len(truths):
        raise ShapeError(f"batch logits {logits.shape} do not match {len(truths)} masks")
    fn = LOSSES[name]
    total = None
    for i, truth in enumerate(truths):
        term = fn(logits[i, 0], truth, cfg)
        total = term if total is None else total + term
    return total * (1.0 / len(truths))
