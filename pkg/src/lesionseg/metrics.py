"""Pixel- and lesion-level IoU, recall and precision."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ContractError
from .lesionfield import LabelMask, MatchRule, label_components, match_lesions

FRACTION_FIELDS = ("pixel_iou", "pixel_rec", "pixel_pre", "lesion_iou", "lesion_rec", "lesion_pre")
COUNT_FIELDS = ("tp", "fp", "fn", "n_true", "n_pred", "n_matched_true", "n_matched_pred")


def _ratio(num: int, den: int, both_empty: bool) -> float:
    # Empty denominators: 1.0 when nothing was expected and nothing predicted, else 0.0.
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


@dataclass(frozen=True)
class MetricsReport:
    pixel_iou: float
    pixel_rec: float
    pixel_pre: float
    lesion_iou: float
    lesion_rec: float
    lesion_pre: float
    tp: int
    fp: int
    fn: int
    n_true: int
    n_pred: int
    n_matched_true: int
    n_matched_pred: int

    @classmethod
    def from_counts(cls, tp, fp, fn, n_true, n_pred, n_matched_true, n_matched_pred) -> "MetricsReport":
        pix_empty = tp + fp + fn == 0
        les_empty = n_true == 0 and n_pred == 0
        m = min(n_matched_true, n_matched_pred)
        return cls(
            pixel_iou=_ratio(tp, tp + fp + fn, pix_empty),
            pixel_rec=_ratio(tp, tp + fn, pix_empty),
            pixel_pre=_ratio(tp, tp + fp, pix_empty),
            lesion_iou=_ratio(m, n_true + n_pred - m, les_empty),
            lesion_rec=_ratio(n_matched_true, n_true, les_empty),
            lesion_pre=_ratio(n_matched_pred, n_pred, les_empty),
            tp=int(tp),
            fp=int(fp),
            fn=int(fn),
            n_true=int(n_true),
            n_pred=int(n_pred),
            n_matched_true=int(n_matched_true),
            n_matched_pred=int(n_matched_pred),
        )

    def fractions(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in FRACTION_FIELDS)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @staticmethod
    def csv_header() -> list[str]:
        return [f.name for f in fields(MetricsReport)]

    def to_csv_row(self) -> list[str]:
        return [_fmt(getattr(self, name)) for name in self.csv_header()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.csv_header())
        writer.writerow(self.to_csv_row())
        return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _check_dims(pred: LabelMask, truth: LabelMask) -> None:
    if pred.shape != truth.shape:
        raise ContractError(f"prediction {pred.shape} and truth {truth.shape} dimensions differ")


def pixel_counts(pred: LabelMask, truth: LabelMask) -> tuple[int, int, int]:
    _check_dims(pred, truth)
    p, t = pred.bits, truth.bits
    return int((p & t).sum()), int((p & ~t).sum()), int((~p & t).sum())


def pixel_metrics(pred: LabelMask, truth: LabelMask) -> tuple[float, float, float]:
    r = MetricsReport.from_counts(*pixel_counts(pred, truth), 0, 0, 0, 0)
    return r.pixel_iou, r.pixel_rec, r.pixel_pre


def lesion_counts(pred: LabelMask, truth: LabelMask, connectivity: int = 8, rule: MatchRule = MatchRule()):
    _check_dims(pred, truth)
    res = match_lesions(label_components(truth, connectivity), label_components(pred, connectivity), rule)
    return res.n_true, res.n_pred, res.n_matched_true, res.n_matched_pred


def lesion_metrics(
    pred: LabelMask, truth: LabelMask, connectivity: int = 8, rule: MatchRule = MatchRule()
) -> tuple[float, float, float]:
    r = MetricsReport.from_counts(0, 0, 0, *lesion_counts(pred, truth, connectivity, rule))
    return r.lesion_iou, r.lesion_rec, r.lesion_pre


def evaluate_masks(
    pred: LabelMask, truth: LabelMask, connectivity: int = 8, rule: MatchRule = MatchRule()
) -> MetricsReport:
    return MetricsReport.from_counts(*pixel_counts(pred, truth), *lesion_counts(pred, truth, connectivity, rule))


def aggregate(reports: list[MetricsReport], mode: str = "micro") -> MetricsReport:
    """Combine per-image reports.

    ``micro`` sums the raw counts and recomputes every fraction from the sums;
    ``macro`` averages the per-image fractions (counts are still summed).
    """
    if not reports:
        raise ContractError("aggregate needs at least one report")
    sums = [sum(getattr(r, name) for r in reports) for name in COUNT_FIELDS]
    out = MetricsReport.from_counts(*sums)
    if mode == "micro":
        return out
    if mode != "macro":
        raise ContractError(f"unknown aggregation mode {mode!r}")
    means = {name: float(np.mean([getattr(r, name) for r in reports])) for name in FRACTION_FIELDS}
    return MetricsReport(**{**out.to_dict(), **means})
