"""Binary masks, connected-component labeling and lesion matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError


@dataclass(frozen=True, eq=False)
class LabelMask:
    """A binary ``height x width`` mask stored row-major."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.array(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ShapeError(f"LabelMask needs a 2-D array, got shape {b.shape}")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def to_u8(self) -> np.ndarray:
        return np.where(self.bits, 255, 0).astype(np.uint8)

    @classmethod
    def from_u8(cls, image: np.ndarray) -> "LabelMask":
        image = np.asarray(image)
        bad = ~np.isin(image, (0, 255))
        if bad.any():
            raise ContractError(f"mask values must be 0 or 255, found {int(image[bad][0])}")
        return cls(image == 255)

    @classmethod
    def zeros(cls, height: int, width: int) -> "LabelMask":
        return cls(np.zeros((height, width), dtype=bool))

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class Component:
    pixels: np.ndarray  # sorted flat indices
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (inclusive)

    @property
    def area(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True)
class LesionSet:
    components: list[Component]
    connectivity: int
    shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.components)

    def label_image(self) -> np.ndarray:
        """Integer map with 0 for background and ``i + 1`` for component ``i``."""
        out = np.zeros(self.shape[0] * self.shape[1], dtype=np.int32)
        for i, comp in enumerate(self.components):
            out[comp.pixels] = i + 1
        return out.reshape(self.shape)


@dataclass(frozen=True)
class MatchRule:
    """Minimum overlap, as a fraction of the true lesion's area, for a match.

    ``rho = 0`` means any single shared pixel counts.
    """

    rho: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError(f"rho must be in [0, 1], got {self.rho}")

    def required(self, true_area: int) -> float:
        return max(1.0, self.rho * true_area)


@dataclass(frozen=True)
class MatchResult:
    n_true: int
    n_pred: int
    n_matched_true: int
    n_matched_pred: int
    pairs: list[tuple[int, int, int]] = field(default_factory=list)


class _UnionFind:
    def __init__(self):
        self.parent: list[int] = []

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def _row_runs(row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    padded = np.concatenate(([False], row, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return edges[0::2], edges[1::2]  # start inclusive, stop exclusive


def label_components(mask: LabelMask, connectivity: int = 8) -> LesionSet:
    """Connected components of ``mask``, ordered by their smallest pixel index.

    Union-find over horizontal runs in one raster scan: each run is unioned with
    the runs of the previous row it touches (diagonal contact counts under
    8-connectivity).
    """
    if connectivity not in (4, 8):
        raise ContractError(f"connectivity must be 4 or 8, got {connectivity}")
    bits = mask.bits
    h, w = bits.shape
    reach = 1 if connectivity == 8 else 0
    uf = _UnionFind()
    runs: list[tuple[int, int, int, int]] = []  # (row, start, stop, run id)
    prev: list[tuple[int, int, int]] = []
    for r in range(h):
        starts, stops = _row_runs(bits[r])
        cur = []
        k = 0
        for s, e in zip(starts.tolist(), stops.tolist()):
            rid = uf.make()
            # previous-row runs overlapping [s - reach, e + reach)
            while k < len(prev) and prev[k][1] <= s - reach:
                k += 1
            m = k
            while m < len(prev) and prev[m][0] < e + reach:
                uf.union(rid, prev[m][2])
                m += 1
            cur.append((s, e, rid))
            runs.append((r, s, e, rid))
        prev = cur

    groups: dict[int, list[tuple[int, int, int]]] = {}
    for r, s, e, rid in runs:
        groups.setdefault(uf.find(rid), []).append((r, s, e))
    components = []
    for root in sorted(groups):  # root is the smallest run id, which holds the smallest pixel
        members = groups[root]
        pixels = np.concatenate([np.arange(r * w + s, r * w + e) for r, s, e in members])
        pixels.sort()
        rows = [m[0] for m in members]
        bbox = (min(rows), min(m[1] for m in members), max(rows), max(m[2] for m in members) - 1)
        components.append(Component(pixels=pixels, bbox=bbox))
    return LesionSet(components=components, connectivity=connectivity, shape=(h, w))


def binarize(probabilities, threshold: float = 0.5) -> LabelMask:
    """Hard prediction: a pixel is set iff its probability is at least ``threshold``."""
    p = np.asarray(getattr(probabilities, "values", probabilities))
    if p.ndim != 2:
        raise ShapeError(f"binarize expects a 2-D probability map, got shape {p.shape}")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ContractError("probabilities must lie in [0, 1]")
    return LabelMask(p >= threshold)


def match_lesions(truth: LesionSet, pred: LesionSet, rule: MatchRule = MatchRule()) -> MatchResult:
    if truth.shape != pred.shape:
        raise ContractError(f"cannot match lesions across shapes {truth.shape} and {pred.shape}")
    size = truth.shape[0] * truth.shape[1]
    pred_owner = np.full(size, -1, dtype=np.int64)
    for j, comp in enumerate(pred.components):
        pred_owner[comp.pixels] = j

    pairs: list[tuple[int, int, int]] = []
    matched_true = 0
    matched_pred = np.zeros(len(pred.components), dtype=bool)
    for i, comp in enumerate(truth.components):
        owners = pred_owner[comp.pixels]
        hit = owners[owners >= 0]
        need = rule.required(comp.area)
        if len(hit) >= need:
            matched_true += 1
        if len(hit):
            ids, counts = np.unique(hit, return_counts=True)
            for j, cnt in zip(ids.tolist(), counts.tolist()):
                pairs.append((i, j, cnt))
                if cnt >= need:
                    matched_pred[j] = True
    return MatchResult(
        n_true=len(truth.components),
        n_pred=len(pred.components),
        n_matched_true=matched_true,
        n_matched_pred=int(matched_pred.sum()),
        pairs=pairs,
    )
