"""Synthetic sections, sliding-window tiling, background cleaning, splitting,
augmentation and PPM/PGM file I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, GenerationError, ParseError
from .lesionfield import LabelMask

# ------------------------------------------------------------------- types


@dataclass(frozen=True, eq=False)
class Section:
    image: np.ndarray  # H x W x 3 uint8
    mask: LabelMask
    section_id: str
    subject_id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise ContractError(f"section image must be HxWx3 uint8, got {self.image.shape} {self.image.dtype}")
        if self.image.shape[:2] != self.mask.shape:
            raise ContractError(f"image {self.image.shape[:2]} and mask {self.mask.shape} dimensions differ")


@dataclass(frozen=True, eq=False)
class Tile:
    image: np.ndarray
    mask: LabelMask
    origin: tuple[int, int]  # (x, y) of the top-left corner in the section
    section_id: str = ""
    subject_id: str = ""
    name: str = ""

    @property
    def has_lesion(self) -> bool:
        return bool(self.mask.bits.any())

    @property
    def tile_id(self) -> str:
        return self.name or f"{self.section_id}_x{self.origin[0]}_y{self.origin[1]}"


@dataclass(frozen=True)
class GenParams:
    size: int = 256
    lesion_count: tuple[int, int] = (1, 4)
    lesion_radius: tuple[float, float] = (10.0, 22.0)
    irregularity: float = 0.25
    texture_amplitude: float = 18.0
    prevalence: float = 0.05
    cluster_spread: float = 0.18
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ContractError(f"invalid lesion count range {self.lesion_count}")
        rlo, rhi = self.lesion_radius
        if rlo <= 0 or rhi < rlo:
            raise ContractError(f"invalid lesion radius range {self.lesion_radius}")
        if not 0.0 < self.prevalence < 1.0:
            raise ContractError(f"prevalence must be in (0, 1), got {self.prevalence}")
        if self.size < 8:
            raise ContractError("section size must be at least 8")


# ------------------------------------------------------------- generation

_BACKGROUND_RGB = np.array([150.0, 95.0, 160.0])
_LESION_RGB = np.array([232.0, 214.0, 226.0])
_MAX_PLACEMENT_TRIES = 200


def _blob(rng: np.random.Generator, cy: float, cx: float, radius: float, irregularity: float, size: int) -> np.ndarray:
    """Filled star-shaped polygon with smoothly varying radius."""
    n_harmonics = 4
    amps = rng.normal(0.0, irregularity / math.sqrt(n_harmonics), n_harmonics)
    phases = rng.uniform(0, 2 * math.pi, n_harmonics)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    theta = np.arctan2(dy, dx)
    r = np.full_like(theta, radius)
    for k in range(n_harmonics):
        r = r + radius * amps[k] * np.cos((k + 2) * theta + phases[k])
    r = np.maximum(r, 0.35 * radius)
    return dx * dx + dy * dy <= r * r


def _smooth_noise(rng: np.random.Generator, size: int, cell: int) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, (size // cell + 2, size // cell + 2))
    fine = np.kron(coarse, np.ones((cell, cell)))[:size, :size]
    # box blur to soften the blocks
    k = max(cell // 2, 1)
    pad = np.pad(fine, k, mode="edge")
    c = np.cumsum(np.cumsum(pad, 0), 1)
    c = np.pad(c, ((1, 0), (1, 0)))
    win = 2 * k + 1
    return (c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win])[:size, :size] / (win * win)


def generate_section(params: GenParams, section_id: str = "s0", subject_id: str = "subj0") -> Section:
    """Render a synthetic section whose lesions are pale irregular blobs on a textured stain.

    Blobs are added around a random tissue centre until the lesion-pixel share
    reaches ``params.prevalence`` or the count range is exhausted.
    """
    rng = np.random.default_rng(params.seed)
    size = params.size
    lo, hi = params.lesion_count
    budget = params.prevalence * size * size
    mask = np.zeros((size, size), dtype=bool)
    centre = rng.uniform(0.3 * size, 0.7 * size, 2)
    spread = params.cluster_spread * size
    rlo, rhi = params.lesion_radius

    placed = 0
    while placed < hi and (placed < lo or mask.sum() < budget):
        for _ in range(_MAX_PLACEMENT_TRIES):
            radius = rng.uniform(rlo, rhi)
            cy, cx = centre + rng.normal(0.0, spread, 2)
            if not (radius <= cy <= size - radius and radius <= cx <= size - radius):
                continue
            blob = _blob(rng, cy, cx, radius, params.irregularity, size)
            grown = blob.copy()
            grown[1:] |= blob[:-1]
            grown[:-1] |= blob[1:]
            grown[:, 1:] |= grown[:, :-1]
            grown[:, :-1] |= grown[:, 1:]
            if not (grown & mask).any():
                mask |= blob
                placed += 1
                break
        else:
            if placed < lo or mask.sum() < 0.5 * budget:
                raise GenerationError(
                    f"could not place lesion {placed + 1} after {_MAX_PLACEMENT_TRIES} tries (seed {params.seed})"
                )
            break

    amp = params.texture_amplitude
    texture = _smooth_noise(rng, size, 8)[..., None] * amp + rng.normal(0.0, amp * 0.35, (size, size, 3))
    rgb = np.where(mask[..., None], _LESION_RGB, _BACKGROUND_RGB) + texture
    image = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return Section(image=image, mask=LabelMask(mask), section_id=section_id, subject_id=subject_id)


# ------------------------------------------------------------------ tiling


def window_origins(length: int, window: int, stride: int) -> list[int]:
    """Origins at multiples of ``stride``; the last window is clamped to end on the edge."""
    if window > length:
        raise ContractError(f"window {window} exceeds section extent {length}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    origins = list(range(0, length - window + 1, stride))
    if origins[-1] != length - window:
        origins.append(length - window)
    return origins


def tile(section: Section, window: int = 64, stride: int | None = None) -> list[Tile]:
    stride = window // 2 if stride is None else stride
    h, w = section.mask.shape
    tiles = []
    for y in window_origins(h, window, stride):
        for x in window_origins(w, window, stride):
            tiles.append(
                Tile(
                    image=section.image[y : y + window, x : x + window].copy(),
                    mask=LabelMask(section.mask.bits[y : y + window, x : x + window]),
                    origin=(x, y),
                    section_id=section.section_id,
                    subject_id=section.subject_id,
                )
            )
    return tiles


def lesion_ratio(tiles: list[Tile]) -> float:
    total = sum(t.mask.bits.size for t in tiles)
    return sum(t.mask.count() for t in tiles) / total if total else 0.0


@dataclass(frozen=True)
class CleanReport:
    tiles_before: int
    tiles_after: int
    lesion_tiles: int
    ratio_before: float
    ratio_after: float


def clean(tiles: list[Tile], neg_keep_prob: float, seed: int) -> tuple[list[Tile], CleanReport]:
    """Keep every lesion tile and each background tile with probability ``neg_keep_prob``."""
    if not 0.0 <= neg_keep_prob <= 1.0:
        raise ContractError(f"neg_keep_prob must be in [0, 1], got {neg_keep_prob}")
    draws = np.random.default_rng(seed).random(len(tiles))
    kept = [t for t, u in zip(tiles, draws) if t.has_lesion or u < neg_keep_prob]
    report = CleanReport(
        tiles_before=len(tiles),
        tiles_after=len(kept),
        lesion_tiles=sum(t.has_lesion for t in tiles),
        ratio_before=lesion_ratio(tiles),
        ratio_after=lesion_ratio(kept),
    )
    return kept, report


def split(tiles: list, ratio: float = 0.9, seed: int = 0) -> tuple[list, list]:
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"split ratio must be in (0, 1), got {ratio}")
    if not tiles:
        raise ContractError("cannot split an empty tile list")
    order = np.random.default_rng(seed).permutation(len(tiles))
    n_train = int(round(ratio * len(tiles)))
    return [tiles[i] for i in order[:n_train]], [tiles[i] for i in order[n_train:]]


# ------------------------------------------------------------ augmentation

AUG_PROB = 0.5
MAX_ROTATION_DEG = 15.0
SCALE_RANGE = (0.9, 1.1)
MAX_SHIFT_FRAC = 0.1


@dataclass(frozen=True)
class AugDraw:
    flip: bool
    rotate: bool
    scale: bool
    translate: bool
    angle: float
    factor: float
    shift: tuple[float, float]

    @property
    def warps(self) -> bool:
        return self.rotate or self.scale or self.translate


def draw_augmentation(seed, window: int) -> AugDraw:
    rng = np.random.default_rng(seed)
    flip, rotate, scale, translate = (rng.random(4) < AUG_PROB).tolist()
    angle = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)
    factor = rng.uniform(*SCALE_RANGE)
    shift = tuple(rng.uniform(-MAX_SHIFT_FRAC, MAX_SHIFT_FRAC, 2) * window)
    return AugDraw(flip, rotate, scale, translate, float(angle), float(factor), (float(shift[0]), float(shift[1])))


def _warp(image: np.ndarray, mask: np.ndarray, d: AugDraw) -> tuple[np.ndarray, np.ndarray]:
    h, w = mask.shape
    theta = math.radians(d.angle) if d.rotate else 0.0
    s = d.factor if d.scale else 1.0
    tx, ty = d.shift if d.translate else (0.0, 0.0)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source pixel
    u, v = xx - cx - tx, yy - cy - ty
    cos, sin = math.cos(theta), math.sin(theta)
    sx = (cos * u + sin * v) / s + cx
    sy = (-sin * u + cos * v) / s + cy

    ni, nj = np.rint(sy).astype(int), np.rint(sx).astype(int)
    inside = (ni >= 0) & (ni < h) & (nj >= 0) & (nj < w)
    new_mask = np.zeros_like(mask)
    new_mask[inside] = mask[ni[inside], nj[inside]]

    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = (sy - y0)[..., None], (sx - x0)[..., None]
    src = image.astype(np.float64)
    out = np.zeros_like(src)
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + dy, x0 + dx
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        sample = np.zeros_like(src)
        sample[ok] = src[yi[ok], xi[ok]]
        out += wgt * sample
    return np.clip(np.rint(out), 0, 255).astype(np.uint8), new_mask


def augment(t: Tile, seed) -> Tile:
    """Random flip / rotation / scaling / translation, each applied with probability 0.5.

    The image is resampled bilinearly and the mask by nearest neighbour, both with
    zero fill outside the source window.
    """
    d = draw_augmentation(seed, t.mask.width)
    image, mask = t.image, t.mask.bits
    if d.flip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if d.warps:
        image, mask = _warp(image, mask, d)
    return replace(t, image=np.ascontiguousarray(image), mask=LabelMask(mask))


# ---------------------------------------------------------------------- I/O


def _read_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse ``magic width height maxval`` with comments; returns those and the payload offset."""
    if data[:2] != magic:
        raise ParseError(f"expected {magic.decode()} header", 0)
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("malformed header field", start)
        values.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ParseError("header must end with a single whitespace byte", pos)
    width, height, maxval = values
    if maxval != 255:
        raise ParseError(f"only 8-bit files are supported (maxval {maxval})", start)
    if width < 1 or height < 1:
        raise ParseError(f"invalid dimensions {width}x{height}", start)
    return width, height, maxval, pos + 1


def write_image(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ContractError("write_image expects an HxWx3 uint8 array")
    h, w = image.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, _, off = _read_header(data, b"P6")
    need = w * h * 3
    if len(data) - off < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(data) - off}", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3).copy()


def write_mask(path: str | Path, mask: LabelMask) -> None:
    h, w = mask.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + mask.to_u8().tobytes())


def read_mask(path: str | Path) -> LabelMask:
    data = Path(path).read_bytes()
    w, h, _, off = _read_header(data, b"P5")
    need = w * h
    if len(data) - off < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(data) - off}", len(data))
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=off)
    bad = np.flatnonzero((raw != 0) & (raw != 255))
    if len(bad):
        raise ParseError(f"illegal mask value {int(raw[bad[0]])}", off + int(bad[0]))
    return LabelMask(raw.reshape(h, w) == 255)


MANIFEST_FIELDS = ("tile_id", "section_id", "subject_id", "image_path", "mask_path", "has_lesion", "split")


def write_manifest(path: str | Path, rows: list[dict]) -> None:
    lines = []
    for row in rows:
        missing = set(MANIFEST_FIELDS) - set(row)
        if missing:
            raise ContractError(f"manifest row missing fields {sorted(missing)}")
        lines.append(json.dumps({k: row[k] for k in MANIFEST_FIELDS}))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path: str | Path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"manifest line {lineno}: {exc.msg}") from exc
        missing = set(MANIFEST_FIELDS) - set(row)
        if missing:
            raise ParseError(f"manifest line {lineno} missing fields {sorted(missing)}")
        rows.append(row)
    return rows


@dataclass
class TileDataset:
    """Tiles grouped by split, as loaded from a prepared manifest."""

    splits: dict[str, list[Tile]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> list[Tile]:
        return self.splits.get(name, [])


def _origin_from_id(tile_id: str) -> tuple[int, int]:
    parts = tile_id.rsplit("_", 2)
    try:
        return int(parts[-2].lstrip("x")), int(parts[-1].lstrip("y"))
    except (IndexError, ValueError):
        return (0, 0)


def load_tiles(manifest_path: str | Path) -> TileDataset:
    base = Path(manifest_path).parent
    ds = TileDataset()
    for row in read_manifest(manifest_path):
        image = read_image(base / row["image_path"])
        mask = read_mask(base / row["mask_path"])
        ds.splits.setdefault(row["split"], []).append(
            Tile(
                image=image,
                mask=mask,
                origin=_origin_from_id(row["tile_id"]),
                section_id=row["section_id"],
                subject_id=row["subject_id"],
                name=row["tile_id"],
            )
        )
    return ds
