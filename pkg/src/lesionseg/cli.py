"""Command-line entry point: gen-data, prepare, train, evaluate, sweep, report.

Every subcommand reads a flat ``key=value`` run configuration (file plus
overrides) and writes its outputs under ``--out``. Exit codes: 0 success,
1 usage error, 2 I/O or data error, 3 training fault.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .datapipe import (
    GenParams,
    Section,
    Tile,
    clean,
    generate_section,
    lesion_ratio,
    load_tiles,
    read_image,
    read_manifest,
    read_mask,
    split,
    tile,
    write_image,
    write_manifest,
    write_mask,
)
from .errors import ConfigError, LesionSegError, NumericFault, TrainingFault
from .losses import LossConfig
from .metrics import FRACTION_FIELDS, MetricsReport, aggregate, evaluate_masks
from .lesionfield import MatchRule
from .segnet import NetConfig, build
from .trainer import Checkpoint, TrainConfig, log_to_csv, predict_masks, read_log_csv, stagewise_train, train_stage

logger = logging.getLogger("lesionseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ------------------------------------------------------------- run config


def _opt(default, doc):
    return field(default=default, metadata={"doc": doc})


@dataclass(frozen=True)
class RunConfig:
    # data generation
    sections: int = _opt(12, "number of synthetic sections written by gen-data")
    section_size: int = _opt(256, "section width and height in pixels")
    lesion_count_min: int = _opt(1, "fewest lesions per section")
    lesion_count_max: int = _opt(4, "most lesions per section")
    lesion_radius_min: float = _opt(10.0, "smallest mean lesion radius (px)")
    lesion_radius_max: float = _opt(22.0, "largest mean lesion radius (px)")
    irregularity: float = _opt(0.25, "relative amplitude of the blob outline harmonics")
    texture_amplitude: float = _opt(18.0, "stain texture amplitude (8-bit levels)")
    prevalence: float = _opt(0.05, "target lesion-pixel fraction per section")
    cluster_spread: float = _opt(0.18, "lesion scatter around the tissue centre, as a fraction of size")
    # preparation
    window: int = _opt(64, "tile size in pixels")
    stride: int = _opt(0, "tile stride in pixels (0 means window/2)")
    neg_keep_prob: float = _opt(0.025, "probability of keeping a lesion-free tile")
    split_ratio: float = _opt(0.9, "train share of the train/valid tiles")
    test_fraction: float = _opt(0.25, "share of subjects held out for testing")
    # network
    base_width: int = _opt(8, "channels at the first encoder level")
    depth: int = _opt(3, "number of encoder levels")
    dilation_rates: tuple = _opt((1, 2, 4), "bridge dilation rates, comma separated")
    dropout_p: float = _opt(0.5, "dropout before the head during training")
    skip_mode: str = _opt("concat", "decoder skip merge: concat or add")
    # losses
    alpha: float = _opt(0.5, "lesion-level weight in the compound loss")
    beta: float = _opt(0.5, "precision weight inside the pixel and lesion losses")
    k: float = _opt(1.0, "focal scale")
    gamma: float = _opt(2.0, "focal exponent")
    c: float = _opt(1.0, "smoothing constant")
    threshold: float = _opt(0.5, "binarization threshold")
    connectivity: int = _opt(8, "lesion connectivity, 4 or 8")
    match_rho: float = _opt(0.0, "minimum overlap share for a lesion match (0 means any overlap)")
    focal_arg_mode: str = _opt("score", "focal wrapper argument: score or raw")
    # training
    stage1_loss: str = _opt("iou", "stage-1 loss: iou or bce")
    stage2_loss: str = _opt("compound", "stage-2 loss: compound or same")
    stage1_lr: float = _opt(1e-4, "stage-1 learning rate")
    stage2_lr: float = _opt(1e-5, "stage-2 learning rate")
    epochs_per_stage: int = _opt(15, "epochs in each stage")
    batch_size: int = _opt(8, "tiles per batch")
    adam_beta1: float = _opt(0.9, "Adam first-moment decay")
    adam_beta2: float = _opt(0.999, "Adam second-moment decay")
    adam_eps: float = _opt(1e-8, "Adam epsilon")
    augment: bool = _opt(True, "online flip/rotate/scale/shift augmentation")
    aggregation: str = _opt("micro", "metric aggregation over tiles: micro or macro")
    # run
    seed: int = _opt(0, "master seed")
    out: str = _opt("run", "output directory")
    precision: str = _opt("f32", "floating point precision: f32 or f64")

    def __post_init__(self):
        self.gen_params(0)
        self.train_config()
        if self.window < 1 or self.stride < 0:
            raise ConfigError("window must be >= 1 and stride >= 0")
        if not 0.0 <= self.neg_keep_prob <= 1.0:
            raise ConfigError(f"neg_keep_prob must be in [0, 1], got {self.neg_keep_prob}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        if self.sections < 0:
            raise ConfigError("sections must be >= 0")
        if self.aggregation not in ("micro", "macro"):
            raise ConfigError(f"aggregation must be micro or macro, got {self.aggregation!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")

    def gen_params(self, seed: int) -> GenParams:
        try:
            return GenParams(
                size=self.section_size,
                lesion_count=(self.lesion_count_min, self.lesion_count_max),
                lesion_radius=(self.lesion_radius_min, self.lesion_radius_max),
                irregularity=self.irregularity,
                texture_amplitude=self.texture_amplitude,
                prevalence=self.prevalence,
                cluster_spread=self.cluster_spread,
                seed=seed,
            )
        except LesionSegError as exc:
            raise ConfigError(str(exc)) from exc

    def net_config(self) -> NetConfig:
        return NetConfig(
            base_width=self.base_width,
            depth=self.depth,
            dilation_rates=self.dilation_rates,
            dropout_p=self.dropout_p,
            skip_mode=self.skip_mode,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.alpha,
            beta=self.beta,
            k=self.k,
            gamma=self.gamma,
            c=self.c,
            threshold=self.threshold,
            connectivity=self.connectivity,
            match_rho=self.match_rho,
            focal_arg_mode=self.focal_arg_mode,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            stage1_loss=self.stage1_loss,
            stage2_loss=self.stage2_loss,
            stage1_lr=self.stage1_lr,
            stage2_lr=self.stage2_lr,
            epochs_per_stage=self.epochs_per_stage,
            batch_size=self.batch_size,
            loss_config=self.loss_config(),
            net_config=self.net_config(),
            seed=self.seed,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            augment=self.augment,
        )

    def to_text(self, skip=()) -> str:
        return "".join(f"{f.name}={_format_value(getattr(self, f.name))}\n" for f in fields(self) if f.name not in skip)


CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(key: str, text: str):
    default = CONFIG_FIELDS[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None
    return text


def parse_assignments(lines, source: str) -> dict:
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, text)
    return values


def load_config(path: str | None, overrides: dict) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        values.update(parse_assignments(text.splitlines(), str(path)))
    values.update(overrides)
    try:
        return RunConfig(**values)
    except LesionSegError as exc:
        raise ConfigError(str(exc)) from exc


def config_help() -> str:
    lines = ["configuration keys (key=value in --config files, or --set key=value):"]
    for f in fields(RunConfig):
        lines.append(f"  {f.name}={_format_value(f.default)}  {f.metadata['doc']}")
    return "\n".join(lines)


# ----------------------------------------------------------------- helpers


def _section_seed(seed: int, index: int) -> list[int]:
    return [seed, index]


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load_split(manifest: Path, name: str) -> list[Tile]:
    tiles = load_tiles(manifest)[name]
    if not tiles:
        raise ConfigError(f"manifest {manifest} has no {name!r} tiles")
    return tiles


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    fmt = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]) + "\n"


def _pct(x: float) -> str:
    return f"{100 * x:.1f}"


def evaluate_tiles(params, net: NetConfig, tiles: list[Tile], cfg: RunConfig) -> tuple[MetricsReport, float]:
    """Metrics over ``tiles`` plus the share of pixels predicted positive."""
    lcfg = cfg.loss_config()
    preds = predict_masks(params, net, tiles, lcfg.threshold)
    reports = [evaluate_masks(p, t.mask, lcfg.connectivity, MatchRule(lcfg.match_rho)) for p, t in zip(preds, tiles)]
    positive = sum(p.count() for p in preds) / sum(p.bits.size for p in preds)
    return aggregate(reports, cfg.aggregation), positive


# -------------------------------------------------------------- subcommands


def cmd_gen_data(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    rows = []
    for i in range(cfg.sections):
        sid = f"sec{i:03d}"
        params = replace(cfg.gen_params(0), seed=_section_seed(cfg.seed, i))
        sec = generate_section(params, sid, f"subj{i:03d}")
        rel_img, rel_mask = f"sections/{sid}.ppm", f"sections/{sid}.pgm"
        (out / "sections").mkdir(parents=True, exist_ok=True)
        write_image(out / rel_img, sec.image)
        write_mask(out / rel_mask, sec.mask)
        rows.append(
            {
                "tile_id": sid,
                "section_id": sid,
                "subject_id": sec.subject_id,
                "image_path": rel_img,
                "mask_path": rel_mask,
                "has_lesion": sec.mask.count() > 0,
                "split": "section",
            }
        )
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "sections.jsonl", rows)
    print(f"wrote {len(rows)} sections to {out / 'sections.jsonl'}")
    return EXIT_OK


def ratio_report(before: list[Tile], after: list[Tile]) -> str:
    rows = []
    for label, tiles in (("before cleaning", before), ("after cleaning", after)):
        lesion = sum(t.has_lesion for t in tiles)
        rows.append([label, str(len(tiles)), str(lesion), str(len(tiles) - lesion), _pct(lesion_ratio(tiles))])
    return _table(["dataset", "tiles", "lesion tiles", "background tiles", "lesion pixels %"], rows)


def cmd_prepare(cfg: RunConfig, manifest: Path) -> int:
    out = Path(cfg.out)
    base = manifest.parent
    sections = []
    for row in read_manifest(manifest):
        image = read_image(base / row["image_path"])
        mask = read_mask(base / row["mask_path"])
        sections.append(Section(image, mask, row["section_id"], row["subject_id"]))
    if not sections:
        raise ConfigError(f"manifest {manifest} lists no sections")

    subjects = sorted({s.subject_id for s in sections})
    order = np.random.default_rng([cfg.seed, 7]).permutation(len(subjects))
    n_test = int(round(cfg.test_fraction * len(subjects)))
    if cfg.test_fraction > 0 and len(subjects) > 1:
        n_test = min(max(n_test, 1), len(subjects) - 1)
    test_subjects = {subjects[i] for i in order[:n_test]}

    stride = cfg.stride or cfg.window // 2
    before, after = {"fit": [], "test": []}, {"fit": [], "test": []}
    for i, sec in enumerate(sections):
        group = "test" if sec.subject_id in test_subjects else "fit"
        tiles = tile(sec, cfg.window, stride)
        kept, _ = clean(tiles, cfg.neg_keep_prob, [cfg.seed, 11, i])
        before[group] += tiles
        after[group] += kept
    if not after["fit"]:
        raise ConfigError("no train/valid tiles survived cleaning")
    train, valid = split(after["fit"], cfg.split_ratio, [cfg.seed, 13])

    rows = []
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    for name, tiles in (("train", train), ("valid", valid), ("test", after["test"])):
        for t in tiles:
            rel_img, rel_mask = f"tiles/{t.tile_id}.ppm", f"tiles/{t.tile_id}.pgm"
            write_image(out / rel_img, t.image)
            write_mask(out / rel_mask, t.mask)
            rows.append(
                {
                    "tile_id": t.tile_id,
                    "section_id": t.section_id,
                    "subject_id": t.subject_id,
                    "image_path": rel_img,
                    "mask_path": rel_mask,
                    "has_lesion": t.has_lesion,
                    "split": name,
                }
            )
    write_manifest(out / "tiles.jsonl", rows)
    report = ratio_report(before["fit"] + before["test"], after["fit"] + after["test"])
    summary = f"train {len(train)}  valid {len(valid)}  test {len(after['test'])} tiles\n"
    _write_text(out / "ratio_report.txt", report + summary)
    print(report + summary, end="")
    return EXIT_OK


def cmd_train(cfg: RunConfig, manifest: Path) -> int:
    out = Path(cfg.out) / "train"
    train, valid = _load_split(manifest, "train"), _load_split(manifest, "valid")
    tcfg = cfg.train_config()
    result = stagewise_train(tcfg, train, valid)
    out.mkdir(parents=True, exist_ok=True)
    result.stage1.save(out / "stage1.hslb", tcfg.net_config)
    result.stage2.save(out / "stage2.hslb", tcfg.net_config)
    _write_text(out / "log.csv", log_to_csv(result.log))
    # the output location is left out so identical runs stay byte-identical
    _write_text(out / "config.txt", cfg.to_text(skip=("out",)))
    for ckpt in (result.stage1, result.stage2):
        print(f"{ckpt.stage}: best epoch {ckpt.epoch}, valid pixel IoU {_pct(ckpt.metrics.pixel_iou)}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, manifest: Path, checkpoint: Path, split_name: str) -> int:
    ckpt, net = Checkpoint.load(checkpoint)
    net = net or cfg.net_config()
    report, _ = evaluate_tiles(ckpt.params, net, _load_split(manifest, split_name), cfg)
    stem = Path(cfg.out) / f"eval_{split_name}"
    _write_text(stem.with_suffix(".csv"), report.to_csv())
    _write_text(stem.with_suffix(".json"), json.dumps(report.to_dict(), indent=2) + "\n")
    print(report.to_csv(), end="")
    return EXIT_OK


SWEEP_COLUMNS = ("value",) + FRACTION_FIELDS + ("positive_fraction",)


def cmd_sweep(cfg: RunConfig, manifest: Path, param: str, values: list[float]) -> int:
    """Train a fresh network with the compound loss for each weight and evaluate on validation."""
    train, valid = _load_split(manifest, "train"), _load_split(manifest, "valid")
    results = []
    for v in values:
        run = replace(cfg, **{param: v})
        tcfg = run.train_config()
        params = build(tcfg.net_config, tcfg.seed)
        best, _ = train_stage(params, train, valid, "compound", tcfg.stage1_lr, tcfg.epochs_per_stage, tcfg, "sweep")
        report, positive = evaluate_tiles(best.params, tcfg.net_config, valid, run)
        results.append((v, report, positive))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for v, report, positive in results:
        writer.writerow([repr(v)] + [repr(x) for x in report.fractions()] + [repr(positive)])
    header = [param, "Pixel IoU", "Pixel Rec", "Pixel Pre", "Lesion IoU", "Lesion Rec", "Lesion Pre", "Positive %"]
    rows = [[repr(v)] + [_pct(x) for x in r.fractions()] + [_pct(p)] for v, r, p in results]
    text = _table(header, rows)
    out = Path(cfg.out)
    _write_text(out / f"sweep_{param}.csv", buf.getvalue())
    _write_text(out / f"sweep_{param}.txt", text)
    print(text, end="")
    return EXIT_OK


# ------------------------------------------------------------------- report

SVG_NS = "http://www.w3.org/2000/svg"
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _panel(root, x0, y0, w, h, title, series, y_label):
    """Line chart of ``series`` ({name: [(x, y), ...]}) inside a w x h box at (x0, y0)."""
    g = ET.SubElement(root, "g", {"class": "panel", "transform": f"translate({x0},{y0})"})
    ET.SubElement(g, "text", {"x": str(w / 2), "y": "-8", "text-anchor": "middle", "font-size": "13"}).text = title
    ET.SubElement(g, "rect", {"x": "0", "y": "0", "width": str(w), "height": str(h), "fill": "none", "stroke": "#444"})
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    if not xs:
        return
    xmin, xmax = min(xs), max(xs)
    ymin, ymax = min(0.0, min(ys)), max(ys) if max(ys) > 0 else 1.0
    if xmax == xmin:
        xmax = xmin + 1
    if ymax == ymin:
        ymax = ymin + 1
    sx = lambda x: (x - xmin) / (xmax - xmin) * (w - 20) + 10
    sy = lambda y: h - 10 - (y - ymin) / (ymax - ymin) * (h - 20)
    for tick in np.linspace(ymin, ymax, 5):
        ET.SubElement(g, "text", {"x": "-4", "y": f"{sy(tick) + 4:.2f}", "text-anchor": "end", "font-size": "10"}).text = (
            f"{tick:.2f}"
        )
    ET.SubElement(g, "text", {"x": str(w / 2), "y": str(h + 16), "text-anchor": "middle", "font-size": "11"}).text = "epoch"
    ET.SubElement(
        g, "text", {"x": "-40", "y": str(h / 2), "font-size": "11", "transform": f"rotate(-90 -40 {h / 2})"}
    ).text = y_label
    for k, (name, pts) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        sg = ET.SubElement(g, "g", {"class": "series", "data-name": name})
        ET.SubElement(
            sg,
            "polyline",
            {
                "points": " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts),
                "fill": "none",
                "stroke": color,
                "stroke-width": "1.5",
            },
        )
        for x, y in pts:
            ET.SubElement(
                sg,
                "circle",
                {"class": "point", "cx": f"{sx(x):.2f}", "cy": f"{sy(y):.2f}", "r": "2.5", "fill": color,
                 "data-x": repr(x), "data-y": repr(y)},
            )
        ET.SubElement(g, "text", {"x": str(w - 6), "y": str(16 + 14 * k), "text-anchor": "end", "font-size": "10",
                                  "fill": color}).text = name


def render_svg(logs: dict[str, list[dict]]) -> str:
    """Training-loss and validation-IoU curves for one or more epoch logs."""
    ET.register_namespace("", SVG_NS)
    width, height = 920, 360
    root = ET.Element("svg", {"xmlns": SVG_NS, "width": str(width), "height": str(height),
                              "viewBox": f"0 0 {width} {height}"})
    ET.SubElement(root, "rect", {"width": str(width), "height": str(height), "fill": "white"})
    loss, iou = {}, {}
    for run, rows in logs.items():
        for stage in sorted({r["stage"] for r in rows}):
            sub = [r for r in rows if r["stage"] == stage]
            tag = f"{run} {stage}" if len(logs) > 1 else stage
            loss[f"{tag} loss"] = [(r["epoch"], r["train_loss"]) for r in sub]
            iou[f"{tag} pixel IoU"] = [(r["epoch"], r["pixel_iou"]) for r in sub]
            iou[f"{tag} lesion IoU"] = [(r["epoch"], r["lesion_iou"]) for r in sub]
    _panel(root, 70, 40, 360, 270, "Training loss", loss, "loss")
    _panel(root, 530, 40, 360, 270, "Validation IoU", iou, "IoU")
    return ET.tostring(root, encoding="unicode") + "\n"


def summary_table(logs: dict[str, list[dict]]) -> str:
    rows = []
    for run, log in logs.items():
        for stage in sorted({r["stage"] for r in log}):
            sub = [r for r in log if r["stage"] == stage]
            best = max(sub, key=lambda r: (r["pixel_iou"], -r["epoch"]))
            rows.append([run, stage, str(best["epoch"])] + [_pct(best[f]) for f in FRACTION_FIELDS])
    header = ["run", "stage", "best epoch", "Pixel IoU", "Pixel Rec", "Pixel Pre", "Lesion IoU", "Lesion Rec", "Lesion Pre"]
    return _table(header, rows)


def cmd_report(cfg: RunConfig, log_paths: list[Path]) -> int:
    logs = {}
    for path in log_paths:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read log {path}: {exc.strerror}") from exc
        try:
            logs[path.parent.name or path.stem] = read_log_csv(text)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"malformed epoch log {path}: {exc}") from exc
    out = Path(cfg.out)
    _write_text(out / "report.svg", render_svg(logs))
    table = summary_table(logs)
    _write_text(out / "report.txt", table)
    print(table, end="")
    return EXIT_OK


# --------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand from resetting flags given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="flat key=value configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--precision", choices=("f32", "f64"), help="floating point precision")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = _Parser(
        prog="lesionseg",
        description="Lesion segmentation pipeline on synthetic sections.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    kw = dict(parents=[common], epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)

    p = sub.add_parser("gen-data", help="write synthetic sections and a manifest", **kw)
    p.add_argument("--sections", type=int, help="number of sections")

    p = sub.add_parser("prepare", help="tile, clean and split sections", **kw)
    p.add_argument("--manifest", type=Path, help="section manifest (default OUT/sections.jsonl)")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--neg-keep-prob", type=float)
    p.add_argument("--split-ratio", type=float)

    p = sub.add_parser("train", help="two-stage training", **kw)
    p.add_argument("--manifest", type=Path, help="tile manifest (default OUT/tiles.jsonl)")

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on one split", **kw)
    p.add_argument("--manifest", type=Path, help="tile manifest (default OUT/tiles.jsonl)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))

    p = sub.add_parser("sweep", help="train with the compound loss over alpha or beta values", **kw)
    p.add_argument("--manifest", type=Path, help="tile manifest (default OUT/tiles.jsonl)")
    p.add_argument("--param", required=True, choices=("alpha", "beta"))
    p.add_argument("--values", required=True, help="comma separated weights, e.g. 0,0.5,1")

    p = sub.add_parser("report", help="SVG curves and summary table from epoch logs", **kw)
    p.add_argument("logs", nargs="+", type=Path, help="epoch log CSV files")
    return parser


_FLAG_KEYS = ("seed", "out", "precision", "sections", "window", "stride", "neg_keep_prob", "split_ratio")


def _overrides(args) -> dict:
    values = parse_assignments(getattr(args, "set", []), "--set")
    for key in _FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


def _dispatch(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    manifest = getattr(args, "manifest", None) or out / ("sections.jsonl" if args.command == "prepare" else "tiles.jsonl")
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "prepare":
        return cmd_prepare(cfg, manifest)
    if args.command == "train":
        return cmd_train(cfg, manifest)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, manifest, args.checkpoint, args.split)
    if args.command == "sweep":
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--values must be comma separated numbers, got {args.values!r}") from None
        return cmd_sweep(cfg, manifest, args.param, values)
    return cmd_report(cfg, args.logs)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(getattr(args, "config", None), _overrides(args))
    except ConfigError as exc:
        print(f"lesionseg: config error: {exc}", file=sys.stderr)
        return EXIT_DATA
    previous = "f64" if nd.get_dtype() is np.float64 else "f32"
    nd.set_precision(cfg.precision)
    try:
        return _dispatch(args, cfg)
    except UsageError as exc:
        print(f"lesionseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingFault, NumericFault) as exc:
        print(f"lesionseg: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (LesionSegError, OSError, KeyError, ValueError) as exc:
        print(f"lesionseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        nd.set_precision(previous)


if __name__ == "__main__":
    sys.exit(main())
