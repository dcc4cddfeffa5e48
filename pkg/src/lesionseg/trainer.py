"""Adam, epoch loops with best-on-validation checkpointing, and two-stage training."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .datapipe import Tile, augment
from .errors import ConfigError, ContractError, NumericFault, TrainingFault
from .lesionfield import MatchRule, binarize
from .losses import LossConfig, batch_loss
from .metrics import FRACTION_FIELDS, MetricsReport, aggregate, evaluate_masks
from .segnet import ModelParams, NetConfig, build, forward, load_params, save_params

logger = logging.getLogger(__name__)

STAGE1_LOSSES = ("iou", "bce")


@dataclass(frozen=True)
class TrainConfig:
    stage1_loss: str = "iou"
    stage2_loss: str = "compound"  # or "same" to keep the stage-1 loss
    stage1_lr: float = 1e-4
    stage2_lr: float = 1e-5
    epochs_per_stage: int = 15
    batch_size: int = 8
    loss_config: LossConfig = field(default_factory=LossConfig)
    net_config: NetConfig = field(default_factory=NetConfig)
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        if self.stage1_loss not in STAGE1_LOSSES:
            raise ConfigError(f"stage1_loss must be one of {STAGE1_LOSSES}, got {self.stage1_loss!r}")
        if self.stage2_loss not in ("compound", "same"):
            raise ConfigError(f"stage2_loss must be 'compound' or 'same', got {self.stage2_loss!r}")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs_per_stage < 1 or self.batch_size < 1:
            raise ConfigError("epochs_per_stage and batch_size must be >= 1")

    @property
    def stage2_loss_name(self) -> str:
        return self.stage1_loss if self.stage2_loss == "same" else "compound"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net_config"] = self.net_config.to_dict()
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns fresh parameters and state."""
    state = AdamState(step=state.step + 1, m=dict(state.m), v=dict(state.v))
    t = state.step
    new = {}
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name, np.zeros_like(p.values))
        v = state.v.get(name, np.zeros_like(p.values))
        if m.shape != p.shape:
            raise ContractError(f"optimizer state for {name} has shape {m.shape}, parameter has {p.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new[name] = (p.values - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.values.dtype)
        state.m[name], state.v[name] = m, v
    return ModelParams.from_arrays(new), state


# ----------------------------------------------------------------- batching


def tiles_to_batch(tiles: list[Tile]) -> nd.Tensor:
    arr = np.stack([t.image for t in tiles]).astype(np.float64) / 255.0 - 0.5
    return nd.Tensor(arr.transpose(0, 3, 1, 2))


def predict_masks(params: ModelParams, net: NetConfig, tiles: list[Tile], threshold: float, batch_size: int = 16):
    masks = []
    for i in range(0, len(tiles), batch_size):
        logits = forward(params, net, tiles_to_batch(tiles[i : i + batch_size]), training=False)
        probs = nd.sigmoid(logits).values
        masks.extend(binarize(p[0], threshold) for p in probs)
    return masks


def evaluate(
    params: ModelParams,
    net: NetConfig,
    tiles: list[Tile],
    cfg: LossConfig = LossConfig(),
    mode: str = "micro",
) -> MetricsReport:
    """Evaluation-mode forward, binarize, per-tile metrics, aggregate."""
    if not tiles:
        raise ContractError("evaluate needs a non-empty dataset")
    preds = predict_masks(params, net, tiles, cfg.threshold)
    rule = MatchRule(cfg.match_rho)
    return aggregate([evaluate_masks(p, t.mask, cfg.connectivity, rule) for p, t in zip(preds, tiles)], mode)


# ---------------------------------------------------------------- one stage


@dataclass
class Checkpoint:
    params: ModelParams
    epoch: int
    metrics: MetricsReport
    stage: str
    config_hash: str

    def sidecar(self, net: NetConfig | None = None) -> dict:
        d = {"epoch": self.epoch, "stage": self.stage, "config_hash": self.config_hash, "metrics": self.metrics.to_dict()}
        if net is not None:
            d["net_config"] = net.to_dict()
        return d

    def save(self, path: str | Path, net: NetConfig | None = None) -> None:
        path = Path(path)
        save_params(self.params, path)
        path.with_suffix(".json").write_text(json.dumps(self.sidecar(net), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> tuple["Checkpoint", NetConfig | None]:
        path = Path(path)
        params = load_params(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        net = NetConfig(**meta["net_config"]) if "net_config" in meta else None
        ckpt = cls(params, meta["epoch"], MetricsReport(**meta["metrics"]), meta["stage"], meta["config_hash"])
        return ckpt, net


@dataclass(frozen=True)
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    metrics: MetricsReport


LOG_COLUMNS = ("stage", "epoch", "train_loss") + FRACTION_FIELDS


def log_to_csv(records: list[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for r in records:
        writer.writerow([r.stage, r.epoch, repr(r.train_loss)] + [repr(v) for v in r.metrics.fractions()])
    return buf.getvalue()


def read_log_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({k: (v if k == "stage" else int(v) if k == "epoch" else float(v)) for k, v in row.items()})
    return rows


def train_stage(
    params: ModelParams,
    train: list[Tile],
    valid: list[Tile],
    loss_name: str,
    lr: float,
    epochs: int,
    cfg: TrainConfig,
    stage: str = "stage1",
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Train for ``epochs`` and keep the checkpoint with the best validation pixel IoU.

    Ties go to the earlier epoch. Adam moments start fresh for every call.
    """
    if not train or not valid:
        raise ContractError("train_stage needs non-empty train and validation sets")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    net, lcfg = cfg.net_config, cfg.loss_config
    state = AdamState()
    best: Checkpoint | None = None
    log: list[EpochRecord] = []
    stage_seed = [cfg.seed, 1 if stage == "stage1" else 2]
    chash = cfg.config_hash()

    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng(stage_seed + [epoch])
        order = rng.permutation(len(train))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(t, stage_seed + [epoch, b, k]) for k, t in enumerate(batch)]
            drop_rng = np.random.default_rng(stage_seed + [epoch, b, 999_999])
            try:
                logits = forward(params, net, tiles_to_batch(batch), training=True, rng=drop_rng)
                loss = batch_loss(loss_name, logits, [t.mask for t in batch], lcfg)
                params.zero_grad()
                loss.backward()
            except NumericFault as exc:
                raise TrainingFault(f"{stage} epoch {epoch} batch {b}: {exc}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingFault(f"{stage} epoch {epoch} batch {b}: loss is {value}")
            grads = {name: t.grad for name, t in params if t.grad is not None}
            params, state = adam_step(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            losses.append(value)
        report = evaluate(params, net, valid, lcfg)
        record = EpochRecord(stage, epoch, float(np.mean(losses)), report)
        log.append(record)
        logger.info("%s epoch %d loss %.4f val pixel IoU %.4f", stage, epoch, record.train_loss, report.pixel_iou)
        if best is None or report.pixel_iou > best.metrics.pixel_iou:
            best = Checkpoint(params.copy(), epoch, report, stage, chash)
    return best, log


@dataclass
class StagewiseResult:
    stage1: Checkpoint
    stage2: Checkpoint
    log: list[EpochRecord]
    stage2_initial: MetricsReport


def stagewise_train(
    cfg: TrainConfig,
    train: list[Tile],
    valid: list[Tile],
    stage1: tuple[Checkpoint, list[EpochRecord]] | None = None,
) -> StagewiseResult:
    """Stage 1 from a fresh network, stage 2 from the best stage-1 checkpoint.

    ``stage1`` may carry a previously computed stage-1 result for the same
    stage-1 settings (the stage-1 run depends only on those settings, the seed
    and the data), letting experiment grids share it.
    """
    if stage1 is None:
        params = build(cfg.net_config, cfg.seed)
        stage1 = train_stage(params, train, valid, cfg.stage1_loss, cfg.stage1_lr, cfg.epochs_per_stage, cfg, "stage1")
    best1, log1 = stage1
    start = best1.params.copy()
    initial = evaluate(start, cfg.net_config, valid, cfg.loss_config)
    best2, log2 = train_stage(
        start, train, valid, cfg.stage2_loss_name, cfg.stage2_lr, cfg.epochs_per_stage, cfg, "stage2"
    )
    return StagewiseResult(best1, best2, list(log1) + log2, initial)


EXPERIMENTS = {
    "E1": ("iou", "compound"),
    "E2": ("iou", "same"),
    "E3": ("bce", "compound"),
    "E4": ("bce", "same"),
}


def run_experiments(
    base: TrainConfig, train: list[Tile], valid: list[Tile], names=tuple(EXPERIMENTS)
) -> dict[str, StagewiseResult]:
    """The four stage-1 x stage-2 combinations; experiments sharing a stage-1 loss share its run."""
    results: dict[str, StagewiseResult] = {}
    stage1_cache: dict[str, tuple[Checkpoint, list[EpochRecord]]] = {}
    for name in names:
        s1, s2 = EXPERIMENTS[name]
        cfg = replace(base, stage1_loss=s1, stage2_loss=s2)
        cached = stage1_cache.get(s1)
        res = stagewise_train(cfg, train, valid, cached)
        stage1_cache.setdefault(s1, (res.stage1, [r for r in res.log if r.stage == "stage1"]))
        results[name] = res
    return results
