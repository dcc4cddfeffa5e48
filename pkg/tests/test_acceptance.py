"""End-to-end acceptance checks, one test per criterion.

Each test records a short verdict line that is printed in the terminal summary.
The slow training checks (criteria 6, 7 and 11) take several minutes on one CPU.
"""

import time
from dataclasses import replace
from statistics import median

import numpy as np
import pytest

from lesionseg import losses as L
from lesionseg import ndgrad as nd
from lesionseg import segnet
from lesionseg.datapipe import GenParams, Section, clean, generate_section, lesion_ratio, split, tile
from lesionseg.lesionfield import LabelMask, MatchRule, label_components, match_lesions
from lesionseg.metrics import lesion_metrics, pixel_metrics
from lesionseg.segnet import ModelParams, NetConfig
from lesionseg.trainer import (
    Checkpoint,
    TrainConfig,
    evaluate,
    log_to_csv,
    predict_masks,
    run_experiments,
    stagewise_train,
    tiles_to_batch,
    train_stage,
)

from helpers import brute_match, brute_pixel, flood_fill_components, frac, gradcheck, random_blob_mask

GRAD_TOL = 1e-5
INSTANCES = 20
RELU_MARGIN = 1e-4


def safe_logits(rng, shape, margin=1e-3):
    """Logits whose probabilities keep ``margin`` away from the 0.5 threshold."""
    z = rng.normal(0.0, 2.0, shape)
    p = 1.0 / (1.0 + np.exp(-z))
    z[np.abs(p - 0.5) < margin] = 0.1
    return z


def make_dataset(n_tiles, seed, prefix, neg_keep_prob=0.025):
    """Cleaned 64x64 tiles from default sections, one subject per section."""
    tiles, i = [], 0
    while len(tiles) < n_tiles:
        sec = generate_section(GenParams(seed=seed * 1000 + i), f"{prefix}{seed}_{i}", f"{prefix}{seed}_{i}")
        kept, _ = clean(tile(sec, 64, 32), neg_keep_prob, seed * 1000 + i)
        tiles += kept
        i += 1
    return tiles[:n_tiles]


# 1 ---------------------------------------------------------------------------


def test_gradient_fidelity(verdict, monkeypatch):
    rng = np.random.default_rng(2024)
    cfg = L.LossConfig(alpha=0.5, beta=0.3)
    losses = {
        "compound": lambda z, t: L.compound_loss(z, t, cfg),
        "focal": lambda z, t: L.focal_iou_loss(z, t, 1.0, 1.5, 2.0),
        "pixel": lambda z, t: L.pixel_loss(z, t, cfg),
        "lesion": lambda z, t: L.lesion_loss_soft(z, t, cfg),
        "bce": L.bce_with_logits,
        "dice": L.dice_loss,
        "iou": L.iou_loss,
    }
    start = time.perf_counter()
    worst = {}
    for name, fn in losses.items():
        errs = []
        for _ in range(INSTANCES):
            truth = LabelMask(random_blob_mask(rng, 8))
            errs.append(gradcheck(lambda z: fn(z, truth), [safe_logits(rng, (8, 8))]))
        worst[name] = max(errs)

    # Random biases keep dead channels off the ReLU kink; instances with any ReLU
    # input closer than RELU_MARGIN to zero are redrawn, as finite differences
    # straddling a kink are meaningless.
    net = NetConfig(depth=2, base_width=2, dilation_rates=(1, 2))
    with nd.precision("f64"):
        base = segnet.build(net, 5)
    names = base.names()
    relu_inputs = []
    real_relu = nd.relu

    def spy_relu(x):
        relu_inputs.append(float(np.abs(x.values).min()))
        return real_relu(x)

    monkeypatch.setattr(nd, "relu", spy_relu)
    errs, drawn = [], 0
    while len(errs) < INSTANCES:
        drawn += 1
        image = rng.random((1, 3, 8, 8)) - 0.5
        truth = LabelMask(random_blob_mask(rng, 8))
        arrays = [base[n].values.astype(np.float64) + rng.normal(0, 0.05, base[n].shape) for n in names]
        drop_seed = drawn

        def loss(*tensors):
            p = ModelParams(dict(zip(names, tensors)))
            z = segnet.forward(p, net, nd.Tensor(image), True, np.random.default_rng(drop_seed))
            return L.iou_loss(z[0, 0], truth)

        relu_inputs.clear()
        with nd.precision("f64"):
            loss(*[nd.Tensor(a) for a in arrays])
        if min(relu_inputs) < RELU_MARGIN:
            continue
        errs.append(gradcheck(loss, arrays, entries_per_input=4, rng=rng))
    worst["network"] = max(errs)
    elapsed = time.perf_counter() - start

    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(
        f"max rel err {max(worst.values()):.1e} <= {GRAD_TOL:g} ({detail}); "
        f"{INSTANCES} network instances of {drawn} drawn; {elapsed:.1f}s <= 60s"
    )
    assert max(worst.values()) <= GRAD_TOL
    assert elapsed <= 60


# 2 ---------------------------------------------------------------------------


def test_labeling_matches_flood_fill(verdict):
    rng = np.random.default_rng(7)
    masks = [rng.random((16, 16)) < rng.uniform(0.1, 0.7) for _ in range(1000)]
    start = time.perf_counter()
    mismatches = 0
    for bits in masks:
        for conn in (4, 8):
            got = {frozenset(c.pixels.tolist()) for c in label_components(LabelMask(bits), conn).components}
            want = set(flood_fill_components(bits, conn))
            mismatches += got != want
    elapsed = time.perf_counter() - start
    verdict(f"{mismatches} mismatches over 2000 labelings; {elapsed:.1f}s <= 10s")
    assert mismatches == 0
    assert elapsed <= 10


# 3 ---------------------------------------------------------------------------


def test_metrics_match_brute_force(verdict):
    rng = np.random.default_rng(11)
    bad = 0
    for _ in range(1000):
        truth, pred = random_blob_mask(rng, 16), random_blob_mask(rng, 16)
        tp, fp, fn = brute_pixel(pred, truth)
        empty = tp + fp + fn == 0
        want_pix = (frac(tp, tp + fp + fn, empty), frac(tp, tp + fn, empty), frac(tp, tp + fp, empty))

        tc, pc = flood_fill_components(truth, 8), flood_fill_components(pred, 8)
        nt, np_, mt, mp = brute_match(tc, pc)
        les_empty = nt == 0 and np_ == 0
        m = min(mt, mp)
        want_les = (frac(m, nt + np_ - m, les_empty), frac(mt, nt, les_empty), frac(mp, np_, les_empty))

        got_pix = pixel_metrics(LabelMask(pred), LabelMask(truth))
        got_les = lesion_metrics(LabelMask(pred), LabelMask(truth), 8, MatchRule())
        bad += tuple(got_pix) != want_pix or tuple(got_les) != want_les
    verdict(f"{bad} of 1000 pairs differ from the oracles")
    assert bad == 0


# 4 ---------------------------------------------------------------------------


def test_full_recall_gives_iou_equal_precision(verdict):
    rng = np.random.default_rng(13)
    checked = 0
    for _ in range(500):
        # truth lesions on even rows; prediction covers part of each and adds spurious blobs on odd rows
        truth = np.zeros((16, 16), dtype=bool)
        pred = np.zeros((16, 16), dtype=bool)
        n_true = rng.integers(1, 5)
        for i in range(n_true):
            row = 4 * i
            a = rng.integers(0, 12)
            b = rng.integers(a + 1, 17)
            truth[row, a:b] = True
            c = rng.integers(a, b)
            pred[row, c : rng.integers(c + 1, b + 1)] = True
        for j in range(rng.integers(0, 4)):
            row = 4 * j + 2
            a = rng.integers(0, 15)
            pred[row, a : a + rng.integers(1, 3)] = True

        res = match_lesions(label_components(LabelMask(truth)), label_components(LabelMask(pred)), MatchRule())
        assert res.n_matched_true == res.n_true  # full recall
        assert len({i for i, _, _ in res.pairs}) == len(res.pairs) == len({j for _, j, _ in res.pairs})
        iou, rec, pre = lesion_metrics(LabelMask(pred), LabelMask(truth))
        assert rec == 1.0
        assert iou == pre
        checked += 1
    verdict(f"lesion IoU == lesion precision exactly on {checked} full-recall one-to-one instances")


# 5 ---------------------------------------------------------------------------


def test_dice_iou_identity(verdict):
    rng = np.random.default_rng(17)
    worst = 0.0
    with nd.precision("f64"):
        for _ in range(200):
            truth = random_blob_mask(rng, 8)
            if not truth.any():
                truth[rng.integers(8), rng.integers(8)] = True
            z = nd.Tensor(rng.normal(0, 3, (8, 8)))
            dice = 1.0 - L.dice_loss(z, LabelMask(truth), c=0.0).item()
            iou = 1.0 - L.iou_loss(z, LabelMask(truth), c=0.0).item()
            worst = max(worst, abs(iou - dice / (2.0 - dice)))
    verdict(f"max |IoU - dice/(2-dice)| = {worst:.1e} <= 1e-9 over 200 instances")
    assert worst <= 1e-9


# 6 ---------------------------------------------------------------------------


def test_alpha_one_degeneracy(verdict):
    start = time.perf_counter()
    train, valid = split(make_dataset(200, 0, "a"), 0.9, 0)
    cfg = TrainConfig(seed=0, loss_config=L.LossConfig(alpha=1.0))
    params = segnet.build(cfg.net_config, cfg.seed)
    best, _ = train_stage(params, train, valid, "compound", cfg.stage1_lr, 8, cfg, "sweep")
    preds = predict_masks(best.params, cfg.net_config, valid, 0.5)
    positive = sum(p.count() for p in preds) / sum(p.bits.size for p in preds)
    prior = sum(t.mask.count() for t in valid) / sum(t.mask.bits.size for t in valid)
    pre = best.metrics.pixel_pre
    elapsed = time.perf_counter() - start
    verdict(
        f"predicted-positive fraction {positive:.3f} >= 0.9; pixel precision {pre:.3f} vs prior {prior:.3f} "
        f"(within 25% relative); {elapsed:.0f}s <= 300s"
    )
    assert positive >= 0.9
    assert abs(pre - prior) <= 0.25 * prior
    assert elapsed <= 300


# 7 ---------------------------------------------------------------------------


def test_stagewise_directional(verdict):
    per_seed = {}
    slowest = 0.0
    for seed in (0, 1, 2):
        train, valid = split(make_dataset(200, seed, "tv"), 0.9, seed)
        test = make_dataset(60, seed + 500, "te")
        start = time.perf_counter()
        results = run_experiments(TrainConfig(seed=seed), train, valid)
        # E1/E2 and E3/E4 share stage 1, so a full two-stage run costs stage 1 plus one stage 2
        slowest = max(slowest, (time.perf_counter() - start) / 2)
        per_seed[seed] = {
            name: evaluate(r.stage2.params, TrainConfig().net_config, test).lesion_iou
            for name, r in results.items()
        }
    med = {name: median(per_seed[s][name] for s in per_seed) for name in ("E1", "E2", "E3", "E4")}
    table = "; ".join(f"seed {s}: " + " ".join(f"{k} {v:.3f}" for k, v in d.items()) for s, d in per_seed.items())
    verdict(
        f"median test lesion IoU E1 {med['E1']:.3f} vs E2 {med['E2']:.3f}, E3 {med['E3']:.3f} vs E4 {med['E4']:.3f} "
        f"({table}); slowest full run ~{slowest / 60:.1f} min"
    )
    assert slowest <= 600
    assert med["E1"] >= med["E2"]
    assert med["E3"] >= med["E4"]


# 8 ---------------------------------------------------------------------------


def test_cleaning_raises_lesion_ratio(verdict):
    ratios = []
    for seed in range(10):
        tiles = []
        for i in range(6):
            tiles += tile(generate_section(GenParams(seed=seed * 100 + i)), 64, 32)
        kept, report = clean(tiles, 0.025, seed)
        ratios.append((report.ratio_before, report.ratio_after))
        assert report.ratio_after == lesion_ratio(kept)
    before = [b for b, _ in ratios]
    after = [a for _, a in ratios]
    verdict(
        f"before {min(before):.3f}-{max(before):.3f}, after {min(after):.3f}-{max(after):.3f}; "
        f"all increase and exceed 0.10 over 10 seeds"
    )
    assert all(a > b for b, a in ratios)
    assert min(after) > 0.10


# 9 ---------------------------------------------------------------------------


def test_tiling_covers_every_pixel(verdict):
    rng = np.random.default_rng(19)
    cases = 0
    for _ in range(200):
        window = int(rng.integers(2, 33)) * 2
        h, w = (int(v) for v in rng.integers(window, 4 * window, 2))
        image = np.zeros((h, w, 3), np.uint8)
        sec = Section(image, LabelMask.zeros(h, w), "s", "p")
        tiles = tile(sec, window)
        cover = np.zeros((h, w), dtype=np.int32)
        for t in tiles:
            x, y = t.origin
            cover[y : y + window, x : x + window] += 1
        origins = {t.origin for t in tiles}
        assert cover.min() >= 1
        assert (w - window, h - window) in origins
        assert len(origins) == len(tiles)
        assert all(x % (window // 2) == 0 or x == w - window for x, _ in origins)
        cases += 1
    verdict(f"every pixel covered and the last row/column tile present on {cases} random sections")


# 10 --------------------------------------------------------------------------


def test_determinism_and_persistence(verdict, tmp_path):
    net = NetConfig(base_width=4, depth=2, dilation_rates=(1, 2))
    cfg = TrainConfig(net_config=net, epochs_per_stage=2, batch_size=4, stage1_lr=1e-3, stage2_lr=1e-4, seed=5)
    tiles = make_dataset(24, 3, "d", neg_keep_prob=0.1)
    train, valid = split(tiles, 0.75, 5)

    blobs = []
    for run in ("a", "b"):
        res = stagewise_train(cfg, train, valid)
        out = tmp_path / run
        out.mkdir()
        res.stage1.save(out / "stage1.hslb", net)
        res.stage2.save(out / "stage2.hslb", net)
        (out / "log.csv").write_text(log_to_csv(res.log))
        blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert blobs[0] == blobs[1]

    batch = tiles_to_batch(valid)
    before = segnet.forward(res.stage2.params, net, batch).values
    loaded, loaded_net = Checkpoint.load(tmp_path / "b" / "stage2.hslb")
    after = segnet.forward(loaded.params, loaded_net, batch).values
    assert np.array_equal(before, after)
    verdict(f"{len(blobs[0])} output files byte-identical across two runs; reloaded forward bitwise equal")


# 11 --------------------------------------------------------------------------


@pytest.mark.parametrize("loss_name", ["iou", "bce"])
def test_overfit_smoke(verdict, loss_name):
    sec = generate_section(GenParams(seed=3))
    tiles = sorted(tile(sec, 64, 32), key=lambda t: -t.mask.count())[:4]
    cfg = TrainConfig(net_config=NetConfig(dropout_p=0.0), augment=False, seed=0)
    params = segnet.build(cfg.net_config, 0)
    _, log = train_stage(params, tiles, tiles, loss_name, 5e-3, 50, cfg)
    losses = [r.train_loss for r in log]
    below = next((r.epoch for r in log if r.train_loss < 0.05), None)
    verdict(f"{loss_name}: epoch-mean training loss {min(losses):.4f} < 0.05, first reached at epoch {below} of 50")
    assert below is not None
