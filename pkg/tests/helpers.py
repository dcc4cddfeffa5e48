"""Independent oracles shared by the test modules."""

import sys

import numpy as np

from lesionseg import ndgrad as nd

FD_STEP = 1e-6
# Gradients smaller than this are compared absolutely (relative error is
# meaningless for values at the finite-difference noise floor).
REL_FLOOR = 1e-3


def numeric_grad(fn, arrays, which, entries=None, step=FD_STEP):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[which]``."""
    base = arrays[which]
    flat_idx = range(base.size) if entries is None else entries
    out = {}
    for k in flat_idx:
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[which].reshape(-1)[k] += step
        minus[which].reshape(-1)[k] -= step
        out[k] = (fn(*plus) - fn(*minus)) / (2 * step)
    return out


def max_rel_error(analytic: np.ndarray, numeric: dict) -> float:
    flat = analytic.reshape(-1)
    worst = 0.0
    for k, n in numeric.items():
        a = flat[k]
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), REL_FLOOR))
    return worst


def gradcheck(build_loss, arrays, entries_per_input=None, rng=None):
    """Compare reverse-mode gradients of ``build_loss(*tensors)`` with central differences.

    Returns the worst relative error over every checked entry of every input.
    """
    with nd.precision("f64"):
        tensors = [nd.Tensor(a, requires_grad=True) for a in arrays]
        loss = build_loss(*tensors)
        loss.backward()

        def scalar(*arrs):
            return build_loss(*[nd.Tensor(a) for a in arrs]).item()

        worst = 0.0
        for i, t in enumerate(tensors):
            entries = None
            if entries_per_input is not None and arrays[i].size > entries_per_input:
                entries = (rng or np.random.default_rng(0)).choice(arrays[i].size, entries_per_input, replace=False)
            num = numeric_grad(scalar, [np.array(a, dtype=np.float64) for a in arrays], i, entries)
            grad = t.grad if t.grad is not None else np.zeros_like(arrays[i])
            worst = max(worst, max_rel_error(grad, num))
    return worst


def flood_fill_components(bits: np.ndarray, connectivity: int) -> list[frozenset]:
    """Recursive flood fill; components ordered by their smallest flat index."""
    h, w = bits.shape
    seen = np.zeros_like(bits, dtype=bool)
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    sys.setrecursionlimit(max(sys.getrecursionlimit(), 4 * h * w + 100))

    def fill(r, c, acc):
        if r < 0 or r >= h or c < 0 or c >= w or seen[r, c] or not bits[r, c]:
            return
        seen[r, c] = True
        acc.add(r * w + c)
        for dy, dx in steps:
            fill(r + dy, c + dx, acc)

    comps = []
    for r in range(h):
        for c in range(w):
            if bits[r, c] and not seen[r, c]:
                acc = set()
                fill(r, c, acc)
                comps.append(frozenset(acc))
    return comps


def brute_match(true_comps, pred_comps, rho=0.0):
    """O(n_true * n_pred) set-intersection matching."""
    pred_union = set().union(*pred_comps) if pred_comps else set()
    true_union = set().union(*true_comps) if true_comps else set()
    mt = sum(1 for t in true_comps if len(t & pred_union) >= max(1, rho * len(t)))
    if rho == 0:
        mp = sum(1 for p in pred_comps if p & true_union)
    else:
        mp = sum(1 for p in pred_comps if any(len(p & t) >= max(1, rho * len(t)) for t in true_comps))
    return len(true_comps), len(pred_comps), mt, mp


def brute_pixel(pred: np.ndarray, truth: np.ndarray):
    tp = fp = fn = 0
    for p, t in zip(pred.reshape(-1).tolist(), truth.reshape(-1).tolist()):
        tp += p and t
        fp += p and not t
        fn += t and not p
    return tp, fp, fn


def frac(num, den, both_empty):
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def random_blob_mask(rng, size=16, density=None):
    """Random mask with a mix of blobs and isolated pixels."""
    density = rng.uniform(0.05, 0.5) if density is None else density
    bits = rng.random((size, size)) < density
    if rng.random() < 0.5:
        # smear to create larger components
        bits = bits | np.roll(bits, 1, axis=rng.integers(0, 2))
    return bits
