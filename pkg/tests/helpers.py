"""Shared test utilities: finite-difference gradient checks and tiny fixtures."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from pfn import tensor as T
from pfn.tensor import Param

REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` with respect to ``arr`` (modified in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise relative error with an absolute floor on the denominator."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return np.where(diff <= ABS_FLOOR, 0.0, diff / scale)


def gradcheck(build: Callable[[Sequence[Param]], T.Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Largest relative error between backprop and central differences.

    ``build`` maps float64 parameters to a scalar tensor.
    """
    params = [Param(np.array(a, dtype=np.float64), f"x{i}") for i, a in enumerate(arrays)]
    loss = build(params)
    T.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()

        def f():
            return build([Param(q.data, "tmp") for q in params]).item()

        numeric = numeric_grad(f, p.data, eps)
        worst = max(worst, float(grad_errors(analytic, numeric).max(initial=0.0)))
    return worst


def away_from(x: np.ndarray, points: Sequence[float], margin: float = 0.05) -> np.ndarray:
    """Push entries of ``x`` at least ``margin`` away from each kink in ``points``."""
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def distinct_values(rng: np.random.Generator, shape) -> np.ndarray:
    """Entries spaced ``1/n`` apart, so max/argmax are unambiguous."""
    n = int(np.prod(shape))
    return (rng.permutation(n) / max(n, 1) + rng.uniform(-1, 1)).reshape(shape)


# -- one random instance per differentiable operation ---------------------------


def _weighted_sum(t: T.Tensor, rng_weights: np.ndarray) -> T.Tensor:
    # a random linear functional exercises every output element
    return T.sum_all(T.mul(t, T.Tensor(rng_weights)))


def _case_add(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3,))
    w = rng.normal(size=(2, 3))
    return (lambda p: _weighted_sum(T.add(p[0], p[1]), w)), [a, b]


def _case_mul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    return (lambda p: _weighted_sum(T.mul(p[0], p[1]), w)), [a, b]


def _case_neg_square(rng):
    a = rng.normal(size=(5,))
    w = rng.normal(size=(5,))
    return (lambda p: _weighted_sum(T.square(T.neg(p[0])), w)), [a]


def _case_relu(rng):
    a = away_from(rng.normal(size=(4, 4)), [0.0])
    w = rng.normal(size=(4, 4))
    return (lambda p: _weighted_sum(T.relu(p[0]), w)), [a]


def _case_mean_reshape(rng):
    a = rng.normal(size=(2, 6))
    return (lambda p: T.mean_all(T.square(T.reshape(p[0], (3, 4))))), [a]


def _case_smooth_l1(rng):
    a = away_from(rng.normal(scale=1.5, size=(10,)), [-1.0, 1.0])
    w = rng.normal(size=(10,))
    return (lambda p: _weighted_sum(T.smooth_l1(p[0]), w)), [a]


def _case_softmax(rng):
    a = rng.normal(size=(2, 3, 2, 2))
    w = rng.normal(size=(2, 3, 2, 2))
    return (lambda p: _weighted_sum(T.softmax_channels(p[0]), w)), [a]


def _case_log_softmax_pick(rng):
    a = rng.normal(size=(4, 3, 3))
    labels = rng.integers(0, 4, size=(3, 3))
    return (lambda p: T.sum_all(T.pick_channels(T.log_softmax_channels(p[0]), labels))), [a]


def _case_linear(rng):
    x, wt, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=(4,))
    w = rng.normal(size=(3, 4))
    return (lambda p: _weighted_sum(T.linear(p[0], p[1], p[2]), w)), [x, wt, b]


def _case_conv(rng):
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    k = int(rng.integers(1, 4))
    x = rng.normal(size=(2, 2, 5, 5))
    f = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=(3,))
    out_hw = (5 + 2 * pad - k) // stride + 1
    w = rng.normal(size=(2, 3, out_hw, out_hw))
    return (lambda p: _weighted_sum(T.conv2d(p[0], p[1], p[2], stride=stride, pad=pad), w)), [x, f, b]


def _case_max_pool(rng):
    window, stride = [(2, 2), (2, 1), (3, 2)][int(rng.integers(0, 3))]
    x = distinct_values(rng, (2, 2, 6, 6))
    out_hw = (6 - window) // stride + 1
    w = rng.normal(size=(2, 2, out_hw, out_hw))
    return (lambda p: _weighted_sum(T.max_pool2d(p[0], window, stride), w)), [x]


def _case_avg_pool(rng):
    x = rng.normal(size=(2, 4, 4))
    w = rng.normal(size=(2, 2, 2))
    return (lambda p: _weighted_sum(T.avg_pool2d(p[0], 2), w)), [x]


def _case_upsample(rng):
    x = rng.normal(size=(1, 2, 2, 3))
    w = rng.normal(size=(1, 2, 4, 6))
    return (lambda p: _weighted_sum(T.upsample_nearest(p[0], 2), w)), [x]


def _case_gap(rng):
    x = rng.normal(size=(2, 3, 3, 4))
    w = rng.normal(size=(2, 3))
    return (lambda p: _weighted_sum(T.global_avg_pool(p[0]), w)), [x]


def _case_concat(rng):
    a, b = rng.normal(size=(1, 2, 3)), rng.normal(size=(2, 2, 3))
    w = rng.normal(size=(3, 2, 3))
    return (lambda p: _weighted_sum(T.concat_channels([p[0], p[1]]), w)), [a, b]


def _case_mask_scale(rng):
    x = rng.normal(size=(3, 4))
    m = (rng.random((3, 4)) > 0.5).astype(np.float64)
    w = rng.normal(size=(3, 4))
    return (lambda p: _weighted_sum(T.mask_scale(p[0], m), w)), [x]


GRADCHECK_CASES = {
    "add": _case_add,
    "mul": _case_mul,
    "neg_square": _case_neg_square,
    "relu": _case_relu,
    "mean_reshape": _case_mean_reshape,
    "smooth_l1": _case_smooth_l1,
    "softmax_channels": _case_softmax,
    "log_softmax_pick": _case_log_softmax_pick,
    "linear": _case_linear,
    "conv2d": _case_conv,
    "max_pool2d": _case_max_pool,
    "avg_pool2d": _case_avg_pool,
    "upsample_nearest": _case_upsample,
    "global_avg_pool": _case_gap,
    "concat_channels": _case_concat,
    "mask_scale": _case_mask_scale,
}


def run_gradcheck_suite(trials: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst relative error per operation over ``trials`` random instances."""
    worst = {}
    for name, make in GRADCHECK_CASES.items():
        rng = np.random.default_rng([seed, len(name)])
        errs = []
        for _ in range(trials):
            build, arrays = make(rng)
            errs.append(gradcheck(build, arrays))
        worst[name] = max(errs)
    return worst


# -- planted two-block clustering fixture ------------------------------------------


def planted_two_blocks(seed: int, spatially_mixed: bool = True):
    """(W, truth labels) with identical ``t`` inside each block and normalised
    cross-block ``t`` distance >= 1; positions random or split by block."""
    from pfn import decoder as D

    rng = np.random.default_rng(seed)
    n1, n2 = (int(v) for v in rng.integers(3, 40, size=2))
    while True:
        ta, tb = rng.uniform(-1, 1, size=(2, 6))
        t = np.vstack([np.repeat(ta[None], n1, 0), np.repeat(tb[None], n2, 0)])
        tn, _ = D.normalize_features(t, np.zeros((len(t), 2)))
        if np.sum((tn[0] - tn[-1]) ** 2) >= 1.0:
            break
    if spatially_mixed:
        q = rng.uniform(0, 64, size=(n1 + n2, 2))
    else:
        q = np.vstack([rng.uniform(0, 20, size=(n1, 2)), rng.uniform(30, 64, size=(n2, 2))])
    tn, qn = D.normalize_features(t, q)
    truth = np.r_[np.zeros(n1, dtype=np.int64), np.ones(n2, dtype=np.int64)]
    return D.build_similarity(tn, qn, 0.5), truth


def same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    """Equal up to renaming of cluster ids."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return False
    fwd, bwd = {}, {}
    for x, y in zip(a.tolist(), b.tolist()):
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


# -- brute-force AP oracle -------------------------------------------------------------


def _iou_sets(a: np.ndarray, b: np.ndarray) -> float:
    sa = set(zip(*np.nonzero(a)))
    sb = set(zip(*np.nonzero(b)))
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0


def oracle_class_ap(preds, gts, thr) -> float:
    """AP of one class by enumerating every score cutoff.

    ``preds``: (score, mask, image); ``gts``: (mask, image). Scores must be
    distinct. At cutoff ``k`` the top-``k`` predictions are matched greedily;
    AP sums recall increments times the best precision at that recall or more.
    """
    if not gts:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
    used = [False] * len(gts)
    hits = []
    for i in order:
        s, m, img = preds[i]
        best, best_iou = None, -1.0
        for j, (g, gimg) in enumerate(gts):
            if gimg != img or used[j]:
                continue
            v = _iou_sets(m, g)
            if v > best_iou:
                best, best_iou = j, v
        ok = best is not None and best_iou >= thr
        if ok:
            used[best] = True
        hits.append(ok)
    curve = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        curve.append((tp / len(gts), tp / k))
    ap, prev_r = 0.0, 0.0
    for k, (r, _p) in enumerate(curve):
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in curve[k:])
            prev_r = r
    return ap


def oracle_mean_ap(preds_per_image, gts_per_image, thr) -> float:
    classes = sorted({int(c) for g in gts_per_image for c, _m in g})
    aps = []
    for c in classes:
        p = [(s, m, i) for i, insts in enumerate(preds_per_image) for cc, m, s in insts if cc == c]
        g = [(m, i) for i, insts in enumerate(gts_per_image) for cc, m in insts if cc == c]
        aps.append(oracle_class_ap(p, g, thr))
    return float(np.mean(aps)) if aps else 0.0


def random_ap_fixture(rng: np.random.Generator, max_preds: int = 12):
    """Random small masks over 1-3 images and 1-2 classes with distinct scores."""
    n_img = int(rng.integers(1, 4))
    shape = (4, 4)
    gts = []
    for _ in range(n_img):
        insts = []
        for _ in range(int(rng.integers(0, 3))):
            insts.append((int(rng.integers(1, 3)), rng.random(shape) > 0.5))
        gts.append(insts)
    if not any(gts):
        gts[0].append((1, rng.random(shape) > 0.3))
    n_pred = int(rng.integers(0, max_preds + 1))
    scores = rng.permutation(n_pred) / max(n_pred, 1) + 0.01
    preds = [[] for _ in range(n_img)]
    for k in range(n_pred):
        img = int(rng.integers(0, n_img))
        if gts[img] and rng.random() < 0.7:
            cat, g = gts[img][int(rng.integers(0, len(gts[img])))]
            m = g ^ (rng.random(shape) > 0.8)  # perturbed copy
        else:
            cat, m = int(rng.integers(1, 3)), rng.random(shape) > 0.5
        preds[img].append((cat, m, float(scores[k])))
    return preds, gts
