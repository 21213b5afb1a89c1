"""Invariant checks across every module, runnable without a dataset.

Each check raises AssertionError with a short reason or returns a one-line
detail. ``run()`` yields ``(name, passed, detail)`` in registration order.
"""

import math
import tempfile
from fractions import Fraction

import numpy as np

from . import data, ops
from .config import ModelConfig
from .encoder import Encoder, channel_swap, level_sizes
from .metrics import ConfusionCounts, accumulate, scores
from .model import CEBSNet
from .nn import Conv
from .objective import bce, total_loss
from .refine import SCA, Suppression, region_scores, slice_attention, suppression_matrix
from .tensor import Tensor, no_grad
from .trainer import Adam

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def _rng(tag):
    return np.random.default_rng([len(tag), sum(map(ord, tag))])


def small_config(**kw):
    return ModelConfig(stage_widths=(4, 4, 8, 8, 8), fpn_width=8, input_size=64, **kw)


# ---------------------------------------------------------------- tensorops

@check
def softmax_normalized():
    rng = _rng("softmax")
    worst = 0.0
    for _ in range(50):
        x = rng.standard_normal((2, 3, 4, 5)) * rng.uniform(0.1, 50)
        axis = int(rng.integers(0, 4))
        p = ops.softmax(Tensor(x), axis).data
        assert (p >= 0).all(), "negative softmax output"
        worst = max(worst, float(np.abs(p.sum(axis=axis) - 1).max()))
    assert worst <= 1e-6, f"softmax sums off by {worst:.2e}"
    return f"max |sum - 1| = {worst:.1e}"


@check
def concat_split_identity():
    rng = _rng("concat")
    for _ in range(20):
        sizes = [int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 4)))]
        x = rng.standard_normal((2, sum(sizes), 3, 3))
        back = ops.concat(ops.split(Tensor(x), sizes, axis=1), axis=1).data
        assert np.array_equal(back, x), "concat(split(x)) != x"
    return "20 random splits"


@check
def maxpool_gradient_routing():
    rng = _rng("maxpool")
    for _ in range(20):
        x = Tensor(rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8).astype(np.float64), requires_grad=True)
        y = ops.maxpool2d(x, 2, 2)
        g = rng.standard_normal(y.shape)
        y.backward(g)
        assert np.isclose(np.abs(x.grad).sum(), np.abs(g).sum()), "maxpool gradient mass not preserved"
        assert np.count_nonzero(x.grad) == g.size, "maxpool routes to more than one element per window"
    return "gradient mass in == out on distinct maxima"


# ------------------------------------------------------------------ encoder

@check
def channel_swap_involution_and_multiset():
    rng = _rng("swap")
    for c in (1, 3, 8, 64):
        for r in (Fraction(0), Fraction(1, 4), Fraction(1, 2), Fraction(3, 4), Fraction(1)):
            for layout in ("leading", "interleaved"):
                fx, fy = rng.standard_normal((2, c, 3, 3)), rng.standard_normal((2, c, 3, 3))
                a, b = channel_swap(Tensor(fx), Tensor(fy), r, layout)
                aa, bb = channel_swap(a, b, r, layout)
                assert np.array_equal(aa.data, fx) and np.array_equal(bb.data, fy), f"not an involution at C={c} r={r}"
                for j in range(c):
                    got = {a.data[:, j].tobytes(), b.data[:, j].tobytes()}
                    assert got == {fx[:, j].tobytes(), fy[:, j].tobytes()}, f"channel {j} not preserved"
    return "C in {1,3,8,64}, five ratios, both layouts"


@check
def siamese_symmetry_and_level_sizes():
    cfg = small_config()
    enc = Encoder(cfg, np.random.default_rng(0), np.float64)
    x = _rng("siamese").random((2, 3, 64, 64))
    with no_grad():
        pyr = enc(Tensor(x), Tensor(x.copy()))
    expect = level_sizes(64)
    for level, (fx, fy) in pyr.items():
        assert np.array_equal(fx.data, fy.data), f"branches differ at level {level}"
        assert fx.shape[2:] == fy.shape[2:] == (expect[level],) * 2, f"level {level} has size {fx.shape[2:]}"
    return "identical inputs give identical branches; sizes " + ",".join(str(expect[i]) for i in range(1, 6))


# ------------------------------------------------------------------- refine

@check
def region_score_normalization():
    rng = _rng("scores")
    worst_w = worst_e = 0.0
    for _ in range(30):
        d, s = int(rng.integers(1, 6)), int(rng.integers(2, 20))
        k = int(rng.integers(1, s + 1))
        cw = Conv(d, 1, 1, rng, norm=False, act=False, bias=False, dtype=np.float64)
        ch = Conv(d, 1, 1, rng, norm=False, act=False, bias=False, dtype=np.float64)
        sc = region_scores(Tensor(rng.standard_normal((2, d, s, s)) * 3), k, cw, ch)
        for t in (sc.e_w, sc.e_h):
            worst_w = max(worst_w, float(np.abs(t.data.sum(axis=1) - 1).max()))
        worst_e = max(worst_e, float(np.abs(sc.e.data.sum(axis=(1, 2)) - k).max()))
        assert (sc.e.data > 0).all(), "non-positive region score"
    assert worst_w <= 1e-6, f"strip scores sum off by {worst_w:.2e}"
    assert worst_e <= 1e-5, f"grid scores sum off by {worst_e:.2e}"
    return f"strip sums within {worst_w:.1e}, grid sums within {worst_e:.1e}"


@check
def suppression_matrix_values():
    rng = _rng("supp")
    for _ in range(30):
        k, beta = int(rng.integers(1, 6)), float(rng.uniform(0, 1))
        e = rng.integers(0, 3, size=(2, k, k)).astype(np.float64)  # frequent ties
        s = suppression_matrix(e, beta)
        assert np.isin(s, (1.0, 1.0 - beta)).all(), "entry outside {1, 1 - beta}"
        for b in range(2):
            n_max = int((e[b] == e[b].max()).sum())
            assert int((s[b] != 1.0).sum()) == (n_max if beta else 0), "suppressed count != tied maxima"
    s = suppression_matrix(np.full((1, 3, 3), 0.7), 0.4)
    assert np.array_equal(s, np.full((1, 3, 3), 0.6)), "all-ties grid not fully suppressed"
    return "entries in {1, 1 - beta}; all-ties grid fully suppressed"


@check
def two_way_softmax_partition():
    rng = _rng("twoway")
    block = Suppression(4, rng, np.float64)
    worst = 0.0
    for _ in range(10):
        fa = Tensor(rng.standard_normal((2, 4, 6, 6)) * 2)
        s = suppression_matrix(rng.random((2, 3, 3)), 0.5)
        with no_grad():
            _, r_fg, r_bg = block(fa, s, return_factors=True)
        worst = max(worst, float(np.abs(r_fg.data + r_bg.data - 1).max()))
    assert worst <= 1e-6, f"R_fg + R_bg off by {worst:.2e}"
    return f"max |R_fg + R_bg - 1| = {worst:.1e}"


@check
def sca_attention_columns_and_identity():
    rng = _rng("sca")
    worst = 0.0
    for _ in range(10):
        f = Tensor(rng.standard_normal((2, int(rng.integers(1, 9)), 5, 5)))
        attn, _ = slice_attention(f)
        worst = max(worst, float(np.abs(attn.data.sum(axis=2) - 1).max()))
        out = SCA(0.0, np.float64)(f)
        assert np.array_equal(out.data, f.data), "gamma = 0 is not an exact identity"
    assert worst <= 1e-6, f"attention columns off by {worst:.2e}"
    return f"column sums within {worst:.1e}; gamma=0 exact"


@check
def uneven_partition_reconstructs():
    for n in range(1, 130):
        for k in range(1, n + 1):
            starts = ops.partition(n, k)
            sizes = np.diff(np.append(starts, n))
            base = n // k
            assert (sizes[:-1] == base).all() and sizes[-1] == base + n % k, f"bad strips for n={n} k={k}"
            assert sizes.sum() == n and starts[0] == 0, f"strips do not tile n={n} k={k}"
    return "all n < 130, every k <= n"


# ----------------------------------------------------------------- detector

@check
def mask_set_shape_contract():
    model = CEBSNet(small_config(), seed=0)
    x = _rng("maskset").random((1, 3, 64, 64))
    with no_grad():
        masks = model(x, x[:, ::-1].copy())
    sizes = level_sizes(64)
    for i in range(1, 6):
        assert masks.levels[i].shape == (1, 1, sizes[i], sizes[i]), f"M{i} has shape {masks.levels[i].shape}"
    assert masks.initial.shape == (1, 1, sizes[3], sizes[3]), "Mhat shape"
    assert masks.final.shape == (1, 1, sizes[1], sizes[1]), "M shape"
    sup = masks.supervision(64)
    assert len(sup) == 7 and all(m.shape == (1, 1, 64, 64) for _, m in sup), "supervision copies"
    return "7 maps at level sizes; supervision at 64x64"


# ---------------------------------------------------------------- objective

@check
def bce_values():
    rng = _rng("bce")
    got = float(bce(Tensor(np.zeros((1, 1, 4, 4))), np.ones((1, 1, 4, 4))).data)
    assert abs(got - math.log(2)) <= 1e-6, f"bce(0) = {got}"
    for _ in range(50):
        x = rng.standard_normal((2, 1, 5, 5)) * rng.uniform(0.1, 100)
        y = (rng.random((2, 1, 5, 5)) < 0.5).astype(np.float64)
        assert float(bce(Tensor(x), y).data) >= 0, "negative bce"
    sat = float(bce(Tensor(np.where(y > 0, 60.0, -60.0)), y).data)
    assert sat < 1e-20, f"saturated bce = {sat}"
    return f"bce(0) = {got:.9f}"


@check
def total_loss_zero_logits():
    from .detector import MaskSet

    z = lambda s: Tensor(np.zeros((2, 1, s, s)))  # noqa: E731
    ms = MaskSet(levels={1: z(32), 2: z(16), 3: z(8), 4: z(4), 5: z(2)}, initial=z(8), final=z(32))
    gt = (_rng("zero").random((2, 64, 64)) < 0.2).astype(np.uint8)
    got = total_loss(ms, gt).value
    assert abs(got - 7 * math.log(2)) <= 1e-5, f"total = {got}"
    return f"total = {got:.6f}"


@check
def total_loss_batch_permutation():
    model = CEBSNet(small_config(precision="float64"), seed=1)
    rng = _rng("perm")
    x, y = rng.random((3, 3, 64, 64)), rng.random((3, 3, 64, 64))
    gt = (rng.random((3, 64, 64)) < 0.2).astype(np.uint8)
    model.eval()
    with no_grad():
        a = total_loss(model(x, y), gt).value
        p = [2, 0, 1]
        b = total_loss(model(x[p], y[p]), gt[p]).value
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a)), f"{a} vs {b}"
    return "batch order does not change the loss"


# ------------------------------------------------------------------ metrics

def _oracle(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


@check
def metric_identity_and_oracle():
    rng = _rng("metrics")
    worst = 0.0
    for _ in range(120):
        shape = tuple(int(v) for v in rng.integers(1, 24, size=2))
        gt = (rng.random(shape) < rng.random()).astype(np.uint8)
        pred = (rng.random(shape) < rng.random()).astype(np.uint8)
        s = scores(accumulate(pred, gt))
        tp, fp, fn, tn = _oracle(pred, gt)
        worst = max(worst, abs(s.OA - (tp + tn) / (tp + fp + fn + tn)))
        if tp + fp and tp + fn:
            p, r = tp / (tp + fp), tp / (tp + fn)
            worst = max(worst, abs(s.P - p), abs(s.R - r))
            if tp:
                f1 = 2 * p * r / (p + r)
                worst = max(worst, abs(s.F1 - f1), abs(s.IoU - tp / (tp + fp + fn)))
                assert abs(s.IoU - s.F1 / (2 - s.F1)) <= 1e-9, "IoU != F1 / (2 - F1)"
    assert worst <= 1e-12, f"scores differ from the pixel oracle by {worst:.2e}"
    return f"120 random masks, max deviation {worst:.1e}"


@check
def metric_batch_order_invariance():
    rng = _rng("order")
    pairs = [((rng.random((8, 8)) < 0.3).astype(np.uint8), (rng.random((8, 8)) < 0.3).astype(np.uint8)) for _ in range(10)]
    base = None
    for p, g in pairs:
        base = accumulate(p, g, base)
    for _ in range(5):
        acc = ConfusionCounts()
        for i in rng.permutation(len(pairs)):
            acc = accumulate(*pairs[i], acc)
        assert acc == base, "accumulation depends on batch order"
    return "5 permutations of 10 batches"


# --------------------------------------------------------------------- data

@check
def generator_determinism_and_null_pairs():
    a1, b1, g1 = data.make_pair(7, 3, 64)
    a2, b2, g2 = data.make_pair(7, 3, 64)
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2) and np.array_equal(g1, g2), "not deterministic"
    a, b, g = data.make_pair(7, 4, 64, difficulty=0.5, n_objects=0)
    assert not g.any(), "nuisance-only pair has changed pixels"
    for i in range(5):
        a, b, g = data.make_pair(11, i, 64, difficulty=0.0)
        differs = (a != b).any(axis=0)
        assert not (differs & ~g.astype(bool)).any(), "images differ outside the change mask"
    return "deterministic; null pairs empty; changes confined to gt"


@check
def loader_inverts_writer():
    with tempfile.TemporaryDirectory() as root:
        m = data.gen_synthetic(root, seed=3, count=3, size=32, test_frac=0.34)
        for split in ("train", "test"):
            for sid in m.ids(split):
                s = data.read_sample(m, sid)
                a, b, g = data.make_pair(3, int(sid), 32)
                assert np.array_equal(np.round(s.image_a * 255).astype(np.uint8), a), f"{sid} image A"
                assert np.array_equal(np.round(s.image_b * 255).astype(np.uint8), b), f"{sid} image B"
                assert np.array_equal(s.gt, g), f"{sid} ground truth"
        again = data.load_dataset(root)
        assert again.splits == m.splits, "manifest round trip"
    return "PNG round trip exact"


# ------------------------------------------------------------------ trainer

@check
def adam_matches_scalar_reference():
    from .nn import Parameter

    rng = _rng("adam")
    p = Parameter(rng.standard_normal(5), dtype=np.float64)
    opt = Adam([("w", p)], lr=1e-3)
    ref = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 4):
        g = rng.standard_normal(5)
        p.grad = g.copy()
        opt.step()
        for i in range(5):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i]
            mh = m[i] / (1 - 0.9 ** t)
            vh = v[i] / (1 - 0.999 ** t)
            ref[i] -= 1e-3 * mh / (math.sqrt(vh) + 1e-8)
    err = float(np.abs(p.data - ref).max())
    assert err <= 1e-10, f"deviation {err:.2e}"
    return f"3 steps, max deviation {err:.1e}"


@check
def nonzero_gradient_audit():
    bad = gradient_audit(CEBSNet(small_config(), seed=0))
    assert not bad, "dead or non-finite gradients: " + ", ".join(bad)
    return "every parameter receives a finite nonzero gradient"


def gradient_audit(model, seed=5):
    """Names of parameters whose gradient is missing, non-finite or identically zero."""
    size = model.cfg.input_size
    a, b, gt = data.make_pair(seed, 0, size, difficulty=0.5)
    model.train()
    model.zero_grad()
    x = Tensor(a[None].astype(model.dtype) / 255.0)
    y = Tensor(b[None].astype(model.dtype) / 255.0)
    # two mismatched pairs so batch statistics are not degenerate
    a2, b2, gt2 = data.make_pair(seed, 1, size, difficulty=0.5)
    x = ops.concat([x, Tensor(a2[None].astype(model.dtype) / 255.0)], axis=0)
    y = ops.concat([y, Tensor(b2[None].astype(model.dtype) / 255.0)], axis=0)
    total_loss(model(x, y), np.stack([gt, gt2])).total.backward()
    bad = []
    for name, p in model.named_parameters():
        if p.grad is None or not np.isfinite(p.grad).all() or not np.any(p.grad):
            bad.append(name)
    return bad


def run(names=None):
    for fn in CHECKS:
        if names and fn.__name__ not in names:
            continue
        try:
            detail = fn() or ""
            yield fn.__name__, True, detail
        except AssertionError as exc:
            yield fn.__name__, False, str(exc)
