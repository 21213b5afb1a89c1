"""Change feature refinement: guided fusion, excitation/suppression, pyramid attention.

Levels run deep to shallow. Levels 5, 4 and 3 need only the pyramid; levels
2 and 1 additionally consume the initial change map produced by the detector
from the three deep masks, so :class:`Schedule` enforces that order.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv, ConvSeq, Module, Scalar
from .tensor import ContractError, Tensor


@dataclass
class RegionScores:
    e_w: Tensor  # (B, k) scores of the k width strips
    e_h: Tensor  # (B, k) scores of the k height strips
    e: Tensor    # (B, k, k), e[m, n] = (e_h[m] + e_w[n]) / 2

    @property
    def k(self):
        return self.e.shape[-1]


def _strip_means(n, k, dtype):
    """(n, k) matrix averaging each of the k partition strips of an extent n."""
    starts = np.append(ops.partition(n, k), n)
    p = np.zeros((n, k), dtype=dtype)
    for j in range(k):
        p[starts[j]:starts[j + 1], j] = 1.0 / (starts[j + 1] - starts[j])
    return Tensor(p)


def region_scores(fa, k, conv_w, conv_h):
    """Dual-axis partition scores.

    ``conv_w``/``conv_h`` are linear 1x1 convs to one channel. A 1x1 conv
    commutes with cropping, so each strip's pooled score is the strip mean of
    the conv applied to the whole map.
    """
    b, _, h, w = fa.shape
    if k > h or k > w:
        raise ContractError(f"partition factor k={k} exceeds feature extent {h}x{w}")
    zw = ops.mean(conv_w(fa), axis=2)  # (B, 1, 1, W)
    zh = ops.mean(conv_h(fa), axis=3)  # (B, 1, H, 1)
    zh = ops.reshape(zh, (b, 1, 1, h))
    e_w = ops.softmax(ops.reshape(ops.matmul(zw, _strip_means(w, k, fa.dtype)), (b, k)), axis=1)
    e_h = ops.softmax(ops.reshape(ops.matmul(zh, _strip_means(h, k, fa.dtype)), (b, k)), axis=1)
    e = (ops.reshape(e_h, (b, k, 1)) + ops.reshape(e_w, (b, 1, k))) * 0.5
    return RegionScores(e_w, e_h, e)


def suppression_matrix(scores, beta):
    """1 - beta on every cell tied for the grid maximum, 1 elsewhere. Not differentiated."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta out of [0,1]: {beta}")
    e = scores.e.data if isinstance(scores, RegionScores) else np.asarray(scores)
    top = e.max(axis=(-2, -1), keepdims=True)
    return np.where(e == top, 1.0 - beta, 1.0).astype(e.dtype)


class Excitation(Module):
    def __init__(self, d, rng, dtype):
        self.modulate = ConvSeq(d, d, (1, 3), rng, dtype)
        self.out = Conv(d, d, 3, rng, dtype=dtype)

    def forward(self, fa, scores):
        h, w = fa.shape[2], fa.shape[3]
        grid = ops.region_expand(scores.e, h, w)
        return self.out(fa + self.modulate(grid * fa))


class Suppression(Module):
    def __init__(self, d, rng, dtype):
        self.pre = ConvSeq(d, d, (1, 3), rng, dtype)
        self.channel_gate = Conv(d, d, 1, rng, norm=False, act=False, dtype=dtype)
        self.fg_logit = Conv(d, d, 1, rng, norm=False, act=False, dtype=dtype)
        self.bg_logit = Conv(d, d, 1, rng, norm=False, act=False, dtype=dtype)
        self.out = Conv(d, d, 3, rng, dtype=dtype)

    def forward(self, fa, s, return_factors=False):
        h, w = fa.shape[2], fa.shape[3]
        mask = ops.region_expand(Tensor(s), h, w)
        f_in = self.pre(fa * mask)
        gate = ops.sigmoid(self.channel_gate(ops.global_avg_pool(f_in)))
        f_fg = f_in * gate
        f_bg = f_in * (1.0 - gate)
        logits = ops.stack([self.fg_logit(f_fg), self.bg_logit(f_bg)], axis=1)
        r = ops.softmax(logits, axis=1)
        r_fg, r_bg = (ops.reshape(t, f_in.shape) for t in ops.split(r, [1, 1], axis=1))
        out = self.out(f_fg * r_fg + f_bg * r_bg)
        if return_factors:
            return out, r_fg, r_bg
        return out


class ExcitationInput(Module):
    """Builds the excitation-branch input at levels 2 and 1 from the initial change map."""

    def __init__(self, d, rng, dtype):
        self.map_embed = Conv(1, d, 1, rng, dtype=dtype)
        self.inner = Conv(d, d, 3, rng, dtype=dtype)
        self.outer = Conv(d, d, 3, rng, dtype=dtype)
        self.merge = ConvSeq(d, d, (1, 3), rng, dtype)

    def forward(self, pasca_next, mhat, out_size):
        h, w = pasca_next.shape[2], pasca_next.shape[3]
        mc = self.map_embed(ops.upsample_bilinear(mhat, h, w))
        fa = self.outer(mc * self.inner(pasca_next))
        return ops.upsample_bilinear(self.merge(mc + fa), out_size, out_size)


def excitation_input(level, pasca_next, out_size, mhat=None, block=None):
    if level in (4, 3):
        return ops.upsample_bilinear(pasca_next, out_size, out_size)
    if level in (2, 1):
        if mhat is None:
            raise ContractError(f"level {level} needs the initial change map")
        return block(pasca_next, mhat, out_size)
    raise ContractError(f"no excitation input at level {level}")


class FESM(Module):
    def __init__(self, d, rng, cfg, dtype):
        self.score_w = Conv(d, 1, 1, rng, norm=False, act=False, bias=False, dtype=dtype)
        self.score_h = Conv(d, 1, 1, rng, norm=False, act=False, bias=False, dtype=dtype)
        self.excite = Excitation(d, rng, dtype)
        self.suppress = Suppression(d, rng, dtype)
        # gamma = sigmoid(raw) keeps the blend convex
        self.gamma = Scalar(np.log(cfg.gamma_fesm / (1 - cfg.gamma_fesm)), dtype=dtype)
        self.beta = cfg.beta

    def forward(self, fa, k, trace=None):
        scores = region_scores(fa, k, self.score_w, self.score_h)
        s = suppression_matrix(scores, self.beta)
        e_out = self.excite(fa, scores)
        s_out = self.suppress(fa, s)
        g = ops.reshape(ops.sigmoid(self.gamma()), (1, 1, 1, 1))
        if trace is not None:
            trace.update(scores=scores, suppression=s)
        return g * e_out + (1.0 - g) * s_out


class CGFF(Module):
    def __init__(self, d, rng, level, dtype):
        self.level = level
        self.diff = ConvSeq(d, d, (1, 3), rng, dtype)
        if level < 5:
            self.concat = ConvSeq(2 * d, d, (1, 3), rng, dtype)
            self.guided = ConvSeq(d, d, (1, 3), rng, dtype)
            self.out = Conv(d, d, 1, rng, dtype=dtype)

    def forward(self, fx, fy, guidance=None):
        if fx.shape != fy.shape:
            raise ContractError(f"cgff pair mismatch: {fx.shape} vs {fy.shape}")
        f_ad = self.diff(ops.absolute(fx - fy))
        if self.level == 5:
            return f_ad
        if guidance is None:
            raise ContractError(f"cgff at level {self.level} needs FESM guidance")
        f_con = self.concat(ops.concat([fx, fy], axis=1))
        return self.out(self.guided(f_con * guidance) + f_ad)


class PyramidEnhance(Module):
    def __init__(self, d, rng, dtype):
        self.stem = ConvSeq(d, d, (1, 3, 1), rng, dtype)
        self.merge = ConvSeq(4 * d, d, (1, 3), rng, dtype)
        self.residual = Conv(d, d, 1, rng, dtype=dtype)
        self.out = Conv(2 * d, d, 1, rng, dtype=dtype)

    def forward(self, fcgff):
        f_in = self.stem(fcgff)
        mp1 = ops.maxpool2d(f_in, 3, 1, 1)
        mp2 = ops.maxpool2d(mp1, 3, 1, 1)
        mp3 = ops.maxpool2d(mp2, 3, 1, 1)
        mspe = self.merge(ops.concat([f_in, mp1, mp2, mp3], axis=1))
        return self.out(ops.concat([mspe, self.residual(fcgff)], axis=1))


def slice_attention(f):
    """Stack the H row-slices and W column-slices of f and attend across channels.

    Returns (attention (B, H+W, C, C), reassembled map (B, C, H, W)). Column n of
    each attention matrix is a softmax over m of <slice_m, slice_n>.
    """
    b, c, h, w = f.shape
    if h != w:
        raise ContractError(f"slice attention needs square features, got {h}x{w}")
    rows = ops.transpose(f, (0, 2, 1, 3))  # (B, H, C, W)
    cols = ops.transpose(f, (0, 3, 1, 2))  # (B, W, C, H)
    qkv = ops.concat([rows, cols], axis=1)  # (B, H+W, C, S)
    logits = ops.matmul(qkv, ops.transpose(qkv, (0, 1, 3, 2)))
    attn = ops.softmax(logits, axis=2)
    out = ops.matmul(ops.transpose(attn, (0, 1, 3, 2)), qkv)
    o_rows, o_cols = ops.split(out, [h, w], axis=1)
    o_rows = ops.transpose(o_rows, (0, 2, 1, 3))
    o_cols = ops.transpose(o_cols, (0, 2, 3, 1))
    return attn, (o_rows + o_cols) * 0.5


class SCA(Module):
    def __init__(self, gamma, dtype):
        self.gamma = Scalar(gamma, dtype=dtype)

    def forward(self, fspe):
        _, mixed = slice_attention(fspe)
        return fspe + ops.reshape(self.gamma(), (1, 1, 1, 1)) * mixed


class LevelRefiner(Module):
    """All refinement blocks owned by one pyramid level."""

    def __init__(self, level, d, rng, cfg, dtype=np.float32):
        self.level = level
        self.cgff = CGFF(d, rng, level, dtype)
        self.enhance = PyramidEnhance(d, rng, dtype)
        self.sca = SCA(cfg.gamma_sca, dtype)
        if level < 5:
            self.fesm = FESM(d, rng, cfg, dtype)
            self.k = cfg.k_for(level)
            self.k_clamp = cfg.k_clamp
        if level < 3:
            self.source = ExcitationInput(d, rng, dtype)

    def effective_k(self, extent):
        if self.k_clamp:
            return min(self.k, extent)
        return self.k

    def forward(self, fx, fy, pasca_next=None, mhat=None, trace=None):
        """Return (F_CGFF, F_PASCA) for this level."""
        guidance = None
        if self.level < 5:
            size = fx.shape[2]
            fa = excitation_input(self.level, pasca_next, size, mhat, getattr(self, "source", None))
            guidance = self.fesm(fa, self.effective_k(size), trace)
            if trace is not None:
                trace["fesm"] = guidance
        fcgff = self.cgff(fx, fy, guidance)
        pasca = self.sca(self.enhance(fcgff))
        if trace is not None:
            trace.update(cgff=fcgff, pasca=pasca)
        return fcgff, pasca


class Schedule:
    """Tracks which levels have been refined and whether the initial map exists."""

    def __init__(self):
        self.pasca = {}
        self.mhat = None

    def check(self, level):
        if level in self.pasca:
            raise ContractError(f"level {level} already refined")
        if level < 5 and level + 1 not in self.pasca:
            raise ContractError(f"level {level} refined before level {level + 1}")
        if level <= 2 and self.mhat is None:
            raise ContractError(f"level {level} refined before the initial change map exists")


def refine_level(refiner, pair, schedule, trace=None):
    level = refiner.level
    schedule.check(level)
    fx, fy = pair
    fcgff, pasca = refiner(fx, fy, schedule.pasca.get(level + 1), schedule.mhat, trace)
    schedule.pasca[level] = pasca
    return fcgff, pasca
