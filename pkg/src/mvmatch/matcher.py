"""Coarse-to-fine multi-view matcher.

Coarse warps come from global matching by regression-by-classification:
every source token scores all anchor positions in the target, and the
coordinate is the probability-weighted mean of the anchor centers. Warps are
then refined through a stride pyramid; each level warps the target features
toward the source, builds a local correlation volume, aggregates the inputs
through a small convolutional stack into a hidden state, optionally fuses
the per-target hidden states across views (MVFuse), and applies a residual
update to the warp and its confidence.

The residual head has two parts: a non-parametric soft-argmax readout of the
correlation window, which does the actual refining, and a seeded
convolutional head whose output gain is zero-initialized (standard practice
for residual refiners) and only participates when configured.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .attention import AttentionParams, init_attention_params, exchange_features
from .features import FeatureProvider
from .grids import (DenseWarpField, FeatureGrid, invert_warp,
                    local_correlation, upsample_warp, warp_features)
from .grouping import ImageGroup
from .tracks import TrackToken

DEFAULT_STRIDES = (8, 4, 2, 1)
DEFAULT_MVFUSE_LEVELS = (4, 1)
DEFAULT_WINDOWS = {8: 9, 4: 9, 2: 7, 1: 5}


@dataclass(frozen=True)
class AnchorGrid:
    """Anchor centers tiling the target image uniformly, in target pixel units."""

    resolution: tuple[int, int]   # (Ha, Wa)
    centers: np.ndarray           # (Ha * Wa, 2), raster order

    @classmethod
    def uniform(cls, ha: int, wa: int, grid_hw: tuple[int, int]) -> "AnchorGrid":
        h, w = grid_hw
        xs = (np.arange(wa) + 0.5) * (w / wa) - 0.5
        ys = (np.arange(ha) + 0.5) * (h / ha) - 0.5
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        return cls((ha, wa), np.stack([gx.ravel(), gy.ravel()], axis=1))


@dataclass(frozen=True)
class ConvStack:
    """Two 3x3 convolutions with a ReLU between (the per-level f_i)."""

    w1: np.ndarray  # (3, 3, Cin, Ch)
    b1: np.ndarray
    w2: np.ndarray  # (3, 3, Ch, Ch)
    b2: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(kernels.conv2d(x, self.w1, self.b1), 0.0)
        return kernels.conv2d(h, self.w2, self.b2)


@dataclass(frozen=True)
class MVFuseParams:
    """Per-pixel cross-view attention plus a ConvNeXt-style mixing block."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    dw: np.ndarray   # (7, 7, D) depthwise
    dwb: np.ndarray
    pw1: np.ndarray  # (D, Dff)
    pb1: np.ndarray
    pw2: np.ndarray  # (Dff, D)
    pb2: np.ndarray


@dataclass(frozen=True)
class LevelParams:
    stride: int
    window: int
    hidden: ConvStack
    head_w: np.ndarray  # (3, 3, Ch, 3): (dx, dy, dconf) conv head
    head_b: np.ndarray
    mvfuse: MVFuseParams | None


@dataclass(frozen=True)
class MatcherParams:
    feature_dim: int
    hidden_dim: int
    strides: tuple[int, ...]
    levels: dict[int, LevelParams]          # keyed by level index (1 = finest)
    encoder: AttentionParams
    mvfuse_levels: tuple[int, ...] = DEFAULT_MVFUSE_LEVELS
    mvfuse_iters: int = 2
    global_temperature: float = 0.002       # cosine units for global matching
    softargmax_temperature: float = 0.05    # cosine units for the confidence readout
    subpixel_levels: tuple[int, ...] = (1,)  # levels with parabolic sub-cell fit
    corr_gate_margin: float = 0.03          # cosine lead a move needs over staying put
    verify_margin: float = 0.01             # cosine improvement a move must verify to
    conf_blend: float = 0.5                 # pull of confidence toward corr sharpness
    residual_gain: float = 0.0              # conv-head output scale (zero-initialized)
    zero_residual: bool = False             # g_i == 0: pure upsampling pass-through
    mvfuse_alignment: str = "forward"       # "forward" | "invert" | "reverse"
    anchor_resolution: tuple[int, int] | None = None  # None: target feature resolution

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    def level_stride(self, level: int) -> int:
        if level > self.num_levels:
            return self.strides[0]
        return self.strides[self.num_levels - level]


def init_matcher_params(feature_dim: int = 32, hidden_dim: int = 48, seed: int = 0,
                        strides: tuple[int, ...] = DEFAULT_STRIDES,
                        windows: dict[int, int] | None = None,
                        sigma: float = 1.0, **overrides) -> MatcherParams:
    """Seeded parameter set; conv stacks Gaussian, attention per the encoder."""
    rng = np.random.Generator(np.random.PCG64(seed))
    windows = dict(DEFAULT_WINDOWS if windows is None else windows)
    levels: dict[int, LevelParams] = {}
    num_levels = len(strides)
    mvfuse_levels = overrides.get("mvfuse_levels", DEFAULT_MVFUSE_LEVELS)

    def conv_init(k, cin, cout):
        std = 1.0 / np.sqrt(k * k * cin)
        return rng.normal(0.0, std, (k, k, cin, cout)), np.zeros(cout)

    for level in range(num_levels, 0, -1):
        stride = strides[num_levels - level]
        window = windows.get(stride, 5)
        cin = 2 * feature_dim + window * window
        w1, b1 = conv_init(3, cin, hidden_dim)
        w2, b2 = conv_init(3, hidden_dim, hidden_dim)
        head_w, head_b = conv_init(3, hidden_dim, 3)
        fuse = None
        if level in mvfuse_levels:
            d = hidden_dim
            dff = 2 * d
            std = 1.0 / np.sqrt(d)
            fuse = MVFuseParams(
                wq=rng.normal(0, std, (d, d)), wk=rng.normal(0, std, (d, d)),
                wv=rng.normal(0, std, (d, d)), wo=rng.normal(0, std, (d, d)),
                dw=rng.normal(0, 1.0 / 7.0, (7, 7, d)), dwb=np.zeros(d),
                pw1=rng.normal(0, std, (d, dff)), pb1=np.zeros(dff),
                pw2=rng.normal(0, 1.0 / np.sqrt(dff), (dff, d)) * 0.1, pb2=np.zeros(d),
            )
        levels[level] = LevelParams(stride, window, ConvStack(w1, b1, w2, b2),
                                    head_w, head_b, fuse)
    encoder = init_attention_params(feature_dim, sigma=sigma, seed=seed + 1)
    return MatcherParams(feature_dim=feature_dim, hidden_dim=hidden_dim,
                         strides=tuple(strides), levels=levels, encoder=encoder,
                         **overrides)


@dataclass
class RefinerState:
    """Warps and confidences per target at one pyramid level.

    ``level`` runs from num_levels + 1 (the raw coarse estimate) down to 1;
    level i holds warps at stride 2^(i-1) for the default pyramid.
    """

    level: int
    warps: dict[int, DenseWarpField]
    hidden: dict[int, FeatureGrid] = field(default_factory=dict)


def global_match(src_feat: FeatureGrid, tgt_feat: FeatureGrid, anchors: AnchorGrid,
                 temperature: float = 0.01, source_view: int = 0,
                 target_view: int = 1) -> DenseWarpField:
    """Regression-by-classification over the anchor grid.

    Each source token scores all anchors (scaled inner products, softmax); the
    coarse coordinate is the probability-weighted mean of anchor centers and
    the confidence is the winning anchor's probability.
    """
    if src_feat.channels != tgt_feat.channels:
        raise ValueError("source/target channel mismatch")
    d = src_feat.channels
    keys = kernels.bilinear_gather(tgt_feat.data, anchors.centers[:, 0],
                                   anchors.centers[:, 1])
    logits = src_feat.data.reshape(-1, d) @ keys.T / (np.sqrt(d) * temperature)
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    coords = probs @ anchors.centers
    conf = probs.max(axis=1)
    h, w = src_feat.height, src_feat.width
    return DenseWarpField(coords.reshape(h, w, 2), conf.reshape(h, w),
                          source_view, target_view)


def mvfuse(hidden: list[FeatureGrid], params: MVFuseParams, iterations: int) -> list[FeatureGrid]:
    """Pixel-aligned multi-view fusion.

    Each iteration first lets every pixel attend across the V view slots at
    that pixel (the attended value minus the slot's own value, through the
    output projection, enters as a residual, so a lone view passes through
    the attention unchanged) and then mixes spatially within each view with
    a depthwise 7x7 convolution and a two-layer channel MLP, residual.
    """
    shapes = {(g.height, g.width) for g in hidden}
    if len(shapes) != 1:
        raise ValueError("all hidden grids must share a spatial size")
    stack = np.stack([g.data for g in hidden])  # (V, H, W, D)
    d = stack.shape[-1]
    for _ in range(iterations):
        q = stack @ params.wq
        k = stack @ params.wk
        v = stack @ params.wv
        logits = np.einsum("vhwd,uhwd->hwvu", q, k, optimize=True) / np.sqrt(d)
        logits -= logits.max(axis=-1, keepdims=True)
        attn = np.exp(logits)
        attn /= attn.sum(axis=-1, keepdims=True)
        fused = np.einsum("hwvu,uhwd->vhwd", attn, v, optimize=True)
        stack = stack + (fused - v) @ params.wo
        mixed = np.empty_like(stack)
        for view in range(stack.shape[0]):
            t = kernels.depthwise_conv2d(stack[view], params.dw, params.dwb)
            t = np.maximum(t @ params.pw1 + params.pb1, 0.0)
            mixed[view] = t @ params.pw2 + params.pb2
        stack = stack + mixed
    return [FeatureGrid(stack[i], stride=hidden[i].stride) for i in range(len(hidden))]


def _corr_readout(corr_scores: np.ndarray, channels: int, temperature: float,
                  subpixel: bool, gate_margin: float = 0.02):
    """Residual warp update read off the correlation window.

    The integer part moves to the window argmax only when it beats the center
    cell by ``gate_margin`` (cosine units); ties and small leads keep the
    current estimate, so a correct warp is a fixed point and, with similarity
    decreasing in distance, the update never moves away from the truth. When
    ``subpixel`` is set, a parabolic fit through the argmax and its axis
    neighbours adds a sub-cell correction. The confidence proxy is the
    softmax peak over the window (sharpness).
    """
    h, w, window, _ = corr_scores.shape
    r = (window - 1) // 2
    flat = corr_scores.reshape(h, w, -1)
    center = window * r + r
    amax = flat.argmax(axis=-1)
    margin = gate_margin / np.sqrt(channels)
    keep = flat[..., center] >= np.take_along_axis(flat, amax[..., None], -1)[..., 0] - margin
    amax = np.where(keep, center, amax)
    jj, ii = np.divmod(amax, window)
    delta = np.stack([ii - r, jj - r], axis=-1).astype(np.float64)
    if subpixel:
        yy, xx = np.mgrid[0:h, 0:w]

        def axis_fit(idx_lo, idx_hi, interior):
            lo = corr_scores[yy, xx, idx_lo[0], idx_lo[1]]
            hi = corr_scores[yy, xx, idx_hi[0], idx_hi[1]]
            c = corr_scores[yy, xx, jj, ii]
            denom = lo - 2.0 * c + hi
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(np.abs(denom) > 1e-12, 0.5 * (lo - hi) / denom, 0.0)
            return np.where(interior, np.clip(d, -0.5, 0.5), 0.0)

        dx = axis_fit((jj, np.maximum(ii - 1, 0)), (jj, np.minimum(ii + 1, window - 1)),
                      (ii > 0) & (ii < window - 1))
        dy = axis_fit((np.maximum(jj - 1, 0), ii), (np.minimum(jj + 1, window - 1), ii),
                      (jj > 0) & (jj < window - 1))
        delta[..., 0] += dx
        delta[..., 1] += dy
    logits = flat * (np.sqrt(channels) / temperature)
    logits -= logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    return delta, probs.max(axis=-1).reshape(h, w)


def _aligned_target_grid(phi_tgt: FeatureGrid, warp: DenseWarpField,
                         params: MatcherParams, provider: FeatureProvider,
                         source_view: int) -> FeatureGrid:
    """Source-aligned target features per the configured alignment mode."""
    mode = params.mvfuse_alignment
    if mode == "forward":
        return warp_features(phi_tgt, warp)
    if mode == "invert":
        back = invert_warp(warp, (phi_tgt.height, phi_tgt.width))
    elif mode == "reverse":
        src_grid = provider.features(source_view, phi_tgt.stride)
        anchors = AnchorGrid.uniform(src_grid.height, src_grid.width,
                                     (src_grid.height, src_grid.width))
        back = global_match(phi_tgt, src_grid, anchors, params.global_temperature,
                            warp.target_view, warp.source_view)
    else:
        raise ValueError(f"unknown mvfuse alignment {mode!r}")
    # scatter target features along the backward warp into the source grid
    th, tw = back.height, back.width
    sh, sw = warp.height, warp.width
    px = np.round(back.targets[..., 0].ravel()).astype(np.int64)
    py = np.round(back.targets[..., 1].ravel()).astype(np.int64)
    ok = (px >= 0) & (px < sw) & (py >= 0) & (py < sh)
    idx = np.nonzero(ok)[0]
    data = np.zeros((sh, sw, phi_tgt.channels))
    hit = np.zeros((sh, sw), dtype=bool)
    if idx.size:
        _, ibuf = kernels.zbuffer_min(px[idx], py[idx], -back.confidence.ravel()[idx], sh, sw)
        filled = ibuf >= 0
        src_idx = idx[ibuf[filled]]
        ys, xs = np.nonzero(filled)
        data[ys, xs] = phi_tgt.data.reshape(-1, phi_tgt.channels)[src_idx]
        hit = filled
    if hit.any() and not hit.all():
        data = kernels.fill_nearest(data, hit)
    return FeatureGrid(data, stride=phi_tgt.stride)


def refine_level(state: RefinerState, provider: FeatureProvider,
                 params: MatcherParams) -> RefinerState:
    """One refinement step: state at level i+1 in, state at level i out.

    Per target view the previous warp is upsampled to this level, target
    features are warped toward the source, a local correlation volume is
    built, the aggregated inputs run through the level's conv stack into a
    hidden state (fused across views at MVFuse levels), and the output head
    produces residual warp/confidence updates. Confidence is clamped to
    [0, 1] after the additive update.
    """
    if state.level <= 1:
        raise ValueError("state is already at the finest level")
    out_level = state.level - 1
    lp = params.levels[out_level]
    stride_in = params.level_stride(state.level)
    factor = stride_in // lp.stride

    source_view = next(iter(state.warps.values())).source_view
    phi_src = provider.features(source_view, lp.stride)

    ups: dict[int, DenseWarpField] = {}
    corrs: dict[int, np.ndarray] = {}
    hiddens: dict[int, FeatureGrid] = {}
    order = sorted(state.warps)
    for tgt in order:
        warp = state.warps[tgt]
        w_up = upsample_warp(warp, factor) if factor > 1 else warp
        phi_tgt = provider.features(tgt, lp.stride)
        if (w_up.height, w_up.width) != (phi_src.height, phi_src.width):
            raise ValueError("provider stride does not match the level resolution")
        corr = local_correlation(phi_src, phi_tgt, w_up, lp.window)
        warped = _aligned_target_grid(phi_tgt, w_up, params, provider, source_view) \
            if (out_level in params.mvfuse_levels and params.mvfuse_alignment != "forward") \
            else warp_features(phi_tgt, w_up)
        agg = np.concatenate([phi_src.data, warped.data,
                              corr.scores.reshape(corr.height, corr.width, -1)], axis=2)
        hiddens[tgt] = FeatureGrid(lp.hidden.apply(agg), stride=lp.stride)
        ups[tgt] = w_up
        corrs[tgt] = corr.scores

    if lp.mvfuse is not None and out_level in params.mvfuse_levels and len(order) >= 1:
        fused = mvfuse([hiddens[t] for t in order], lp.mvfuse, params.mvfuse_iters)
        hiddens = {t: g for t, g in zip(order, fused)}

    new_warps: dict[int, DenseWarpField] = {}
    for tgt in order:
        w_up = ups[tgt]
        if params.zero_residual:
            new_warps[tgt] = w_up
            continue
        delta, peak = _corr_readout(corrs[tgt], params.feature_dim,
                                    params.softargmax_temperature,
                                    subpixel=out_level in params.subpixel_levels,
                                    gate_margin=params.corr_gate_margin)
        # verify-then-apply: keep a move only if the correlation at the moved
        # position actually beats staying put, so updates never regress
        phi_tgt = provider.features(tgt, lp.stride)
        cand = w_up.targets + delta
        sampled = kernels.bilinear_gather(phi_tgt.data, cand[..., 0].ravel(),
                                          cand[..., 1].ravel())
        d = phi_src.channels
        sc_new = np.einsum("nc,nc->n", phi_src.data.reshape(-1, d),
                           sampled).reshape(cand.shape[:2]) / np.sqrt(d)
        r = (lp.window - 1) // 2
        improved = sc_new > corrs[tgt][:, :, r, r] + params.verify_margin / np.sqrt(d)
        delta = np.where(improved[..., None], delta, 0.0)
        d_conf = params.conf_blend * (peak - w_up.confidence)
        if params.residual_gain != 0.0:
            head = kernels.conv2d(hiddens[tgt].data, lp.head_w, lp.head_b)
            delta = delta + params.residual_gain * head[..., :2]
            d_conf = d_conf + params.residual_gain * head[..., 2]
        new_warps[tgt] = DenseWarpField(w_up.targets + delta,
                                        np.clip(w_up.confidence + d_conf, 0.0, 1.0),
                                        w_up.source_view, w_up.target_view)
    return RefinerState(out_level, new_warps, hiddens)


def run_group(group: ImageGroup, provider: FeatureProvider,
              tracks: list[TrackToken], params: MatcherParams,
              upsample_factor: int = 1) -> dict[int, DenseWarpField]:
    """Full matcher over one image group: encoder exchange, global match, refine.

    Returns base-resolution warps keyed by target view id (optionally
    upsampled once more by ``upsample_factor``).
    """
    if not group.targets:
        raise ValueError("group has no targets")
    coarse = params.strides[0]
    grids = [provider.features(v, coarse) for v in group.views]
    if tracks:
        grids = exchange_features(grids, tracks, params.encoder)
    ha, wa = params.anchor_resolution or (grids[0].height, grids[0].width)
    warps: dict[int, DenseWarpField] = {}
    for slot, tgt in enumerate(group.targets, start=1):
        anchors = AnchorGrid.uniform(ha, wa, (grids[slot].height, grids[slot].width))
        warps[tgt] = global_match(grids[0], grids[slot], anchors,
                                  params.global_temperature, group.source, tgt)
    state = RefinerState(params.num_levels + 1, warps)
    while state.level > 1:
        state = refine_level(state, provider, params)
    out = state.warps
    if upsample_factor > 1:
        out = {t: upsample_warp(w, upsample_factor) for t, w in out.items()}
    return out
