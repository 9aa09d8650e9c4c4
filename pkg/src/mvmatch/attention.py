"""Track-guided feature exchange: sampling, view-axis propagation, splatting.

Grid features are gathered onto sparse track positions with biased
cross-attention, propagated along each track across views with a masked,
view-order-invariant transformer, and scattered back onto the grids as a
residual. All parameters live in an explicit, inspectable dataclass; there
is no training here, the module's contract is the math.

Masking follows a fixed recipe: a -1e9 additive constant on masked logits,
then a post-softmax re-zero of the masked columns (and renormalization) so
masked entries contribute exactly zero weight.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .grids import FeatureGrid
from .tracks import TrackToken

MASK_LOGIT = -1e9

PARAMS_MAGIC = b"MVAP"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class AttentionParams:
    """Weights for the exchange kernel plus the spatial-bias scale sigma.

    The coordinate MLP is two layers (2 -> D -> D) with max(0, .) between
    them; keys/values/outputs are D x D projections; sigma is in pixels of
    the grid the kernel runs on.
    """

    dim: int
    w1: np.ndarray   # (2, D)
    b1: np.ndarray   # (D,)
    w2: np.ndarray   # (D, D)
    b2: np.ndarray   # (D,)
    wk: np.ndarray   # (D, D)
    wv: np.ndarray   # (D, D)
    wout: np.ndarray  # (D, D)
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        for name in ("w1", "b1", "w2", "b2", "wk", "wv", "wout"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        d = self.dim
        shapes = {"w1": (2, d), "b1": (d,), "w2": (d, d), "b2": (d,),
                  "wk": (d, d), "wv": (d, d), "wout": (d, d)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}")


def init_attention_params(dim: int, sigma: float, seed: int,
                          scale: float | None = None,
                          out_scale: float = 0.1) -> AttentionParams:
    """Seeded Gaussian initialization (std 1/sqrt(D) unless overridden).

    The output projection is drawn ``out_scale`` times smaller so the splat
    residual perturbs rather than overwrites the grid features, keeping the
    encoder exchange near-identity at initialization.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    s = scale if scale is not None else 1.0 / np.sqrt(dim)
    return AttentionParams(
        dim=dim,
        w1=rng.normal(0, s, (2, dim)),
        b1=rng.normal(0, s, dim),
        w2=rng.normal(0, s, (dim, dim)),
        b2=rng.normal(0, s, dim),
        wk=rng.normal(0, s, (dim, dim)),
        wv=rng.normal(0, s, (dim, dim)),
        wout=rng.normal(0, s * out_scale, (dim, dim)),
        sigma=float(sigma),
    )


@dataclass(frozen=True)
class TrackFeatures:
    """Per-view, per-track feature vectors with the tracks' visibility mask."""

    values: np.ndarray      # (V, T, D)
    visibility: np.ndarray  # (T, V) bool

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        vis = np.ascontiguousarray(self.visibility, dtype=bool)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "visibility", vis)
        if values.ndim != 3:
            raise ValueError("values must be (V, T, D)")
        if vis.shape != (values.shape[1], values.shape[0]):
            raise ValueError("visibility must be (T, V)")


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax with exact-zero weights on masked columns.

    ``mask`` is True where an entry participates. Masked logits get -1e9
    added, and after the softmax the masked entries are re-zeroed and each
    row renormalized, so rows sum to 1 over the unmasked entries exactly.
    Fully-masked rows come back as all zeros.
    """
    shifted = np.where(mask, logits, logits + MASK_LOGIT)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    expd = np.where(mask, expd, 0.0)
    denom = expd.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, expd / np.where(denom > 0, denom, 1.0), 0.0)
    return out


def _normalized(coords: np.ndarray, grid_hw: tuple[int, int]) -> np.ndarray:
    h, w = grid_hw
    return coords / np.array([max(w - 1, 1), max(h - 1, 1)], dtype=np.float64)


def coordinate_queries(params: AttentionParams, coords: np.ndarray,
                       grid_hw: tuple[int, int]) -> np.ndarray:
    """Coordinate MLP: positions normalized to [0, 1], two layers, ReLU between."""
    x = _normalized(np.asarray(coords, dtype=np.float64), grid_hw)
    hidden = np.maximum(x @ params.w1 + params.b1, 0.0)
    return hidden @ params.w2 + params.b2


def grid_token_centers(height: int, width: int) -> np.ndarray:
    """(HW, 2) centers of the grid tokens in pixel units, raster order."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def spatial_bias(track_coords: np.ndarray, grid_size: tuple[int, int],
                 sigma: float) -> np.ndarray:
    """Locality bias: -(squared distance to each grid-token center) / (2 sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    centers = grid_token_centers(*grid_size)
    coords = np.atleast_2d(np.asarray(track_coords, dtype=np.float64))
    d2 = np.sum((coords[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return -d2 / (2.0 * sigma * sigma)


def attentional_sampling(grid: FeatureGrid, track_coords: np.ndarray,
                         params: AttentionParams) -> np.ndarray:
    """Gather grid features onto track positions via biased cross-attention.

    Queries come from the coordinate MLP, keys and values are the flattened
    grid features (run through the key/value projections), and the spatial
    bias is added to the logits before the softmax. Returns (T, D).
    """
    if grid.channels != params.dim:
        raise ValueError(f"grid has {grid.channels} channels, params expect {params.dim}")
    hw = (grid.height, grid.width)
    feats = grid.data.reshape(-1, params.dim)
    queries = coordinate_queries(params, track_coords, hw)
    keys = feats @ params.wk
    values = feats @ params.wv
    logits = queries @ keys.T / np.sqrt(params.dim)
    logits = logits + spatial_bias(track_coords, hw, params.sigma)
    attn = masked_softmax(logits, np.ones_like(logits, dtype=bool))
    return attn @ values


def track_transformer(feats: TrackFeatures, params: AttentionParams) -> TrackFeatures:
    """Per-track self-attention along the view axis, visibility-masked.

    No view-index embeddings are used, so permuting the target views permutes
    the outputs identically. Invisible slots neither contribute keys/values
    nor receive outputs (they are exactly zero afterwards). One layer, one
    head, no feedforward; residual connection around the attention.
    """
    v, t, d = feats.values.shape
    if d != params.dim:
        raise ValueError("feature dim does not match params")
    vis_tv = feats.visibility
    if not vis_tv.any(axis=1).all():
        raise ValueError("every track must be visible in at least one view")
    z = np.where(vis_tv.T[:, :, None], feats.values, 0.0)  # scrub invisible slots
    zt = z.transpose(1, 0, 2)                  # (T, V, D)
    q = zt @ params.wk
    k = zt @ params.wk
    val = zt @ params.wv
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(d)          # (T, V, V)
    mask = np.broadcast_to(vis_tv[:, None, :], logits.shape)
    attn = masked_softmax(logits, mask)
    out = zt + (attn @ val) @ params.wout
    out = np.where(vis_tv[:, :, None], out, 0.0)
    return TrackFeatures(out.transpose(1, 0, 2), vis_tv.copy())


def attentional_splatting(grid: FeatureGrid, track_feats: np.ndarray,
                          track_coords: np.ndarray, visibility: np.ndarray,
                          params: AttentionParams) -> FeatureGrid:
    """Scatter track features back onto the grid as a residual update.

    Grid-token centers drive the queries through the same coordinate MLP,
    keys/values come from the track features, the spatial bias enters
    transposed relative to sampling, and invisible tracks are masked out of
    every row. With no visible track the grid is returned unchanged.
    """
    if grid.channels != params.dim:
        raise ValueError(f"grid has {grid.channels} channels, params expect {params.dim}")
    visibility = np.asarray(visibility, dtype=bool)
    if not visibility.any():
        return grid
    hw = (grid.height, grid.width)
    feats = np.where(visibility[:, None], track_feats, 0.0)
    queries = coordinate_queries(params, grid_token_centers(*hw), hw)
    keys = feats @ params.wk
    values = feats @ params.wv
    logits = queries @ keys.T / np.sqrt(params.dim)
    logits = logits + spatial_bias(track_coords, hw, params.sigma).T
    mask = np.broadcast_to(visibility[None, :], logits.shape)
    attn = masked_softmax(logits, mask)
    update = (attn @ values) @ params.wout
    return FeatureGrid(grid.data + update.reshape(grid.data.shape), stride=grid.stride)


def exchange_features(grids: list[FeatureGrid], tracks: list[TrackToken],
                      params: AttentionParams) -> list[FeatureGrid]:
    """Full sample -> propagate -> splat round trip over one group's views.

    ``grids[v]`` is view v's feature map (group view order: source first) and
    track coordinates are interpreted in base-image pixels, scaled here by
    each grid's stride. Views where a track is invisible contribute zeros to
    the propagation and receive no splat from it.
    """
    if not tracks:
        return list(grids)
    v = len(grids)
    t = len(tracks)
    d = params.dim
    vis = np.stack([tr.visibility for tr in tracks])          # (T, V)
    coords = np.stack([tr.coords.reshape(-1, 2) for tr in tracks])  # (T, V, 2)
    sampled = np.zeros((v, t, d))
    per_view_coords = []
    for view, grid in enumerate(grids):
        cv = coords[:, view, :] / grid.stride
        cv = np.where(vis[:, view][:, None], cv, 0.0)  # sentinel never reaches sampling
        per_view_coords.append(cv)
        zs = attentional_sampling(grid, cv, params)
        sampled[view] = np.where(vis[:, view][:, None], zs, 0.0)
    propagated = track_transformer(TrackFeatures(sampled, vis), params)
    out = []
    for view, grid in enumerate(grids):
        out.append(attentional_splatting(grid, propagated.values[view],
                                         per_view_coords[view], vis[:, view], params))
    return out


# ---------------------------------------------------------------------------
# MVAP parameter files
# ---------------------------------------------------------------------------

_MATRIX_ORDER = ("w1", "b1", "w2", "b2", "wk", "wv", "wout")


def save_params(path, params: AttentionParams) -> None:
    """Binary MVAP format: magic "MVAP", little-endian uint32 version (=1) and
    dim, float32 sigma, then w1, b1, w2, b2, wk, wv, wout row-major float32."""
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<2If", PARAMS_VERSION, params.dim, params.sigma))
        for name in _MATRIX_ORDER:
            f.write(np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes())


def load_params(path) -> AttentionParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != PARAMS_MAGIC:
        raise ValueError(f"{path}: not an MVAP file")
    version, dim = struct.unpack_from("<2I", blob, 4)
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported MVAP version {version}")
    (sigma,) = struct.unpack_from("<f", blob, 12)
    shapes = {"w1": (2, dim), "b1": (dim,), "w2": (dim, dim), "b2": (dim,),
              "wk": (dim, dim), "wv": (dim, dim), "wout": (dim, dim)}
    offset = 16
    fields = {}
    for name in _MATRIX_ORDER:
        shape = shapes[name]
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        fields[name] = arr.reshape(shape).astype(np.float64)
        offset += 4 * count
    return AttentionParams(dim=dim, sigma=float(sigma), **fields)
