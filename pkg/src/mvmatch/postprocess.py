"""From dense per-group warps to SfM-ready multi-view tracks.

Per ordered image pair, the candidate warps from every group containing that
pair are pooled and the highest-confidence prediction wins pixelwise. A
forward-backward cycle check then discards matches whose round trip strays
more than eps_p pixels. Per group, a score map rewarding both track length
and confidence picks keypoints under NMS, and each surviving keypoint plus
its valid target correspondences becomes one track.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .grids import MISSING, DenseWarpField
from .tracks import TrackToken


@dataclass
class PairMatchBank:
    """Candidate warps for one ordered pair, one per group that covers it."""

    pair: tuple[int, int]
    candidates: list[DenseWarpField]
    group_ids: list[int]

    def select(self) -> tuple[DenseWarpField, np.ndarray]:
        warp, chosen = select_matches(self.candidates)
        return warp, chosen


@dataclass(frozen=True)
class ScoreMap:
    """S = L + C: per-pixel track length plus mean confidence of valid views."""

    length: np.ndarray       # (H, W) int
    mean_confidence: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        if self.length.shape != self.mean_confidence.shape:
            raise ValueError("length and confidence maps must share a shape")

    @property
    def scores(self) -> np.ndarray:
        return self.length + self.mean_confidence


def select_matches(candidates: list[DenseWarpField]) -> tuple[DenseWarpField, np.ndarray]:
    """Pixelwise argmax-confidence selection across candidate warps.

    Ties go to the lowest candidate index. Returns the selected warp and the
    per-pixel index of the winning candidate.
    """
    if not candidates:
        raise ValueError("empty match bank")
    first = candidates[0]
    if len(candidates) == 1:
        return first, np.zeros((first.height, first.width), dtype=np.int64)
    confs = np.stack([c.confidence for c in candidates])
    chosen = np.argmax(confs, axis=0)  # first max wins ties
    targets = np.stack([c.targets for c in candidates])
    h, w = first.height, first.width
    yy, xx = np.mgrid[0:h, 0:w]
    selected = DenseWarpField(targets[chosen, yy, xx],
                              confs[chosen, yy, xx],
                              first.source_view, first.target_view)
    return selected, chosen


def reciprocity_filter(forward: DenseWarpField, backward: DenseWarpField,
                       eps_p: float) -> np.ndarray:
    """Bidirectional consistency: keep pixels whose cycle error is within eps_p.

    The backward warp is evaluated at the (continuous) forward target by
    bilinear interpolation of its coordinate fields; forward targets that
    land outside the backward image are discarded outright.
    """
    h, w = forward.height, forward.width
    bh, bw = backward.height, backward.width
    tx = forward.targets[..., 0].ravel()
    ty = forward.targets[..., 1].ravel()
    inside = (tx >= 0) & (tx <= bw - 1) & (ty >= 0) & (ty <= bh - 1)
    back = kernels.bilinear_gather(backward.targets, tx, ty)
    ys, xs = np.mgrid[0:h, 0:w]
    here = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    err = np.linalg.norm(back - here, axis=1)
    keep = inside & (err <= eps_p)
    return keep.reshape(h, w)


def build_score_map(confidences: list[np.ndarray], keeps: list[np.ndarray],
                    tau: float) -> ScoreMap:
    """Track length = #targets with kept confidence above tau; C averages them."""
    if not confidences:
        raise ValueError("need at least one target view")
    valid = [k & (c > tau) for c, k in zip(confidences, keeps)]
    length = np.sum(valid, axis=0).astype(np.int64)
    total = np.sum([np.where(v, c, 0.0) for c, v in zip(confidences, valid)], axis=0)
    with np.errstate(invalid="ignore"):
        mean_conf = np.where(length > 0, total / np.maximum(length, 1), 0.0)
    return ScoreMap(length, mean_conf)


def nms_select(score: ScoreMap | np.ndarray, radius: int,
               max_keypoints: int | None = None) -> np.ndarray:
    """Greedy-by-score NMS; returns selected (x, y) pixels.

    No two selected pixels are within Chebyshev distance radius of each
    other; ties go to raster order; only strictly positive scores qualify.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    scores = score.scores if isinstance(score, ScoreMap) else np.asarray(score, dtype=np.float64)
    picked_yx = kernels.nms_greedy(scores, radius, max_keypoints or -1)
    return picked_yx[:, ::-1].copy()  # (y, x) -> (x, y)


def assemble_tracks(keypoints: np.ndarray, selected_warps: list[DenseWarpField],
                    keeps: list[np.ndarray], tau: float) -> list[TrackToken]:
    """One track per keypoint from the per-target selected warps.

    A target entry is present iff its confidence exceeds tau and the pixel
    passed the reciprocity check; keypoints with no valid target are dropped.
    Slot 0 is the source; slot v is selected_warps[v-1]'s target view.
    """
    tracks: list[TrackToken] = []
    nt = len(selected_warps)
    for kp in np.atleast_2d(keypoints):
        x, y = int(kp[0]), int(kp[1])
        coords = np.full(2 * (nt + 1), MISSING)
        vis = np.zeros(nt + 1, dtype=bool)
        coords[0:2] = (x, y)
        vis[0] = True
        for v, (warp, keep) in enumerate(zip(selected_warps, keeps), start=1):
            if keep[y, x] and warp.confidence[y, x] > tau:
                coords[2 * v:2 * v + 2] = warp.targets[y, x]
                vis[v] = True
        if vis[1:].any():
            tracks.append(TrackToken(coords, vis))
    return tracks


def postprocess_group(source: int, targets: list[int],
                      selected: dict[tuple[int, int], DenseWarpField],
                      keeps: dict[tuple[int, int], np.ndarray],
                      tau: float, nms_radius: int,
                      max_keypoints: int | None = None) -> list[TrackToken]:
    """Score-map keypoint sampling and track assembly for one group."""
    warps = [selected[(source, t)] for t in targets]
    keep_masks = [keeps[(source, t)] for t in targets]
    score = build_score_map([w.confidence for w in warps], keep_masks, tau)
    keypoints = nms_select(score, nms_radius, max_keypoints)
    return assemble_tracks(keypoints, warps, keep_masks, tau)


def match_statistics(keeps: dict[tuple[int, int], np.ndarray],
                     tracks_per_group: list[list[TrackToken]]) -> dict:
    """Kept-match rate plus a track-length histogram, JSON-ready."""
    total = sum(int(k.size) for k in keeps.values())
    kept = sum(int(k.sum()) for k in keeps.values())
    hist: dict[str, int] = {}
    for tracks in tracks_per_group:
        for t in tracks:
            key = str(int(t.visibility.sum()))
            hist[key] = hist.get(key, 0) + 1
    return {
        "kept_match_rate": (kept / total) if total else 0.0,
        "pairs": len(keeps),
        "track_count": sum(len(t) for t in tracks_per_group),
        "track_length_histogram": dict(sorted(hist.items())),
    }


def write_statistics(path, stats: dict) -> None:
    with open(path, "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
