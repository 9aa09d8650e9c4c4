"""Multi-view track tokens from raw pairwise matches.

Raw matches are grouped into partitions sharing the same visibility mask,
cluster budgets are allocated proportionally to partition size, and k-means
picks one representative raw match per cluster. Representatives are always
real input matches, never synthetic centroids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .grids import MISSING
from .oracle import MatchSample

logger = logging.getLogger(__name__)

KMEANS_MAX_ITERS = 50
KMEANS_TOL = 1e-4


@dataclass(frozen=True)
class TrackToken:
    """One scene point's 2D positions across V views plus a visibility mask.

    ``coords`` stacks (x, y) per view into a 2V vector with -1 sentinels for
    missing views; slot 0 is the source view and is always visible.
    """

    coords: np.ndarray      # (2V,)
    visibility: np.ndarray  # (V,) bool

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1)
        vis = np.asarray(self.visibility, dtype=bool)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "visibility", vis)
        if coords.shape[0] != 2 * vis.shape[0]:
            raise ValueError("coords must hold (x, y) per view")
        if not vis[0]:
            raise ValueError("source view must be visible")
        if not vis[1:].any():
            raise ValueError("at least one target view must be visible")
        pts = coords.reshape(-1, 2)
        if np.any(pts[~vis] != MISSING):
            raise ValueError("invisible views must carry the -1 sentinel")
        if np.any(pts[vis] == MISSING):
            raise ValueError("visible views must carry real coordinates")

    @property
    def num_views(self) -> int:
        return self.visibility.shape[0]

    def view_coords(self, view: int) -> np.ndarray:
        return self.coords[2 * view:2 * view + 2]


@dataclass(frozen=True)
class VisibilityPartition:
    mask: tuple          # V-length tuple of 0/1
    members: np.ndarray  # raw-match indices sharing that mask

    @property
    def size(self) -> int:
        return self.members.shape[0]


def token_from_sample(sample: MatchSample) -> TrackToken:
    coords = np.where(sample.visibility[:, None], sample.target_pixels,
                      MISSING).reshape(-1)
    return TrackToken(coords, sample.visibility.copy())


def partition_by_visibility(raw: list[MatchSample]) -> list[VisibilityPartition]:
    """Group raw matches by identical visibility mask, lexicographic order."""
    if not raw:
        raise ValueError("no raw matches to partition")
    buckets: dict[tuple, list[int]] = {}
    for i, sample in enumerate(raw):
        key = tuple(int(v) for v in sample.visibility)
        buckets.setdefault(key, []).append(i)
    return [VisibilityPartition(mask, np.array(buckets[mask], dtype=np.int64))
            for mask in sorted(buckets)]


def allocate_clusters(partitions: list[VisibilityPartition], budget: int) -> tuple[np.ndarray, bool]:
    """Proportional cluster counts per partition, summing to min(budget, total).

    Largest-remainder rounding, ties broken by larger partition first and then
    lexicographic mask; counts exceeding a partition's size are capped and the
    surplus is redistributed. Returns (counts, capped) where ``capped`` flags a
    budget larger than the raw match count.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    sizes = np.array([p.size for p in partitions], dtype=np.int64)
    total = int(sizes.sum())
    capped = budget > total
    if capped:
        logger.warning("track budget %d exceeds %d raw matches; capping", budget, total)
    remaining = min(budget, total)
    counts = np.zeros(len(partitions), dtype=np.int64)
    active = sizes.copy()
    while remaining > 0:
        open_idx = np.nonzero(active > 0)[0]
        share = active[open_idx] * (remaining / active[open_idx].sum())
        alloc = np.floor(share).astype(np.int64)
        rem = share - alloc
        short = remaining - int(alloc.sum())
        if short > 0:
            masks = [partitions[i].mask for i in open_idx]
            order = sorted(range(len(open_idx)),
                           key=lambda k: (-rem[k], -active[open_idx[k]], masks[k]))
            for k in order[:short]:
                alloc[k] += 1
        counts[open_idx] += np.minimum(alloc, active[open_idx])
        active[open_idx] -= np.minimum(alloc, active[open_idx])
        remaining = min(budget, total) - int(counts.sum())
    return counts, capped


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[c] = points[pick]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    return centers


def kmeans(points: np.ndarray, k: int, seed: int,
           max_iters: int = KMEANS_MAX_ITERS, tol: float = KMEANS_TOL):
    """Seeded k-means++ plus Lloyd iterations; returns (centers, labels).

    Runs at most ``max_iters`` rounds or until the largest centroid movement
    drops below ``tol``. Emptied clusters are re-anchored at the farthest
    member of the largest cluster so exactly k clusters always survive.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k >= n:
        return points.copy(), np.arange(n, dtype=np.int64)
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = _kmeans_pp_init(points, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        counts = np.bincount(labels, minlength=k)
        for c in np.nonzero(counts == 0)[0]:
            donor = int(np.argmax(counts))
            members = np.nonzero(labels == donor)[0]
            far = members[int(np.argmax(d2[members, donor]))]
            labels[far] = c
            counts[donor] -= 1
            counts[c] += 1
        for c in range(k):
            new_centers[c] = points[labels == c].mean(axis=0)
        move = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if move < tol:
            break
    return centers, labels


def sample_tracks(raw: list[MatchSample], budget: int, seed: int,
                  normalize: bool = False) -> list[TrackToken]:
    """Clustering-based selection of representative tracks.

    Per visibility partition, k-means runs on the coordinate vectors
    restricted to the visible entries (all members share the mask, so the
    dimensionality is uniform); each cluster contributes the member closest
    to its centroid, ties to the lowest raw index. Output order is partition
    order then cluster index. ``normalize`` rescales coordinates to [0, 1]
    per axis before clustering (distance shaping only; emitted coordinates
    are always the raw ones).
    """
    if not raw:
        raise ValueError("no raw matches to sample from")
    partitions = partition_by_visibility(raw)
    counts, _ = allocate_clusters(partitions, budget)
    tokens: list[TrackToken] = []
    for part_idx, (part, k) in enumerate(zip(partitions, counts)):
        if k == 0:
            continue
        mask = np.asarray(part.mask, dtype=bool)
        vectors = np.stack([
            raw[i].target_pixels[mask].reshape(-1) for i in part.members
        ])
        if normalize:
            span = vectors.max(axis=0) - vectors.min(axis=0)
            span[span == 0] = 1.0
            feats = (vectors - vectors.min(axis=0)) / span
        else:
            feats = vectors
        centers, labels = kmeans(feats, int(k), seed=seed + part_idx)
        for c in range(int(min(k, part.size))):
            members = np.nonzero(labels == c)[0]
            d = np.linalg.norm(feats[members] - centers[c], axis=1)
            best = members[int(np.argmin(d))]  # argmin: lowest local index wins ties
            tokens.append(token_from_sample(raw[part.members[best]]))
    return tokens


# ---------------------------------------------------------------------------
# TSV track files
# ---------------------------------------------------------------------------

def write_tracks_tsv(path, tracks: list[TrackToken], num_views: int | None = None) -> None:
    """One row per (token, view) observation: token_id, view_id, x, y.

    Visibility is implied by row presence; the header line records V and T.
    """
    if num_views is None:
        num_views = tracks[0].num_views if tracks else 0
    with open(path, "w") as f:
        f.write(f"# V={num_views}\tT={len(tracks)}\n")
        f.write("token_id\tview_id\tx\ty\n")
        for tid, track in enumerate(tracks):
            pts = track.coords.reshape(-1, 2)
            for view in range(track.num_views):
                if track.visibility[view]:
                    f.write(f"{tid}\t{view}\t{pts[view, 0]:.6f}\t{pts[view, 1]:.6f}\n")


def read_tracks_tsv(path) -> tuple[list[TrackToken], int]:
    with open(path) as f:
        header = f.readline()
        if not header.startswith("# V="):
            raise ValueError(f"{path}: missing track-file header")
        fields = header[2:].split()
        num_views = int(fields[0].split("=")[1])
        f.readline()  # column names
        rows: dict[int, list[tuple[int, float, float]]] = {}
        for line in f:
            if not line.strip():
                continue
            tid_s, view_s, x_s, y_s = line.split("\t")
            rows.setdefault(int(tid_s), []).append((int(view_s), float(x_s), float(y_s)))
    tracks = []
    for tid in sorted(rows):
        coords = np.full(2 * num_views, MISSING)
        vis = np.zeros(num_views, dtype=bool)
        for view, x, y in rows[tid]:
            coords[2 * view] = x
            coords[2 * view + 1] = y
            vis[view] = True
        tracks.append(TrackToken(coords, vis))
    return tracks, num_views
