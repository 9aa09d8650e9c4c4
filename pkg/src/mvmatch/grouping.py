"""Two-stage construction of image groups for scene-scale processing.

Stage 1 builds groups under a global budget, greedily attaching targets with
a selection score that rewards overlap with the source and the targets
already picked, and soft-penalizes reuse of the same directed pair. Stage 2
adds the minimal extra groups so that every directed pair also exists in the
opposite direction, which the bidirectional consistency filter downstream
requires.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .grids import DenseWarpField

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageGroup:
    """One source index plus up to K target indices, processed jointly."""

    source: int
    targets: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if self.source in self.targets:
            raise ValueError("source must not appear among the targets")
        if len(set(self.targets)) != len(self.targets):
            raise ValueError("targets must be distinct")

    @property
    def views(self) -> tuple[int, ...]:
        """All views in group order: source first, then targets."""
        return (self.source,) + self.targets


@dataclass(frozen=True)
class OverlapMatrix:
    values: np.ndarray  # (M, M) in [0, 1]; diagonal ignored by consumers
    mode: str           # "visibility" or "descriptor"

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("overlap matrix must be square")
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("overlap entries must lie in [0, 1]")

    @property
    def num_images(self) -> int:
        return self.values.shape[0]


@dataclass
class PairUsage:
    """Directed pair selection counts plus pending reciprocity needs."""

    counts: np.ndarray               # (M, M) int
    pending: set = field(default_factory=set)  # directed pairs (j, i) still to create

    @classmethod
    def empty(cls, num_images: int) -> "PairUsage":
        return cls(np.zeros((num_images, num_images), dtype=np.int64))

    def record(self, source: int, target: int) -> None:
        self.counts[source, target] += 1
        self.pending.discard((source, target))
        if self.counts[target, source] == 0:
            self.pending.add((target, source))


@dataclass(frozen=True)
class GroupSamplerParams:
    max_targets: int = 4        # K
    tau: float = 0.3            # high-overlap threshold for neighbor counts
    tau_conf: float = 0.3       # confidence threshold for visibility overlap
    beta: float = 0.75          # source quota exponent
    alpha_src: float = 1.0
    alpha_tgt: float = 0.25
    lam: float = 1.0            # repeated-pair soft penalty
    half_budget: bool = False
    stochastic_seed: int | None = None  # None = deterministic round-robin sources


def default_budget(num_images: int, half: bool = False) -> int:
    """Group budget ~ M * sqrt(M), floored at M so every image can source once."""
    budget = math.ceil(num_images * math.sqrt(num_images))
    if half:
        budget = max(num_images, math.ceil(budget / 2))
    return max(budget, num_images)


def overlap_from_matches(warps: dict, num_images: int, tau_conf: float = 0.3) -> OverlapMatrix:
    """Visibility overlap: fraction of source pixels with confidence above tau_conf.

    ``warps`` maps ordered pairs (i, j) to DenseWarpField; missing pairs score 0.
    """
    values = np.zeros((num_images, num_images), dtype=np.float64)
    for (i, j), warp in warps.items():
        if i == j:
            continue
        values[i, j] = float(np.mean(warp.confidence > tau_conf))
    return OverlapMatrix(values, "visibility")


def overlap_from_descriptors(descriptors: np.ndarray) -> OverlapMatrix:
    """Descriptor overlap: pairwise cosine similarity, clamped to [0, 1]."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    norms = np.linalg.norm(descriptors, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm descriptor")
    unit = descriptors / norms[:, None]
    values = np.clip(unit @ unit.T, 0.0, 1.0)
    np.fill_diagonal(values, 1.0)
    return OverlapMatrix(values, "descriptor")


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation proportional to weights: floor + largest remainders."""
    quota = weights * (total / weights.sum())
    counts = np.floor(quota).astype(np.int64)
    rem = quota - counts
    short = total - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(weights)), -rem))
        counts[order[:short]] += 1
    return counts


def quotas_from_neighbor_counts(neighbors: np.ndarray, beta: float,
                                budget: int) -> np.ndarray:
    """Quotas proportional to (N_i + 1)^beta, summing to budget, floor 1."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie strictly between 0 and 1")
    neighbors = np.asarray(neighbors, dtype=np.float64)
    if budget < neighbors.shape[0]:
        raise ValueError(
            f"budget {budget} cannot give every image a source slot "
            f"(M={neighbors.shape[0]})")
    weights = (neighbors + 1.0) ** beta
    quotas = _largest_remainder(weights, budget)
    # enforce the floor by moving slots from the largest quotas
    while (quotas < 1).any():
        need = int(np.argmax(quotas < 1))
        donor = int(np.argmax(quotas))
        quotas[donor] -= 1
        quotas[need] += 1
    return quotas


def source_quotas(overlap: OverlapMatrix, tau: float, beta: float, budget: int) -> np.ndarray:
    """Per-image source quotas from the overlap matrix.

    N_i counts neighbors with overlap above tau; quotas follow
    (N_i + 1)^beta, normalized to sum exactly to ``budget`` with
    largest-remainder rounding and a floor of one group per image.
    """
    values = overlap.values.copy()
    np.fill_diagonal(values, 0.0)
    neighbors = (values > tau).sum(axis=1)
    return quotas_from_neighbor_counts(neighbors, beta, budget)


def _selection_scores(source: int, overlap: np.ndarray, current: list[int],
                      usage: PairUsage, params: GroupSamplerParams,
                      candidates: np.ndarray) -> np.ndarray:
    base = params.alpha_src * overlap[source, candidates]
    if current:
        base = base + params.alpha_tgt * overlap[np.array(current)][:, candidates].sum(axis=0)
    penalty = 1.0 + params.lam * usage.counts[source, candidates]
    return base / penalty


def build_group(source: int, overlap: OverlapMatrix, usage: PairUsage,
                params: GroupSamplerParams,
                candidate_pool: np.ndarray | None = None) -> ImageGroup:
    """Greedily attach up to K targets to ``source`` and record pair usage.

    Stops early when no remaining candidate has a positive score; a group with
    no targets is returned (with a warning) when there are no candidates at all.
    """
    m = overlap.num_images
    values = overlap.values
    chosen: list[int] = []
    if candidate_pool is None:
        pool = np.array([j for j in range(m) if j != source], dtype=np.int64)
    else:
        pool = np.array([j for j in candidate_pool if j != source], dtype=np.int64)
    while len(chosen) < params.max_targets:
        cands = np.array([j for j in pool if j not in chosen], dtype=np.int64)
        if cands.size == 0:
            break
        scores = _selection_scores(source, values, chosen, usage, params, cands)
        best = int(np.argmax(scores))  # argmax takes the first max: lowest index wins ties
        if scores[best] <= 0.0:
            break
        chosen.append(int(cands[best]))
    if not chosen:
        logger.warning("group for source %d has no targets", source)
    group = ImageGroup(source, tuple(chosen))
    for t in group.targets:
        usage.record(source, t)
    return group


def augment_reciprocity(groups: list[ImageGroup], overlap: OverlapMatrix,
                        usage: PairUsage, params: GroupSamplerParams) -> list[ImageGroup]:
    """Stage 2: extra groups so every directed pair exists in both directions.

    For each image with pending reciprocal needs a new group is created with
    that image as source; pending partners fill the target slots first
    (highest selection score first) and any leftover slots are filled by the
    same greedy score restricted to images already paired with the source in
    either direction, so no new one-sided pair is ever introduced.
    """
    extra: list[ImageGroup] = []
    while usage.pending:
        source = min(s for s, _ in usage.pending)
        partners = sorted(t for s, t in usage.pending if s == source)
        while partners:
            cands = np.array(partners, dtype=np.int64)
            scores = _selection_scores(source, overlap.values, [], usage, params, cands)
            order = np.lexsort((cands, -scores))
            first = [int(cands[k]) for k in order[:params.max_targets]]
            group = ImageGroup(source, tuple(first))
            for t in group.targets:
                usage.record(source, t)
            partners = [p for p in partners if p not in first]
            if not partners and len(first) < params.max_targets:
                # top up from already-connected images only
                connected = np.nonzero((usage.counts[source] > 0) | (usage.counts[:, source] > 0))[0]
                pool = np.array([j for j in connected if j != source and j not in first],
                                dtype=np.int64)
                extra_targets = list(first)
                while len(extra_targets) < params.max_targets and pool.size:
                    scores = _selection_scores(source, overlap.values, extra_targets,
                                               usage, params, pool)
                    best = int(np.argmax(scores))
                    if scores[best] <= 0.0:
                        break
                    pick = int(pool[best])
                    extra_targets.append(pick)
                    usage.record(source, pick)
                    pool = pool[pool != pick]
                group = ImageGroup(source, tuple(extra_targets))
            extra.append(group)
    return extra


def sample_groups(overlap: OverlapMatrix, params: GroupSamplerParams,
                  budget: int | None = None) -> tuple[list[ImageGroup], list[ImageGroup]]:
    """Run both stages; returns (stage-1 groups, stage-2 reciprocity groups).

    Sources are scheduled by a deterministic round-robin over the quota
    vector; ``params.stochastic_seed`` switches to seeded weighted sampling.
    """
    if budget is None:
        budget = default_budget(overlap.num_images, params.half_budget)
    quotas = source_quotas(overlap, params.tau, params.beta, budget)
    usage = PairUsage.empty(overlap.num_images)
    order: list[int] = []
    if params.stochastic_seed is None:
        remaining = quotas.copy()
        while remaining.sum() > 0:
            for i in range(overlap.num_images):
                if remaining[i] > 0:
                    order.append(i)
                    remaining[i] -= 1
    else:
        rng = np.random.Generator(np.random.PCG64(params.stochastic_seed))
        remaining = quotas.astype(np.float64)
        while remaining.sum() > 0:
            probs = remaining / remaining.sum()
            i = int(rng.choice(overlap.num_images, p=probs))
            order.append(i)
            remaining[i] -= 1
    stage1 = [build_group(src, overlap, usage, params) for src in order]
    stage2 = augment_reciprocity(stage1, overlap, usage, params)
    return stage1, stage2


def pair_adjacency(groups: list[ImageGroup], num_images: int) -> np.ndarray:
    """Directed-pair adjacency matrix implied by a set of groups."""
    adj = np.zeros((num_images, num_images), dtype=bool)
    for g in groups:
        for t in g.targets:
            adj[g.source, t] = True
    return adj


def write_group_manifest(path, stage1: list[ImageGroup], stage2: list[ImageGroup]) -> None:
    payload = {
        "groups": [
            {"source": g.source, "targets": list(g.targets), "stage": stage}
            for stage, groups in ((1, stage1), (2, stage2))
            for g in groups
        ]
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_group_manifest(path) -> list[tuple[ImageGroup, int]]:
    with open(path) as f:
        payload = json.load(f)
    return [(ImageGroup(g["source"], tuple(g["targets"])), g["stage"])
            for g in payload["groups"]]
