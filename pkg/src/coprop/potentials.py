"""Local and pairwise potentials of the per-image foreground/background MRF.

Labels follow the +/-1 convention: y = +1 is foreground, y = -1 background.
Local potentials score each target part against the labeled parts of a seed
image; pairwise potentials are attractive couplings ``weight * y_i * y_j``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collection import CollectionGraph, ImageRecord, MatchTable, Part, multiscale_parts


@dataclass(frozen=True)
class CompatibilityParams:
    delta: float = 0.1
    top_k: int = 3
    tau: float = 4.0
    lambda_min: float = 0.2
    histogram_bins: int = 16

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass(frozen=True)
class EstimatedRegion:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def touches(self, pixels: np.ndarray) -> bool:
        d2 = ((np.asarray(pixels, float) - self.center) ** 2).sum(axis=1)
        return bool((d2 <= self.radius ** 2).any())


@dataclass(frozen=True)
class LocalPotentials:
    theta_f: np.ndarray
    theta_b: np.ndarray

    def as_table(self) -> np.ndarray:
        """(n, 2) table with column 0 for y = -1 and column 1 for y = +1."""
        return np.column_stack([self.theta_b, self.theta_f])


@dataclass(frozen=True)
class PairwisePotential:
    part_i: object
    part_j: object
    weight: float
    kind: str

    def value(self, y_i: int, y_j: int) -> float:
        return self.weight * y_i * y_j

    def table(self) -> np.ndarray:
        """2x2 table indexed by (label index of i, label index of j)."""
        w = self.weight
        return np.array([[w, -w], [-w, w]])


# ---------------------------------------------------------------------------
# compatibility terms

def p_corr(source_part: Part, target_part: Part, matches: MatchTable | None) -> float:
    """Fraction of the source part's pixels matched into the target part."""
    if matches is None or not len(matches.src_part):
        return 0.0
    n = matches.counts[np.ix_(list(source_part.members), list(target_part.members))].sum()
    return float(n) / source_part.size


def bhattacharyya(hist_a, hist_b) -> float:
    return float(np.sqrt(np.asarray(hist_a) * np.asarray(hist_b)).sum())


def bhattacharyya_matrix(hists_a: np.ndarray, hists_b: np.ndarray) -> np.ndarray:
    return np.sqrt(hists_a) @ np.sqrt(hists_b).T


def estimate_region(source_part: Part, anchor_src: np.ndarray, anchor_dst: np.ndarray,
                    target_points: np.ndarray | None = None) -> EstimatedRegion | None:
    """Map ``source_part`` into the target as a disc.

    The anchors closest to and farthest from the part centroid fix a relative
    scale; the centroid offset from the closest anchor is scaled and applied
    at that anchor's target position.  The radius is the distance from the
    center to the nearest target match point, at least one pixel.
    """
    anchor_src = np.asarray(anchor_src, float).reshape(-1, 2)
    anchor_dst = np.asarray(anchor_dst, float).reshape(-1, 2)
    if len(anchor_src) < 2:
        return None
    centroid = source_part.centroid
    dist = np.hypot(*(anchor_src - centroid).T)
    near = int(np.argmin(dist))
    others = dist.copy()
    others[near] = -np.inf
    far = int(np.argmax(others))
    src_span = np.hypot(*(anchor_src[far] - anchor_src[near]))
    if src_span == 0:
        # farthest anchor sits on the nearest one; use the one farthest from it instead
        far = int(np.argmax(np.hypot(*(anchor_src - anchor_src[near]).T)))
        src_span = np.hypot(*(anchor_src[far] - anchor_src[near]))
        if src_span == 0:
            return None
    scale = np.hypot(*(anchor_dst[far] - anchor_dst[near])) / src_span
    center = anchor_dst[near] + scale * (centroid - anchor_src[near])
    pts = anchor_dst if target_points is None else np.asarray(target_points, float)
    radius = max(1.0, float(np.hypot(*(pts - center).T).min()))
    return EstimatedRegion(center, radius)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]


def p_sim(target_index: int, source_part: Part, target: ImageRecord,
          params: CompatibilityParams, region: EstimatedRegion | None) -> float:
    """Appearance similarity, gated by histogram rank and the estimated disc."""
    if region is None:
        return 0.0
    hists = np.stack([p.histogram for p in target.parts])
    scores = bhattacharyya_matrix(source_part.histogram[None, :], hists)[0]
    if target_index not in top_k_indices(scores, params.top_k):
        return 0.0
    if not region.touches(target.parts[target_index].pixels):
        return 0.0
    return float(scores[target_index])


def p_comp(p_corr_value: float, p_sim_value: float, source_is_foreground: bool,
           delta: float) -> float:
    if source_is_foreground:
        return p_corr_value + delta * p_sim_value
    return p_corr_value


# ---------------------------------------------------------------------------
# local potentials

def seed_bag(seed: ImageRecord, base_labels, levels) -> tuple[list[Part], np.ndarray]:
    """Multi-scale seed parts with labels; mixed parts are dropped.

    Returns the parts and a bool array (True = foreground).
    """
    base_labels = np.asarray(base_labels, bool)
    parts, labels = [], []
    for part in multiscale_parts(seed, levels):
        vals = base_labels[list(part.members)]
        if vals.all():
            parts.append(part)
            labels.append(True)
        elif not vals.any():
            parts.append(part)
            labels.append(False)
    return parts, np.array(labels, dtype=bool)


def similarity_matrix(bag: list[Part], bag_fg: np.ndarray, target: ImageRecord,
                      matches: MatchTable | None, base_labels,
                      params: CompatibilityParams) -> np.ndarray:
    """p_sim for every (bag part, target base part); rows of background parts are 0."""
    out = np.zeros((len(bag), target.n_parts))
    if matches is None or not len(matches.src_part):
        return out
    fg_rows = np.asarray(base_labels, bool)[matches.src_part]
    anchor_src = matches.src_xy[fg_rows]
    anchor_dst = matches.dst_xy[fg_rows]
    if len(anchor_src) < 2:
        return out
    target_hists = np.stack([p.histogram for p in target.parts])
    fg_idx = np.flatnonzero(bag_fg)
    if not len(fg_idx):
        return out
    scores = bhattacharyya_matrix(np.stack([bag[s].histogram for s in fg_idx]), target_hists)
    for row, s in enumerate(fg_idx):
        region = estimate_region(bag[s], anchor_src, anchor_dst, matches.dst_xy)
        if region is None:
            continue
        for i in top_k_indices(scores[row], params.top_k):
            if region.touches(target.parts[i].pixels):
                out[s, i] = scores[row, i]
    return out


def local_potentials(seed_labels, seed: ImageRecord, target: ImageRecord,
                     matches: MatchTable | None, params: CompatibilityParams,
                     levels=()) -> LocalPotentials:
    """theta_f(i) = max over foreground seed parts of p_comp, theta_b likewise over background.

    ``seed_labels`` is a bool per seed base part; ``levels`` adds coarser
    parts from the seed's merge hierarchy to the candidate bag.
    """
    bag, bag_fg = seed_bag(seed, seed_labels, levels)
    if matches is None or not bag:
        zeros = np.zeros(target.n_parts)
        return LocalPotentials(zeros, zeros.copy())
    membership = np.zeros((len(bag), seed.n_parts))
    for r, part in enumerate(bag):
        membership[r, list(part.members)] = 1.0
    sizes = np.array([p.size for p in bag], dtype=float)
    corr = (membership @ matches.counts) / sizes[:, None]
    sim = similarity_matrix(bag, bag_fg, target, matches, seed_labels, params)
    comp = corr + params.delta * sim * bag_fg[:, None]
    theta_f = comp[bag_fg].max(axis=0) if bag_fg.any() else np.zeros(target.n_parts)
    theta_b = comp[~bag_fg].max(axis=0) if (~bag_fg).any() else np.zeros(target.n_parts)
    return LocalPotentials(theta_f, theta_b)


# ---------------------------------------------------------------------------
# pairwise potentials

def intra_weight(lambda_merge, params: CompatibilityParams) -> np.ndarray:
    return np.exp(-params.tau * (np.asarray(lambda_merge, float) - params.lambda_min))


def intra_pairwise(image: ImageRecord, edges: np.ndarray,
                   params: CompatibilityParams) -> list[PairwisePotential]:
    levels = [image.hierarchy.level(int(a), int(b)) for a, b in edges]
    weights = intra_weight(levels, params)
    return [PairwisePotential(int(a), int(b), float(w), "intra")
            for (a, b), w in zip(edges, weights)]


def inter_pairwise(graph: CollectionGraph, images=None) -> list[PairwisePotential]:
    """Cross-image couplings p_corr(i, j) + p_corr(j, i), optionally restricted to ``images``."""
    keep = None if images is None else set(images)
    ids = graph.image_ids
    out = []
    for ai, a in enumerate(ids):
        for b in ids[ai + 1:]:
            if keep is not None and not {a, b} <= keep:
                continue
            if (a, b) not in graph.image_adjacency:
                continue
            weight = np.zeros((graph.image(a).n_parts, graph.image(b).n_parts))
            if (a, b) in graph.matches:
                weight += graph.p_corr(a, b)
            if (b, a) in graph.matches:
                weight += graph.p_corr(b, a).T
            for i, j in zip(*np.nonzero(weight)):
                out.append(PairwisePotential((a, int(i)), (b, int(j)),
                                             float(weight[i, j]), "inter"))
    return out
