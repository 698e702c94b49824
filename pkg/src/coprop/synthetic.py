"""Synthetic co-located image collections with planted ground truth.

Every image is a view of one world: the background is a colored Voronoi
mosaic seen through a per-image scale and offset, and a banded foreground
object is placed independently in each view.  Parts are Voronoi cells split
along color-region boundaries, so every part is pure foreground or pure
background.  Correspondences map pixels through the planted transforms;
whole source parts are dropped at the dropout rate and random false matches
are injected on top.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .collection import (MIN_PART_PIXELS, Correspondence, CollectionGraph, adjacent_pairs,
                         build_image, build_parts_graph, save_collection)

SHAPES = ("ellipse", "rectangle", "blob")
TOPOLOGIES = ("complete", "chain", "star", "random")


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 5
    width: int = 48
    height: int = 48
    part_size: int = 6
    shape: str = "ellipse"
    object_scale: float = 0.28
    appearance_noise: float = 0.1
    dropout: float = 0.0
    false_match_rate: float = 0.0
    low_confidence_rate: float = 0.1
    topology: str = "complete"
    edge_prob: float = 0.5
    scale_jitter: float = 0.15
    working_level: float = 0.15
    seed_levels: tuple = (0.3, 0.5, 0.7)
    template: int = 0

    def validate(self) -> None:
        if self.n_images < 1 or self.width < 8 or self.height < 8:
            raise InfeasibleSpec("need at least one image of at least 8x8 pixels")
        if self.shape not in SHAPES:
            raise InfeasibleSpec(f"shape must be one of {SHAPES}")
        if self.topology not in TOPOLOGIES:
            raise InfeasibleSpec(f"topology must be one of {TOPOLOGIES}")
        if not 0 <= self.dropout <= 1 or self.false_match_rate < 0:
            raise InfeasibleSpec("dropout must lie in [0,1], false_match_rate >= 0")
        if not 0 <= self.template < self.n_images:
            raise InfeasibleSpec("template index out of range")
        extent = 2 * _shape_extent(self.shape) * self.object_scale * min(self.width, self.height)
        if extent * (1 + self.scale_jitter) + 4 > min(self.width, self.height):
            raise InfeasibleSpec("foreground object does not fit inside the grid")

    @classmethod
    def from_json(cls, path) -> SyntheticSpec:
        data = json.loads(Path(path).read_text())
        if "seed_levels" in data:
            data["seed_levels"] = tuple(data["seed_levels"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InfeasibleSpec(f"unknown generator fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SyntheticCollection:
    graph: CollectionGraph
    truth_masks: dict[str, np.ndarray]
    truth_parts: dict[str, np.ndarray] = field(default_factory=dict)


def _shape_extent(shape: str) -> float:
    return 1.2 if shape == "blob" else 1.0


def _inside(shape: str, ux, uy, phase: float):
    if shape == "ellipse":
        return ux ** 2 + (uy / 0.75) ** 2 <= 1.0
    if shape == "rectangle":
        return (np.abs(ux) <= 1.0) & (np.abs(uy) <= 0.75)
    r = np.hypot(ux, uy / 0.8)
    theta = np.arctan2(uy, ux)
    return r <= 1.0 + 0.2 * np.sin(3 * theta + phase)


def _palettes(rng, n_fg=3, n_bg=5, min_gap=90.0):
    colors: list[np.ndarray] = []
    while len(colors) < n_fg + n_bg:
        c = rng.uniform(20, 235, 3)
        if all(np.linalg.norm(c - o) >= min_gap for o in colors):
            colors.append(c)
    return np.array(colors[:n_fg]), np.array(colors[n_fg:])


def _ultrametric(n_parts, pairs, raw):
    """Single-linkage merge level for each adjacent pair."""
    parent = list(range(n_parts))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    level = {}
    for k in np.argsort(raw, kind="stable"):
        a, b = int(pairs[k, 0]), int(pairs[k, 1])
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        parent[ra] = rb
        for (x, y) in pairs:
            x, y = int(x), int(y)
            if (x, y) not in level and find(x) == find(y):
                level[(x, y)] = float(raw[k])
    return level


def _oversegment(rng, region, truth, part_size):
    """Voronoi cells split by color regions; tiny pieces fold into a same-class neighbor."""
    h, w = region.shape
    gy = np.arange(part_size / 2, h, part_size)
    gx = np.arange(part_size / 2, w, part_size)
    seeds = np.array([(x, y) for y in gy for x in gx], float)
    seeds += rng.uniform(-part_size / 3, part_size / 3, seeds.shape)
    ys, xs = np.indices((h, w))
    d2 = (xs[..., None] - seeds[:, 0]) ** 2 + (ys[..., None] - seeds[:, 1]) ** 2
    cell = np.argmin(d2, axis=2)
    key = cell * 64 + region
    labels = np.zeros((h, w), np.int64)
    next_id = 1
    for k in np.unique(key):
        comp, n = ndimage.label(key == k)
        for c in range(1, n + 1):
            labels[comp == c] = next_id
            next_id += 1
    while True:
        ids, counts = np.unique(labels, return_counts=True)
        small = ids[counts < MIN_PART_PIXELS]
        if not len(small):
            break
        pid = small[0]
        size = dict(zip(ids.tolist(), counts.tolist()))
        cls = truth[labels == pid][0]
        pairs = adjacent_pairs(labels)
        nbrs = sorted({int(b) if a == pid else int(a) for a, b in pairs if pid in (a, b)})
        same = [n for n in nbrs if truth[labels == n][0] == cls]
        pool = same or nbrs
        target = max(pool, key=lambda n: (size[n], -n))
        labels[labels == pid] = target
    _, labels = np.unique(labels, return_inverse=True)
    return labels.reshape(h, w) + 1


def generate_synthetic_collection(spec: SyntheticSpec, rng_seed: int) -> SyntheticCollection:
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    W, H = spec.width, spec.height
    fg_palette, bg_palette = _palettes(rng)
    radius = spec.object_scale * min(W, H)
    phase = float(rng.uniform(0, 2 * np.pi))
    world_pts = rng.uniform([-0.5 * W, -0.5 * H], [1.5 * W, 1.5 * H], (24, 2))
    world_col = rng.integers(0, len(bg_palette), len(world_pts))

    views = []
    for _ in range(spec.n_images):
        s = float(rng.uniform(1 - spec.scale_jitter, 1 + spec.scale_jitter))
        t = rng.uniform(-0.15, 0.15, 2) * [W, H]
        half = _shape_extent(spec.shape) * radius * s + 2
        c = np.array([rng.uniform(half, W - half), rng.uniform(half, H - half)])
        views.append((s, t, c))

    names = [f"img{k:02d}" for k in range(spec.n_images)]
    ys, xs = np.indices((H, W))
    images, truth, truth_parts, regions = [], {}, {}, []
    for k, (s, t, c) in enumerate(views):
        ux = (xs - c[0]) / (s * radius)
        uy = (ys - c[1]) / (s * radius)
        fg = _inside(spec.shape, ux, uy, phase)
        band = np.digitize(uy, [-0.25, 0.25])
        wx, wy = (xs - t[0]) / s, (ys - t[1]) / s
        d2 = (wx[..., None] - world_pts[:, 0]) ** 2 + (wy[..., None] - world_pts[:, 1]) ** 2
        cell = np.argmin(d2, axis=2)
        region = np.where(fg, band, 3 + cell)
        color = np.where(fg[..., None], fg_palette[band], bg_palette[world_col[cell]])
        rgb = color + rng.normal(0, spec.appearance_noise * 255, color.shape)
        rgb = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
        labels = _oversegment(rng, region, fg, spec.part_size)

        pairs = adjacent_pairs(labels)
        n_parts = int(labels.max())
        part_region = ndimage.labeled_comprehension(region, labels, np.arange(1, n_parts + 1),
                                                    lambda v: np.bincount(v).argmax(), int, 0)
        part_fg = ndimage.labeled_comprehension(fg, labels, np.arange(1, n_parts + 1),
                                                lambda v: v.mean() > 0.5, bool, False)
        raw = np.empty(len(pairs))
        for e, (a, b) in enumerate(pairs):
            ra, rb = part_region[a - 1], part_region[b - 1]
            if ra == rb:
                raw[e] = rng.uniform(0.16, 0.35)
            elif part_fg[a - 1] == part_fg[b - 1]:
                raw[e] = rng.uniform(0.35, 0.6)
            else:
                raw[e] = rng.uniform(0.7, 0.95)
        levels = _ultrametric(n_parts + 1, pairs, raw)
        merges = {}
        for (a, b), lvl in levels.items():
            merges[(a, b)] = lvl
            merges[(b, a)] = lvl
        mask = fg if k == spec.template else None
        images.append(build_image(names[k], labels, merges, rgb=rgb, template_mask=mask,
                                  working_level=spec.working_level))
        truth[names[k]] = fg
        truth_parts[names[k]] = part_fg
        regions.append(fg)

    links = _topology(spec, rng)
    corrs = []
    for a, b in links:
        for src, dst in ((a, b), (b, a)):
            corrs.append(_correspond(spec, rng, names, views, regions, images, src, dst, radius))
    graph = build_parts_graph(images, corrs, 0.5, names[spec.template],
                              spec.seed_levels, spec.working_level)
    return SyntheticCollection(graph, truth, truth_parts)


def _topology(spec: SyntheticSpec, rng) -> list[tuple[int, int]]:
    n = spec.n_images
    if spec.topology == "complete":
        return [(a, b) for a in range(n) for b in range(a + 1, n)]
    if spec.topology == "chain":
        return [(a, a + 1) for a in range(n - 1)]
    if spec.topology == "star":
        return [(spec.template, b) for b in range(n) if b != spec.template]
    links = {(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < spec.edge_prob}
    order = rng.permutation(n)
    for a, b in zip(order[:-1], order[1:]):
        links.add((min(a, b), max(a, b)))
    return sorted((int(a), int(b)) for a, b in links)


def _correspond(spec, rng, names, views, fgs, images, src, dst, radius) -> Correspondence:
    H, W = spec.height, spec.width
    (s1, t1, c1), (s2, t2, c2) = views[src], views[dst]
    ys, xs = np.indices((H, W))
    fg = fgs[src]
    obj_x = c2[0] + s2 * (xs - c1[0]) / s1
    obj_y = c2[1] + s2 * (ys - c1[1]) / s1
    bg_x = s2 * (xs - t1[0]) / s1 + t2[0]
    bg_y = s2 * (ys - t1[1]) / s1 + t2[1]
    tx = np.rint(np.where(fg, obj_x, bg_x)).astype(np.int64)
    ty = np.rint(np.where(fg, obj_y, bg_y)).astype(np.int64)
    ok = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H)
    ok &= fgs[dst][np.clip(ty, 0, H - 1), np.clip(tx, 0, W - 1)] == fg
    labels = images[src].labels
    kept_parts = rng.random(images[src].n_parts) >= spec.dropout
    ok &= kept_parts[labels]
    sy, sx = np.nonzero(ok)
    n = len(sx)
    conf = rng.uniform(0.55, 1.0, n)
    low = rng.random(n) < spec.low_confidence_rate
    conf[low] = rng.uniform(0.0, 0.5, int(low.sum()))
    rows = np.column_stack([sx, sy, tx[sy, sx], ty[sy, sx], conf])
    n_false = int(round(spec.false_match_rate * n))
    if n_false:
        fake = np.column_stack([rng.integers(0, W, n_false), rng.integers(0, H, n_false),
                                rng.integers(0, W, n_false), rng.integers(0, H, n_false),
                                rng.uniform(0.55, 1.0, n_false)])
        rows = np.concatenate([rows, fake])
    return Correspondence(names[src], names[dst], rows.astype(float))


def write_synthetic(collection: SyntheticCollection, out_dir, spec: SyntheticSpec | None = None,
                    seed: int | None = None) -> Path:
    path = save_collection(collection.graph, out_dir, collection.truth_masks)
    if spec is not None:
        meta = {"spec": asdict(spec), "seed": seed}
        meta["spec"]["seed_levels"] = list(spec.seed_levels)
        (Path(out_dir) / "generator.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path
