"""Data model of a part-decomposed image collection and its propagation graph.

A collection is a set of images, each tiled by base parts at a working level
of a merge hierarchy, plus directed pixel correspondences between image
pairs.  ``build_parts_graph`` assembles the parts-level graph (intra-image
4-adjacency plus inter-image correspondence edges) and its projection onto
images.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io

log = logging.getLogger(__name__)

HIST_BINS = 16
HIST_SIZE = HIST_BINS ** 3
MIN_PART_PIXELS = 4
DEFAULT_WORKING_LEVEL = 0.15
DEFAULT_CONFIDENCE = 0.5


class CollectionError(ValueError):
    """Raised when collection inputs are inconsistent."""


@dataclass(frozen=True)
class PixelGrid:
    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise CollectionError("grid dimensions must be positive")
        if np.shape(self.values) != (self.height, self.width):
            raise CollectionError(
                f"grid values have shape {np.shape(self.values)}, "
                f"expected {(self.height, self.width)}")


@dataclass(frozen=True, eq=False)
class Part:
    """An image region.  ``pixels`` holds (x, y) coordinates, one row per pixel.

    ``members`` lists the base-part indices the part is made of; a base part
    is its own single member.
    """
    id: int
    image_id: str
    pixels: np.ndarray
    histogram: np.ndarray
    level: float
    members: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return len(self.pixels)

    @property
    def centroid(self) -> np.ndarray:
        return self.pixels.mean(axis=0)


@dataclass(frozen=True, eq=False)
class MergeHierarchy:
    """Merge levels between base parts, keyed by base-part index pairs."""
    image_id: str
    base_parts: tuple[Part, ...]
    merge_level: dict[tuple[int, int], float]
    working_level: float = DEFAULT_WORKING_LEVEL

    def level(self, a: int, b: int) -> float:
        # pairs missing from the table never merge below the root
        return self.merge_level.get((a, b), 1.0)

    def groups_at(self, threshold: float) -> list[tuple[int, ...]]:
        """Regions obtained by thresholding the hierarchy at ``threshold``."""
        parent = list(range(len(self.base_parts)))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for (a, b), lvl in sorted(self.merge_level.items()):
            if a < b and lvl <= threshold:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
        groups: dict[int, list[int]] = {}
        for idx in range(len(self.base_parts)):
            groups.setdefault(find(idx), []).append(idx)
        return sorted(tuple(g) for g in groups.values())


@dataclass(frozen=True)
class Correspondence:
    """Directed pixel matches; ``pixel_pairs`` rows are ``sx sy dx dy confidence``."""
    source_image: str
    target_image: str
    pixel_pairs: np.ndarray

    def __post_init__(self):
        conf = np.asarray(self.pixel_pairs).reshape(-1, 5)[:, 4]
        if ((conf < 0) | (conf > 1)).any():
            raise CollectionError(
                f"confidence outside [0,1] in {self.source_image}->{self.target_image}")


@dataclass(frozen=True, eq=False)
class ImageRecord:
    id: str
    width: int
    height: int
    labels: np.ndarray            # base-part index per pixel
    parts: tuple[Part, ...]
    hierarchy: MergeHierarchy
    template_mask: np.ndarray | None = None
    rgb: np.ndarray | None = None

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([p.size for p in self.parts], dtype=float)

    def rasterize(self, part_labels) -> np.ndarray:
        """Per-pixel mask from per-base-part booleans."""
        return np.asarray(part_labels, dtype=bool)[self.labels]


@dataclass(frozen=True)
class TemplateSeed:
    image_id: str
    labels: np.ndarray            # bool per base part, True = foreground


@dataclass(frozen=True, eq=False)
class MatchTable:
    """Thresholded matches for one directed image pair, resolved to base parts.

    ``counts[s, i]`` is the number of distinct source pixels of base part s
    matched into target base part i.
    """
    source_image: str
    target_image: str
    src_xy: np.ndarray
    dst_xy: np.ndarray
    src_part: np.ndarray
    dst_part: np.ndarray
    counts: np.ndarray


@dataclass(frozen=True, eq=False)
class CollectionGraph:
    images: tuple[ImageRecord, ...]
    intra_edges: dict[str, np.ndarray]
    inter_edges: tuple[tuple[str, int, str, int, float], ...]
    image_adjacency: dict[tuple[str, str], float]
    matches: dict[tuple[str, str], MatchTable]
    correspondences: tuple[Correspondence, ...] = ()
    template_id: str | None = None
    confidence_threshold: float = DEFAULT_CONFIDENCE
    working_level: float = DEFAULT_WORKING_LEVEL
    seed_levels: tuple[float, ...] = ()
    unreachable: tuple[str, ...] = ()
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index.update({img.id: k for k, img in enumerate(self.images)})

    @property
    def image_ids(self) -> list[str]:
        return [img.id for img in self.images]

    def image(self, image_id: str) -> ImageRecord:
        return self.images[self._index[image_id]]

    def neighbors(self, image_id: str) -> list[str]:
        return sorted({b for (a, b) in self.image_adjacency if a == image_id})

    def template_seed(self) -> TemplateSeed:
        if self.template_id is None:
            raise CollectionError("collection has no template image")
        return TemplateSeed(self.template_id,
                            template_part_labels(self.image(self.template_id)))

    def p_corr(self, source_image: str, target_image: str) -> np.ndarray:
        """Matrix of p_corr(i, s) = N(i, s)/|s| indexed ``[s, i]`` for base parts."""
        table = self.matches.get((source_image, target_image))
        src = self.image(source_image)
        if table is None:
            return np.zeros((src.n_parts, self.image(target_image).n_parts))
        return table.counts / src.sizes[:, None]


# ---------------------------------------------------------------------------
# image construction

def rgb_histogram(rgb_pixels: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Normalized joint RGB histogram with ``bins`` bins per channel."""
    q = (np.asarray(rgb_pixels, dtype=np.int64) * bins) // 256
    flat = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    hist = np.bincount(flat, minlength=bins ** 3).astype(float)
    return hist / hist.sum()


def adjacent_pairs(labels: np.ndarray) -> np.ndarray:
    """Sorted unique pairs (a, b), a < b, of 4-adjacent distinct labels."""
    pairs = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        pairs.append(np.stack([a[diff], b[diff]], axis=1))
    allp = np.concatenate(pairs)
    if not len(allp):
        return np.zeros((0, 2), dtype=np.int64)
    allp = np.sort(allp, axis=1)
    return np.unique(allp, axis=0)


def _merge_small_parts(labels, merges, hists):
    """Fold parts under MIN_PART_PIXELS pixels into their largest neighbor."""
    labels = labels.copy()
    merges = dict(merges)
    hists = dict(hists) if hists is not None else None
    while True:
        ids, counts = np.unique(labels, return_counts=True)
        if len(ids) < 2:
            break
        size = dict(zip(ids.tolist(), counts.tolist()))
        small = [pid for pid in ids.tolist() if size[pid] < MIN_PART_PIXELS]
        if not small:
            break
        pid = small[0]
        pairs = adjacent_pairs(labels)
        nbrs = sorted({int(b) if a == pid else int(a) for a, b in pairs if pid in (a, b)})
        if not nbrs:
            break
        target = max(nbrs, key=lambda n: (size[n], -n))
        labels[labels == pid] = target
        if hists is not None and pid in hists and target in hists:
            w1, w2 = size[pid], size[target]
            hists[target] = (hists[target] * w2 + hists[pid] * w1) / (w1 + w2)
            hists.pop(pid)
        # the merged region joins each other neighbor at the lower of the two levels
        for (a, b), lvl in list(merges.items()):
            if a == pid and b != target:
                key = (target, b)
                merges[key] = min(merges.get(key, lvl), lvl)
                merges[(b, target)] = merges[key]
        merges = {k: v for k, v in merges.items() if pid not in k}
    return labels, merges, hists


def build_image(image_id: str, label_grid: np.ndarray, merge_table: dict,
                rgb: np.ndarray | None = None,
                histograms: dict[int, np.ndarray] | None = None,
                template_mask: np.ndarray | None = None,
                working_level: float = DEFAULT_WORKING_LEVEL) -> ImageRecord:
    """Validate raw per-image inputs and build the base parts and hierarchy."""
    label_grid = np.asarray(label_grid, dtype=np.int64)
    height, width = label_grid.shape
    PixelGrid(width, height, label_grid)
    present = set(np.unique(label_grid).tolist())
    for a, b in merge_table:
        if a not in present or b not in present:
            raise CollectionError(
                f"{image_id}: merge table references part {a if a not in present else b} "
                "absent from the label grid")
    for (a, b), lvl in merge_table.items():
        if not (working_level <= lvl <= 1.0):
            raise CollectionError(
                f"{image_id}: merge level {lvl} for ({a},{b}) outside [{working_level}, 1]")
        if merge_table.get((b, a), lvl) != lvl:
            raise CollectionError(f"{image_id}: asymmetric merge level for ({a},{b})")
    if rgb is None and histograms is None:
        raise CollectionError(f"{image_id}: need an RGB grid or a histogram table")
    if rgb is not None and np.shape(rgb)[:2] != (height, width):
        raise CollectionError(f"{image_id}: RGB grid does not match label grid size")
    if histograms is not None:
        missing = present - set(histograms)
        if missing:
            raise CollectionError(f"{image_id}: no histogram for parts {sorted(missing)}")
    if template_mask is not None and np.shape(template_mask) != (height, width):
        raise CollectionError(f"{image_id}: template mask dimensions mismatch")

    label_grid, merge_table, histograms = _merge_small_parts(
        label_grid, merge_table, histograms)

    ids = np.unique(label_grid)
    index = np.searchsorted(ids, label_grid)
    ys, xs = np.indices(label_grid.shape)
    order = np.argsort(index, axis=None, kind="stable")
    flat_idx = index.ravel()[order]
    bounds = np.searchsorted(flat_idx, np.arange(len(ids) + 1))
    coords = np.stack([xs.ravel()[order], ys.ravel()[order]], axis=1)
    parts = []
    for k, pid in enumerate(ids.tolist()):
        pix = coords[bounds[k]:bounds[k + 1]]
        if rgb is not None:
            hist = rgb_histogram(rgb[pix[:, 1], pix[:, 0]])
        else:
            hist = np.asarray(histograms[pid], dtype=float)
            if hist.shape != (HIST_SIZE,) or (hist < 0).any():
                raise CollectionError(f"{image_id}: malformed histogram for part {pid}")
            hist = hist / hist.sum()
        pix.setflags(write=False)
        hist.setflags(write=False)
        parts.append(Part(pid, image_id, pix, hist, working_level, (k,)))
    id_to_idx = {pid: k for k, pid in enumerate(ids.tolist())}
    levels = {(id_to_idx[a], id_to_idx[b]): float(lvl) for (a, b), lvl in merge_table.items()}
    index.setflags(write=False)
    hierarchy = MergeHierarchy(image_id, tuple(parts), levels, working_level)
    return ImageRecord(image_id, width, height, index, tuple(parts), hierarchy,
                       None if template_mask is None else np.asarray(template_mask, bool),
                       None if rgb is None else np.asarray(rgb, np.uint8))


def template_part_labels(image: ImageRecord) -> np.ndarray:
    """Majority vote of the template mask inside each base part."""
    if image.template_mask is None:
        raise CollectionError(f"{image.id} has no template mask")
    fg = np.bincount(image.labels.ravel(), weights=image.template_mask.ravel().astype(float),
                     minlength=image.n_parts)
    return fg > image.sizes / 2


def multiscale_parts(image: ImageRecord, levels) -> list[Part]:
    """Bag of parts at every level in ``levels`` (duplicates removed)."""
    seen: dict[tuple[int, ...], Part] = {}
    for p in image.parts:
        seen[p.members] = p
    for lvl in sorted(levels):
        for group in image.hierarchy.groups_at(lvl):
            if group in seen:
                continue
            members = [image.parts[k] for k in group]
            sizes = np.array([m.size for m in members], dtype=float)
            hist = sum(m.histogram * s for m, s in zip(members, sizes)) / sizes.sum()
            pixels = np.concatenate([m.pixels for m in members])
            seen[group] = Part(-1 - len(seen), image.id, pixels, hist, float(lvl), group)
    return sorted(seen.values(), key=lambda p: (len(p.members), p.members))


# ---------------------------------------------------------------------------
# graph assembly

def _match_table(src: ImageRecord, dst: ImageRecord, rows: np.ndarray) -> MatchTable:
    sx, sy = rows[:, 0].astype(np.int64), rows[:, 1].astype(np.int64)
    dx, dy = rows[:, 2].astype(np.int64), rows[:, 3].astype(np.int64)
    src_part = src.labels[sy, sx]
    dst_part = dst.labels[dy, dx]
    # one vote per (source pixel, target part)
    key = np.stack([sy * src.width + sx, dst_part], axis=1)
    _, first = np.unique(key, axis=0, return_index=True) if len(key) else (None, np.zeros(0, int))
    counts = np.zeros((src.n_parts, dst.n_parts))
    np.add.at(counts, (src_part[first], dst_part[first]), 1.0)
    src_xy = np.stack([sx, sy], axis=1).astype(float)
    dst_xy = np.stack([dx, dy], axis=1).astype(float)
    for arr in (src_xy, dst_xy, src_part, dst_part, counts):
        arr.setflags(write=False)
    return MatchTable(src.id, dst.id, src_xy, dst_xy, src_part, dst_part, counts)


def build_parts_graph(images, correspondences, confidence_threshold: float = DEFAULT_CONFIDENCE,
                      template_id: str | None = None, seed_levels=(),
                      working_level: float | None = None) -> CollectionGraph:
    """Assemble the parts-level and image-level graphs.

    Only matches whose confidence strictly exceeds ``confidence_threshold``
    are kept.  Inter edges join base parts of different images with weight
    p_corr(i, j) + p_corr(j, i).
    """
    images = tuple(sorted(images, key=lambda im: im.id))
    by_id = {im.id: im for im in images}
    if len(by_id) != len(images):
        raise CollectionError("duplicate image ids")
    intra = {}
    for im in images:
        pairs = adjacent_pairs(im.labels)
        pairs.setflags(write=False)
        intra[im.id] = pairs

    matches: dict[tuple[str, str], MatchTable] = {}
    for corr in correspondences:
        for name in (corr.source_image, corr.target_image):
            if name not in by_id:
                raise CollectionError(f"correspondence references unknown image {name!r}")
        if corr.source_image == corr.target_image:
            raise CollectionError(f"self-correspondence for {corr.source_image!r}")
        src, dst = by_id[corr.source_image], by_id[corr.target_image]
        rows = np.asarray(corr.pixel_pairs, dtype=float).reshape(-1, 5)
        for (x, y, w, h, what) in ((rows[:, 0], rows[:, 1], src.width, src.height, "source"),
                                   (rows[:, 2], rows[:, 3], dst.width, dst.height, "target")):
            bad = (x < 0) | (x >= w) | (y < 0) | (y >= h) | (x != np.round(x)) | (y != np.round(y))
            if bad.any():
                raise CollectionError(
                    f"{corr.source_image}->{corr.target_image}: {what} coordinate out of grid bounds")
        rows = rows[rows[:, 4] > confidence_threshold]
        key = (src.id, dst.id)
        if key in matches:
            rows = np.concatenate([np.column_stack([matches[key].src_xy, matches[key].dst_xy,
                                                    np.ones(len(matches[key].src_xy))]), rows])
        matches[key] = _match_table(src, dst, rows)

    inter = []
    adjacency: dict[tuple[str, str], float] = {}
    for ai, a in enumerate(images):
        for b in images[ai + 1:]:
            weight = np.zeros((a.n_parts, b.n_parts))
            if (a.id, b.id) in matches:
                # N(j, i)/|i| for source part i of a, target j of b
                weight += matches[(a.id, b.id)].counts / a.sizes[:, None]
            if (b.id, a.id) in matches:
                weight += (matches[(b.id, a.id)].counts / b.sizes[:, None]).T
            ii, jj = np.nonzero(weight)
            if not len(ii):
                continue
            for i, j in zip(ii.tolist(), jj.tolist()):
                inter.append((a.id, i, b.id, j, float(weight[i, j])))
            total = float(weight[ii, jj].sum())
            adjacency[(a.id, b.id)] = total
            adjacency[(b.id, a.id)] = total

    unreachable: tuple[str, ...] = ()
    if template_id is not None:
        if template_id not in by_id:
            raise CollectionError(f"template image {template_id!r} not in collection")
        reach = reachable_images(adjacency, template_id)
        unreachable = tuple(sorted(set(by_id) - reach))
        if unreachable:
            log.warning("images unreachable from template %s: %s",
                        template_id, ", ".join(unreachable))
    if working_level is None:
        working_level = images[0].hierarchy.working_level if images else DEFAULT_WORKING_LEVEL
    return CollectionGraph(images, intra, tuple(inter), adjacency, matches,
                           tuple(correspondences), template_id, confidence_threshold,
                           working_level, tuple(seed_levels), unreachable)


def with_template(graph: CollectionGraph, image_id: str, mask) -> CollectionGraph:
    """Same collection with ``image_id`` as the template, segmented by ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    images = []
    for im in graph.images:
        if im.id == image_id:
            if mask.shape != (im.height, im.width):
                raise CollectionError(f"template mask shape {mask.shape} does not match {image_id!r}")
            im = replace(im, template_mask=mask)
        elif im.template_mask is not None:
            im = replace(im, template_mask=None)
        images.append(im)
    return build_parts_graph(images, graph.correspondences, graph.confidence_threshold,
                             image_id, graph.seed_levels, graph.working_level)


def reachable_images(adjacency, start: str) -> set[str]:
    seen = {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for (a, b) in adjacency:
            if a == cur and b not in seen:
                seen.add(b)
                queue.append(b)
    return seen


# ---------------------------------------------------------------------------
# manifest IO

def load_collection(manifest_path) -> CollectionGraph:
    """Read a JSON manifest and the files it references."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise CollectionError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    try:
        spec = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CollectionError(f"{manifest_path}: invalid JSON ({exc})") from exc

    def path_of(rel):
        p = root / rel
        if not p.is_file():
            raise CollectionError(f"missing file: {p}")
        return p

    working = float(spec.get("working_level", DEFAULT_WORKING_LEVEL))
    threshold = float(spec.get("confidence_threshold", DEFAULT_CONFIDENCE))
    template = spec.get("template") or {}
    template_id = template.get("image")
    if template_id is None or "mask" not in template:
        raise CollectionError("manifest must name exactly one template image and mask")
    template_mask = io.read_mask(path_of(template["mask"]))

    images = []
    for entry in spec.get("images", []):
        iid = str(entry["id"])
        try:
            labels = io.read_label_grid(path_of(entry["labels"]))
            merges = io.read_merge_table(path_of(entry["merges"])) if entry.get("merges") else {}
            rgb = io.read_rgb(path_of(entry["rgb"])) if entry.get("rgb") else None
            hists = (io.read_histogram_table(path_of(entry["histograms"]))
                     if entry.get("histograms") else None)
        except io.FormatError as exc:
            raise CollectionError(str(exc)) from exc
        if (entry.get("width"), entry.get("height")) != (None, None):
            if (int(entry["width"]), int(entry["height"])) != (labels.shape[1], labels.shape[0]):
                raise CollectionError(f"{iid}: label grid size differs from manifest")
        images.append(build_image(iid, labels, merges, rgb, hists,
                                  template_mask if iid == template_id else None, working))

    corrs = []
    for rel in spec.get("correspondences", []):
        try:
            src, dst, rows = io.read_correspondences(path_of(rel))
        except io.FormatError as exc:
            raise CollectionError(str(exc)) from exc
        corrs.append(Correspondence(src, dst, rows))
    levels = tuple(float(v) for v in spec.get("seed_levels", ()))
    return build_parts_graph(images, corrs, threshold, template_id, levels, working)


def truth_masks_from_manifest(manifest_path) -> dict[str, np.ndarray]:
    """Ground-truth masks listed under ``images[*].truth`` (optional field)."""
    manifest_path = Path(manifest_path)
    spec = json.loads(manifest_path.read_text())
    return {str(e["id"]): io.read_mask(manifest_path.parent / e["truth"])
            for e in spec.get("images", []) if e.get("truth")}


def save_collection(graph: CollectionGraph, out_dir, truth: dict | None = None) -> Path:
    """Write ``graph`` as a manifest plus per-image files; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for im in graph.images:
        ids = np.array([p.id for p in im.parts])
        io.write_label_grid(out / f"{im.id}.labels", ids[im.labels])
        io.write_merge_table(out / f"{im.id}.merges",
                             {(int(ids[a]), int(ids[b])): lvl
                              for (a, b), lvl in im.hierarchy.merge_level.items()})
        entry = {"id": im.id, "width": im.width, "height": im.height,
                 "labels": f"{im.id}.labels", "merges": f"{im.id}.merges"}
        if im.rgb is not None:
            io.write_rgb(out / f"{im.id}.rgb", im.rgb)
            entry["rgb"] = f"{im.id}.rgb"
        else:
            io.write_histogram_table(out / f"{im.id}.hist",
                                     {p.id: p.histogram for p in im.parts})
            entry["histograms"] = f"{im.id}.hist"
        if truth and im.id in truth:
            io.write_mask(out / f"{im.id}.truth", truth[im.id])
            entry["truth"] = f"{im.id}.truth"
        entries.append(entry)
    corr_files = []
    for k, corr in enumerate(graph.correspondences):
        name = f"corr_{k:03d}_{corr.source_image}_{corr.target_image}.corr"
        io.write_correspondences(out / name, corr.source_image, corr.target_image,
                                 corr.pixel_pairs)
        corr_files.append(name)
    manifest = {
        "working_level": graph.working_level,
        "confidence_threshold": graph.confidence_threshold,
        "images": entries,
        "correspondences": corr_files,
    }
    if graph.seed_levels:
        manifest["seed_levels"] = list(graph.seed_levels)
    if graph.template_id is not None:
        tmpl = graph.image(graph.template_id)
        io.write_mask(out / f"{tmpl.id}.template", tmpl.template_mask)
        manifest["template"] = {"image": tmpl.id, "mask": f"{tmpl.id}.template"}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
