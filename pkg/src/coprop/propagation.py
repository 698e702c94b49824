"""Collection-level propagation of foreground likelihoods.

Each iteration takes a seed image with a committed labeling, infers beliefs
for every adjacent image from it, refines them jointly across those images,
and folds the results into a per-part likelihood store with weights that
decay geometrically with the iteration index.  A run ends once every image
reachable from the template has received estimates; several runs with
independent random schedules are averaged before the final cut.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collection import CollectionGraph
from .inference import BinaryMRF, CouplingGraph, cbp_solve, extended_solve
from .potentials import CompatibilityParams, intra_weight, local_potentials
from .segmentation import DEFAULT_LAMBDA_PAIRWISE, segment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PropagationParams:
    runs: int = 5
    decay: float = 0.5
    compat: CompatibilityParams = field(default_factory=CompatibilityParams)
    lambda_pairwise: float = DEFAULT_LAMBDA_PAIRWISE
    joint: bool = True
    bound: str = "degree"
    tolerance: float = 1e-8
    max_iters: int = 2000
    max_rounds: int = 100

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")


class LikelihoodStore:
    """Weighted running mean of foreground estimates per image part."""

    def __init__(self, graph: CollectionGraph):
        self._sum = {im.id: np.zeros(im.n_parts) for im in graph.images}
        self._weight = {im.id: np.zeros(im.n_parts) for im in graph.images}
        self.hops: dict[str, list[int]] = {im.id: [] for im in graph.images}
        self.template_id = graph.template_id
        self._pinned = None
        if graph.template_id is not None:
            self._pinned = graph.template_seed().labels.astype(float)

    def add(self, image_id: str, estimates, hop: int, decay: float) -> None:
        if image_id == self.template_id:
            return
        w = decay ** hop
        self._sum[image_id] += w * np.asarray(estimates, float)
        self._weight[image_id] += w
        self.hops[image_id].append(hop)

    def weight(self, image_id: str) -> np.ndarray:
        if image_id == self.template_id:
            return np.ones_like(self._pinned)
        return self._weight[image_id].copy()

    def likelihood(self, image_id: str) -> np.ndarray:
        if image_id == self.template_id:
            return self._pinned.copy()
        w = self._weight[image_id]
        out = np.full(len(w), 0.5)
        seen = w > 0
        out[seen] = self._sum[image_id][seen] / w[seen]
        return out

    def has_estimates(self, image_id: str) -> bool:
        return image_id == self.template_id or bool(self.hops[image_id])

    def dump(self, path) -> None:
        rows = []
        for image_id in sorted(self._sum):
            lik, wt = self.likelihood(image_id), self.weight(image_id)
            rows.extend(f"{image_id} {k} {float(lik[k])!r} {float(wt[k])!r}" for k in range(len(lik)))
        Path(path).write_text("\n".join(rows) + "\n")


@dataclass
class PropagationSchedule:
    rng: np.random.Generator
    seed: str
    visited: set = field(default_factory=set)
    covered: set = field(default_factory=set)
    iteration: int = 0
    run: int = 0


@dataclass
class StepReport:
    seed: str
    targets: list
    next_seed: str | None
    converged: bool
    traces: list = field(default_factory=list)


class PropagationContext:
    """Per-collection caches shared by the steps of one pipeline."""

    def __init__(self, graph: CollectionGraph, params: PropagationParams):
        self.graph = graph
        self.params = params
        self._intra = {}

    def intra(self, image_id):
        if image_id not in self._intra:
            im = self.graph.image(image_id)
            edges = self.graph.intra_edges[image_id]
            levels = [im.hierarchy.level(int(a), int(b)) for a, b in edges]
            self._intra[image_id] = (edges, intra_weight(levels, self.params.compat))
        return self._intra[image_id]

    def target_mrf(self, seed_id, seed_labels, target_id) -> BinaryMRF:
        g = self.graph
        pots = local_potentials(seed_labels, g.image(seed_id), g.image(target_id),
                                g.matches.get((seed_id, target_id)), self.params.compat,
                                g.seed_levels)
        edges, weights = self.intra(target_id)
        return BinaryMRF.from_potentials(pots.theta_f, pots.theta_b, edges, weights)

    def coupling(self, targets) -> CouplingGraph:
        pos = {t: k for k, t in enumerate(targets)}
        rows, weights = [], []
        for a, i, b, j, w in self.graph.inter_edges:
            if a in pos and b in pos:
                rows.append((pos[a], i, pos[b], j))
                weights.append(w)
        sizes = [self.graph.image(t).n_parts for t in targets]
        return CouplingGraph(sizes, np.array(rows, np.int64).reshape(-1, 4), np.array(weights))


def infer_targets(ctx: PropagationContext, seed_id, seed_labels, targets, joint: bool,
                  traces: list | None = None):
    """Single-target beliefs for each target, optionally refined jointly.

    Returns ``(foreground beliefs per target, converged)``.
    """
    p = ctx.params
    mrfs = [ctx.target_mrf(seed_id, seed_labels, t) for t in targets]
    results, ok = {}, True
    for t, mrf in zip(targets, mrfs):
        rows = [] if traces is not None else None
        b = cbp_solve(mrf, "concave", p.tolerance, p.max_iters, trace=rows)
        ok &= b.converged
        results[t] = b.foreground
        if traces is not None:
            traces.append((f"seed {seed_id} target {t} single", rows))
    if joint and len(targets) > 1:
        coupling = ctx.coupling(targets)
        if len(coupling.weights):
            ext = extended_solve(mrfs, coupling, p.tolerance, p.max_rounds, bound=p.bound,
                                 init=[results[t] for t in targets], max_iters=p.max_iters)
            ok &= ext.converged
            results = {t: b.foreground for t, b in zip(targets, ext.beliefs)}
            if traces is not None:
                traces.append((f"seed {seed_id} joint rounds",
                               [(k, v, 0.0) for k, v in enumerate(ext.history)]))
    return results, ok


def commit_segmentation(ctx: PropagationContext, image_id: str, store: LikelihoodStore) -> np.ndarray:
    """Hard labels for ``image_id`` from its fused likelihoods."""
    g = ctx.graph
    if image_id == g.template_id:
        return g.template_seed().labels.copy()
    edges, weights = ctx.intra(image_id)
    return segment(store.likelihood(image_id), edges, weights, ctx.params.lambda_pairwise)


def _reachable(graph: CollectionGraph) -> set:
    return set(graph.image_ids) - set(graph.unreachable)


def iteration_step(schedule: PropagationSchedule, store: LikelihoodStore, ctx: PropagationContext,
                   labels: dict, traces: list | None = None) -> StepReport:
    """Propagate from ``schedule.seed`` and pick the next seed (None when done)."""
    g, p = ctx.graph, ctx.params
    seed = schedule.seed
    targets = [t for t in g.neighbors(seed) if t != g.template_id]
    converged = True
    if targets:
        beliefs, converged = infer_targets(ctx, seed, labels[seed], targets, p.joint, traces)
        for t in sorted(targets):
            store.add(t, beliefs[t], schedule.iteration, p.decay)
    schedule.visited.add(seed)
    schedule.covered.update(targets)
    schedule.covered.add(seed)
    schedule.iteration += 1

    pending = _reachable(g) - schedule.covered
    next_seed = None
    if pending:
        candidates = [n for n in g.neighbors(seed) if n not in schedule.visited]
        if not candidates:
            candidates = sorted(im for im in schedule.covered - schedule.visited
                                if any(n in pending for n in g.neighbors(im)))
        next_seed = candidates[int(schedule.rng.integers(len(candidates)))]
        labels[next_seed] = commit_segmentation(ctx, next_seed, store)
        schedule.seed = next_seed
    return StepReport(seed, targets, next_seed, converged)


def run_once(graph: CollectionGraph, params: PropagationParams, rng, run: int = 0,
             traces: list | None = None, checkpoint_dir=None) -> tuple[LikelihoodStore, bool]:
    ctx = PropagationContext(graph, params)
    store = LikelihoodStore(graph)
    schedule = PropagationSchedule(rng, graph.template_id, run=run)
    labels = {graph.template_id: graph.template_seed().labels}
    converged = True
    while True:
        report = iteration_step(schedule, store, ctx, labels, traces)
        converged &= report.converged
        log.debug("run %d iteration %d: seed %s -> %s", run, schedule.iteration,
                  report.seed, report.targets)
        if checkpoint_dir is not None:
            store.dump(Path(checkpoint_dir) / f"checkpoint_run{run}_iter{schedule.iteration - 1}.txt")
        if report.next_seed is None:
            break
    return store, converged


@dataclass
class PipelineResult:
    likelihoods: dict
    labels: dict
    masks: dict
    stores: list
    converged: bool
    unreachable: tuple
    traces: list = field(default_factory=list)


def run_pipeline(graph: CollectionGraph, params: PropagationParams | None = None,
                 rng_seed: int = 0, trace: bool = False, checkpoint_dir=None) -> PipelineResult:
    """Average ``params.runs`` independent propagation runs and cut each image once."""
    params = params or PropagationParams()
    if graph.template_id is None:
        raise ValueError("collection has no template image")
    children = np.random.SeedSequence(rng_seed).spawn(params.runs)
    stores, converged = [], True
    traces = [] if trace else None
    for run, child in enumerate(children):
        store, ok = run_once(graph, params, np.random.default_rng(child), run, traces,
                             checkpoint_dir)
        stores.append(store)
        converged &= ok

    ctx = PropagationContext(graph, params)
    likelihoods, labels, masks = {}, {}, {}
    for im in graph.images:
        if im.id == graph.template_id:
            labels[im.id] = graph.template_seed().labels
            likelihoods[im.id] = labels[im.id].astype(float)
            masks[im.id] = im.template_mask.copy()
            continue
        if im.id in graph.unreachable:
            likelihoods[im.id] = np.full(im.n_parts, 0.5)
            labels[im.id] = np.zeros(im.n_parts, bool)
            masks[im.id] = np.zeros((im.height, im.width), bool)
            continue
        per_run = np.stack([s.likelihood(im.id) for s in stores])
        avg = np.array([math.fsum(col) for col in per_run.T]) / params.runs
        likelihoods[im.id] = avg
        edges, weights = ctx.intra(im.id)
        labels[im.id] = segment(avg, edges, weights, params.lambda_pairwise)
        masks[im.id] = im.rasterize(labels[im.id])
    return PipelineResult(likelihoods, labels, masks, stores, converged, graph.unreachable,
                          traces or [])
