"""Evaluation: pixel precision and Jaccard, staged runs and reports.

Stages, from weakest to strongest:

    corr_only         parts hit by template-foreground matches are foreground
    corr_plus_cut     the same regions followed by a graph cut
    single_inference  one inference step from the template, per target
    joint_inference   the same step refined jointly across targets
    full_pipeline     repeated propagation over the whole collection

All stages but the last are scored on the images adjacent to the template.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .collection import CollectionGraph, with_template
from .propagation import PropagationContext, PropagationParams, infer_targets, run_pipeline
from .segmentation import segment

STAGES = ("corr_only", "corr_plus_cut", "single_inference", "joint_inference", "full_pipeline")


class StageError(ValueError):
    pass


@dataclass(frozen=True)
class ImageScore:
    image_id: str
    precision: float
    jaccard: float


@dataclass(frozen=True)
class EvalReport:
    stage: str
    scores: tuple[ImageScore, ...]

    @property
    def mean_precision(self) -> float:
        return _mean([s.precision for s in self.scores])

    @property
    def mean_jaccard(self) -> float:
        return _mean([s.jaccard for s in self.scores])

    def as_dict(self) -> dict:
        return {"stage": self.stage,
                "mean_precision": self.mean_precision,
                "mean_jaccard": self.mean_jaccard,
                "images": [{"id": s.image_id, "precision": s.precision, "jaccard": s.jaccard}
                           for s in self.scores]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalReport":
        scores = tuple(ImageScore(str(r["id"]), float(r["precision"]), float(r["jaccard"]))
                       for r in data["images"])
        return cls(str(data["stage"]), scores)


def _mean(values) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


def score_mask(predicted, truth) -> tuple[float, float]:
    """(P, J) in percent for one pair of boolean masks."""
    pred = np.asarray(predicted, dtype=bool)
    true = np.asarray(truth, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("empty mask")
    precision = 100.0 * int((pred == true).sum()) / pred.size
    union = int((pred | true).sum())
    jaccard = 100.0 if union == 0 else 100.0 * int((pred & true).sum()) / union
    return precision, jaccard


def evaluate(predicted: Mapping, truth: Mapping, stage: str = "") -> EvalReport:
    """Score every predicted mask against the truth mask of the same image."""
    scores = []
    for image_id in sorted(predicted):
        if image_id not in truth:
            raise KeyError(f"no ground truth for image {image_id!r}")
        p, j = score_mask(predicted[image_id], truth[image_id])
        scores.append(ImageScore(image_id, p, j))
    return EvalReport(stage, tuple(scores))


# ---------------------------------------------------------------------------
# stages

@dataclass
class StageResult:
    report: EvalReport
    masks: dict
    labels: dict
    converged: bool = True
    traces: list = field(default_factory=list)


def template_targets(graph: CollectionGraph) -> list[str]:
    if graph.template_id is None:
        raise StageError("collection has no template image")
    targets = [t for t in graph.neighbors(graph.template_id) if t != graph.template_id]
    if not targets:
        raise StageError(f"template {graph.template_id!r} has no adjacent images")
    return targets


def correspondence_regions(graph: CollectionGraph, target: str) -> np.ndarray:
    """Parts of ``target`` hit by a match whose template pixel is foreground."""
    tid = graph.template_id
    mask = graph.image(tid).template_mask
    hit = np.zeros(graph.image(target).n_parts, dtype=bool)
    table = graph.matches.get((tid, target))
    if table is not None and len(table.src_xy):
        xy = np.asarray(table.src_xy, dtype=np.int64)
        fg = mask[xy[:, 1], xy[:, 0]]
        hit[np.asarray(table.dst_part)[fg]] = True
    return hit


def run_stage(graph: CollectionGraph, truth_masks: Mapping, stage: str,
              params: PropagationParams | None = None, rng_seed: int = 0,
              trace: bool = False) -> StageResult:
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    params = params or PropagationParams()

    if stage == "full_pipeline":
        res = run_pipeline(graph, params, rng_seed, trace=trace)
        masks = {k: m for k, m in res.masks.items() if k != graph.template_id}
        labels = {k: v for k, v in res.labels.items() if k != graph.template_id}
        return StageResult(evaluate(masks, truth_masks, stage), masks, labels,
                           res.converged, res.traces)

    targets = template_targets(graph)
    ctx = PropagationContext(graph, params)
    converged, traces = True, [] if trace else None
    labels = {}
    if stage in ("corr_only", "corr_plus_cut"):
        for t in targets:
            hit = correspondence_regions(graph, t)
            if stage == "corr_plus_cut":
                edges, weights = ctx.intra(t)
                hit = segment(hit.astype(float), edges, weights, params.lambda_pairwise)
            labels[t] = hit
    else:
        seed_labels = graph.template_seed().labels
        beliefs, converged = infer_targets(ctx, graph.template_id, seed_labels, targets,
                                           stage == "joint_inference", traces)
        for t in targets:
            edges, weights = ctx.intra(t)
            labels[t] = segment(beliefs[t], edges, weights, params.lambda_pairwise)
    masks = {t: graph.image(t).rasterize(labels[t]) for t in targets}
    return StageResult(evaluate(masks, truth_masks, stage), masks, labels, converged,
                       traces or [])


def run_stages(graph: CollectionGraph, truth_masks: Mapping, stages=STAGES,
               params: PropagationParams | None = None, rng_seed: int = 0) -> list[EvalReport]:
    # stages run one after another; each is independent of the others
    return [run_stage(graph, truth_masks, s, params, rng_seed).report for s in stages]


def template_average(graph: CollectionGraph, truth_masks: Mapping, stages=STAGES,
                     params: PropagationParams | None = None, rng_seed: int = 0,
                     n_templates: int = 3) -> tuple[list[EvalReport], list[str]]:
    """Stage scores averaged over randomly drawn template images.

    Every image needs a truth mask since any of them may become the
    template.  The per-image scores of all draws are pooled into a single
    report per stage, with image ids prefixed by the template used.
    """
    ids = graph.image_ids
    if n_templates < 1 or n_templates > len(ids):
        raise StageError(f"cannot draw {n_templates} templates from {len(ids)} images")
    rng = np.random.default_rng(rng_seed)
    picks = sorted(ids[k] for k in rng.choice(len(ids), n_templates, replace=False))
    pooled = {s: [] for s in stages}
    for tid in picks:
        g = with_template(graph, tid, truth_masks[tid])
        for report in run_stages(g, truth_masks, stages, params, rng_seed):
            pooled[report.stage].extend(ImageScore(f"{tid}:{s.image_id}", s.precision, s.jaccard)
                                        for s in report.scores)
    return [EvalReport(s, tuple(pooled[s])) for s in stages], picks


# ---------------------------------------------------------------------------
# report emission

def format_table(reports) -> str:
    lines = [f"{'stage':<18}{'images':>8}{'P':>10}{'J':>10}"]
    for r in reports:
        lines.append(f"{r.stage:<18}{len(r.scores):>8}{r.mean_precision:>10.2f}"
                     f"{r.mean_jaccard:>10.2f}")
    for r in reports:
        lines.append("")
        lines.append(f"[{r.stage}]")
        for s in r.scores:
            lines.append(f"  {s.image_id:<24}P {s.precision:8.2f}  J {s.jaccard:8.2f}")
    return "\n".join(lines) + "\n"


def reports_to_json(reports, extra: Mapping | None = None) -> str:
    doc = {"reports": [r.as_dict() for r in reports]}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def reports_from_json(text: str) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(text)["reports"]]
