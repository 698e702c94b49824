"""Command line entry point: ``coprop run | synth | eval``.

Exit codes: 0 on success, 2 on invalid input, 3 when ``--strict`` is given
and some inference did not converge.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .collection import (CollectionError, build_parts_graph, load_collection,
                         truth_masks_from_manifest, with_template)
from .harness import (STAGES, StageError, evaluate, format_table, reports_to_json, run_stage,
                      template_average)
from .potentials import CompatibilityParams
from .propagation import PropagationParams, run_pipeline
from .segmentation import DEFAULT_LAMBDA_PAIRWISE
from .synthetic import InfeasibleSpec, SyntheticSpec, generate_synthetic_collection, write_synthetic

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 2, 3

log = logging.getLogger("coprop")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coprop", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="segment a collection from its template")
    run.add_argument("--manifest", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--runs", type=int, default=5)
    run.add_argument("--decay", type=float, default=0.5)
    run.add_argument("--delta", type=float, default=0.1)
    run.add_argument("--tau", type=float, default=4.0)
    run.add_argument("--lambda-min", type=float, default=0.2)
    run.add_argument("--topk", type=int, default=3)
    run.add_argument("--conf", type=float, default=None,
                     help="match confidence threshold (default: the manifest's)")
    run.add_argument("--lambda-pairwise", type=float, default=DEFAULT_LAMBDA_PAIRWISE)
    run.add_argument("--bound", choices=("degree", "eigen"), default="degree")
    run.add_argument("--max-iters", type=int, default=2000)
    run.add_argument("--max-rounds", type=int, default=100)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--stage", choices=STAGES, default="full_pipeline")
    run.add_argument("--template", help="image to use as template (needs its truth mask)")
    run.add_argument("--templates", type=int, default=0,
                     help="average stage scores over this many random templates")
    run.add_argument("--trace", action="store_true")
    run.add_argument("--checkpoint", action="store_true",
                     help="dump the likelihood store after every iteration")
    run.add_argument("--strict", action="store_true")

    synth = sub.add_parser("synth", help="generate a synthetic collection")
    synth.add_argument("--spec", required=True, type=Path)
    synth.add_argument("--out", required=True, type=Path)
    synth.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="score predicted masks against ground truth")
    ev.add_argument("--pred", required=True, type=Path)
    ev.add_argument("--truth", required=True, type=Path)
    return ap


def _params(args) -> PropagationParams:
    compat = CompatibilityParams(delta=args.delta, top_k=args.topk, tau=args.tau,
                                 lambda_min=args.lambda_min)
    return PropagationParams(runs=args.runs, decay=args.decay, compat=compat,
                             lambda_pairwise=args.lambda_pairwise, bound=args.bound,
                             max_iters=args.max_iters, max_rounds=args.max_rounds)


def _write_trace(path: Path, traces) -> None:
    lines = []
    for name, rows in traces:
        lines.append(f"# {name}")
        lines.extend(f"{int(k)} {float(v)!r} {float(r)!r}" for k, v, r in rows)
    path.write_text("\n".join(lines) + "\n")


def _cmd_run(args) -> int:
    graph = load_collection(args.manifest)
    truth = truth_masks_from_manifest(args.manifest)
    if args.conf is not None:
        graph = build_parts_graph(graph.images, graph.correspondences, args.conf,
                                  graph.template_id, graph.seed_levels, graph.working_level)
    if args.template:
        if args.template not in truth:
            raise CollectionError(f"no truth mask for template {args.template!r}")
        graph = with_template(graph, args.template, truth[args.template])
    params = _params(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    if args.templates:
        stages = STAGES if args.stage == "full_pipeline" else (args.stage,)
        reports, picks = template_average(graph, truth, stages, params, args.seed, args.templates)
        (out / "report.txt").write_text(format_table(reports))
        (out / "report.json").write_text(reports_to_json(reports, {"templates": picks}))
        sys.stdout.write(format_table(reports))
        return EXIT_OK

    converged = True
    if args.stage == "full_pipeline":
        ckpt = None
        if args.checkpoint:
            ckpt = out / "checkpoints"
            ckpt.mkdir(exist_ok=True)
        res = run_pipeline(graph, params, args.seed, trace=args.trace, checkpoint_dir=ckpt)
        converged, masks, traces = res.converged, res.masks, res.traces
        rows = []
        for image_id in sorted(res.likelihoods):
            lik = res.likelihoods[image_id]
            rows.extend(f"{image_id} {k} {float(v)!r}" for k, v in enumerate(lik))
        (out / "likelihoods.txt").write_text("\n".join(rows) + "\n")
        scored = {k: m for k, m in masks.items() if k != graph.template_id and k in truth}
    else:
        if not truth:
            raise StageError("staged evaluation needs truth masks in the manifest")
        res = run_stage(graph, truth, args.stage, params, args.seed, trace=args.trace)
        converged, masks, traces = res.converged, res.masks, res.traces
        scored = masks

    for image_id, mask in sorted(masks.items()):
        io.write_mask(out / f"{image_id}.mask", mask)
    if args.trace:
        _write_trace(out / "trace.txt", traces)
    if scored:
        report = evaluate(scored, truth, args.stage)
        (out / "report.txt").write_text(format_table([report]))
        (out / "report.json").write_text(reports_to_json([report], {"converged": converged}))
        sys.stdout.write(format_table([report]))
    if not converged:
        log.warning("some inference did not converge")
        if args.strict:
            return EXIT_NOT_CONVERGED
    return EXIT_OK


def _cmd_synth(args) -> int:
    spec = SyntheticSpec.from_json(args.spec)
    collection = generate_synthetic_collection(spec, args.seed)
    path = write_synthetic(collection, args.out, spec, args.seed)
    print(path)
    return EXIT_OK


def _cmd_eval(args) -> int:
    pred = {p.stem: io.read_mask(p) for p in sorted(args.pred.glob("*.mask"))}
    if not pred:
        raise CollectionError(f"no .mask files in {args.pred}")
    truth = {}
    for image_id in pred:
        for name in (f"{image_id}.truth", f"{image_id}.mask"):
            if (args.truth / name).is_file():
                truth[image_id] = io.read_mask(args.truth / name)
                break
        else:
            raise CollectionError(f"no truth mask for {image_id!r} in {args.truth}")
    report = evaluate(pred, truth, "eval")
    sys.stdout.write(format_table([report]))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "synth": _cmd_synth, "eval": _cmd_eval}[args.command]
    try:
        return handler(args)
    except (CollectionError, io.FormatError, InfeasibleSpec, StageError, ValueError,
            KeyError, json.JSONDecodeError, OSError) as exc:
        print(f"coprop: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
