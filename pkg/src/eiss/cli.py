"""Command-line entry point.

    eiss run          localize one image (file or synthetic)
    eiss evaluate     batch run over a VOC-style dataset
    eiss synth-bench  batch run over generated single-object images
    eiss export       re-export a saved report.json as csv/json/plot data

Settings come from an optional JSON manifest (``--manifest``); command-line
flags override it. The resolved manifest is written to the output directory.
Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .classifier import (
    MetadataMismatch,
    ModelLoadError,
    OracleClassifier,
    OracleParams,
    load_pretrained,
)
from .engine import EissConfig, run_eiss
from .evaluation import (
    AnnotationError,
    Sample,
    evaluate,
    export,
    load_voc_dataset,
    parse_annotation,
    read_report,
    sample_dataset,
    samples_from_annotations,
    single_instance,
)
from .geometry import iou
from .imaging import InfeasibleSpec, SyntheticSpec, generate_synthetic, read_image

log = logging.getLogger("eiss")


class UsageError(Exception):
    """Bad manifest or arguments; maps to exit code 2."""


# flag name -> EissConfig field
CONFIG_FLAGS = {
    "alpha": "alpha",
    "eta": "eta",
    "topk": "k",
    "max_iters": "max_iterations",
    "stride": "stride",
    "samples": "sample_count",
    "seed": "seed",
    "min_side": "min_region_side",
    "top_regions": "top_regions_per_branch",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", type=Path, help="JSON manifest; flags override it")
    common.add_argument("--alpha", type=float, help="proposal size relative to the search frame (default 0.8)")
    common.add_argument("--eta", type=float, help="stopping threshold, percent of the initial score (default 10)")
    common.add_argument("--topk", type=int, help="number of reference classes K (default 1)")
    common.add_argument("--max-iters", type=int, help="iteration cap (default 30)")
    common.add_argument("--stride", type=int, help="proposal lattice stride (default 1)")
    common.add_argument("--samples", type=int, help="random proposals per iteration M (default: full sweep)")
    common.add_argument("--seed", type=int, help="seed for sampling, dataset selection and synthetic data")
    common.add_argument("--min-side", type=int, help="smallest proposal side in pixels (default 8)")
    common.add_argument("--top-regions", type=int, help="proposals kept per branch (default 5)")
    common.add_argument("--workers", type=int, default=None, help="parallel workers (results do not depend on it)")
    common.add_argument("--backend", choices=("oracle", "pretrained"))
    common.add_argument("--model", type=Path, help="TorchScript model file (pretrained backend)")
    common.add_argument("--meta", type=Path, help="model metadata file (pretrained backend)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="eiss", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="localize a single image")
    run.add_argument("--image", type=Path, help="8-bit PNG/JPEG image")
    run.add_argument("--annotation", type=Path, help="VOC XML with one object (for IOU)")
    run.add_argument("--synthetic", action="store_true", help="generate the image from --seed")

    ev = sub.add_parser("evaluate", parents=[common], help="evaluate over a VOC-style dataset")
    ev.add_argument("--images", type=Path, help="directory of images")
    ev.add_argument("--annotations", type=Path, help="directory of VOC XML files")
    ev.add_argument("--cap", type=int, help="images per class (default 100)")

    sb = sub.add_parser("synth-bench", parents=[common], help="evaluate over synthetic images")
    sb.add_argument("--count", type=int, help="number of images (default 50)")
    sb.add_argument("--frame", type=int, help="square frame side in pixels (default 128)")
    sb.add_argument("--fraction", type=float, nargs=2, metavar=("LO", "HI"),
                    help="object area fraction range (default 0.15 0.35)")
    sb.add_argument("--classes", type=int, help="number of object classes (default 2)")

    ex = sub.add_parser("export", help="re-export a saved report")
    ex.add_argument("--report", type=Path, required=True, help="report.json written by evaluate/synth-bench")
    ex.add_argument("--format", choices=("csv", "json", "plot"), required=True)
    ex.add_argument("--out", type=Path, required=True, help="output file (csv/json) or directory (plot)")
    return parser


def load_manifest(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("manifest must be a JSON object")
    return data


def resolve_config(args, manifest: dict) -> EissConfig:
    values = dict(manifest.get("config", {}))
    for flag, name in CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    known = {f.name for f in fields(EissConfig)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        return EissConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def resolve_backend(args, manifest: dict) -> dict:
    backend = dict(manifest.get("backend", {}))
    if args.backend:
        backend["kind"] = args.backend
    backend.setdefault("kind", "oracle")
    if args.model:
        backend["model"] = str(args.model)
    if args.meta:
        backend["meta"] = str(args.meta)
    if backend["kind"] == "pretrained":
        for key in ("model", "meta"):
            if key not in backend:
                raise UsageError(f"pretrained backend needs --{key}")
    elif backend["kind"] != "oracle":
        raise UsageError(f"unknown backend {backend['kind']!r}")
    return backend


def make_classifier(backend: dict):
    if backend["kind"] == "pretrained":
        return load_pretrained(backend["model"], backend["meta"])
    opts = dict(backend.get("oracle", {}))
    if "palette" in opts:
        opts["palette"] = tuple(tuple(c) for c in opts["palette"])
    try:
        params = OracleParams(**opts)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid oracle parameters: {exc}") from exc
    size = tuple(backend.get("input_size", (32, 32)))
    return OracleClassifier(params, input_size=size)


def synthetic_spec(args, inp: dict, backend: dict) -> SyntheticSpec:
    opts = dict(inp.get("spec", {}))
    if getattr(args, "frame", None):
        opts["frame"] = (args.frame, args.frame)
    if getattr(args, "fraction", None):
        opts["object_area_fraction_range"] = tuple(args.fraction)
    if getattr(args, "classes", None):
        opts["class_count"] = args.classes
    palette = backend.get("oracle", {}).get("palette")
    if palette and "palette" not in opts:
        opts["palette"] = palette
    for key in ("frame", "object_area_fraction_range", "background_color", "aspect_range"):
        if key in opts:
            opts[key] = tuple(opts[key])
    if "palette" in opts:
        opts["palette"] = tuple(tuple(c) for c in opts["palette"])
    if "class_count" in opts and "palette" not in opts:
        opts["palette"] = default_palette(opts["class_count"])
    try:
        return SyntheticSpec(**opts)
    except TypeError as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc


def default_palette(n: int):
    base = SyntheticSpec().palette + ((0.2, 0.9, 0.2), (0.9, 0.9, 0.1), (0.9, 0.2, 0.9), (0.1, 0.9, 0.9))
    if n > len(base):
        raise InfeasibleSpec(f"no default palette for {n} classes; give one in the manifest")
    return base[:n]


def synthetic_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synthetic_samples(spec: SyntheticSpec, count: int, seed: int) -> List[Sample]:
    samples = []
    for i in range(count):
        img, box, cls = generate_synthetic(spec, synthetic_seed(seed, i))
        samples.append(Sample(f"synth_{i:05d}", f"class_{cls}", box, lambda img=img: img))
    return samples


def write_manifest(out: Path, cfg: EissConfig, backend: dict, inp: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"config": asdict(cfg), "backend": backend, "input": inp}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def output_dir(args, manifest: dict) -> Path:
    out = args.out or manifest.get("output_dir")
    if out is None:
        raise UsageError("no output directory (--out)")
    return Path(out)


def workers_of(args, manifest: dict) -> int:
    w = args.workers if args.workers is not None else manifest.get("workers", 1)
    if w < 1:
        raise UsageError("--workers must be >= 1")
    return w


def cmd_run(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = resolve_config(args, manifest)
    backend = resolve_backend(args, manifest)
    out = output_dir(args, manifest)
    inp = dict(manifest.get("input", {}))
    if args.image:
        inp = {"mode": "image", "image": str(args.image)}
    if args.annotation:
        inp["annotation"] = str(args.annotation)
    if args.synthetic:
        inp = {"mode": "synthetic", "seed": cfg.seed}
    mode = inp.get("mode", "image" if "image" in inp else None)
    if mode is None:
        raise UsageError("run needs --image or --synthetic")

    truth = None
    if mode == "synthetic":
        spec = synthetic_spec(args, inp, backend)
        img, truth, _ = generate_synthetic(spec, int(inp.get("seed", cfg.seed)))
    elif mode == "image":
        path = Path(inp["image"])
        if not path.is_file():
            raise UsageError(f"image not found: {path}")
        img = read_image(path)
        if "annotation" in inp:
            ann_path = Path(inp["annotation"])
            if not ann_path.is_file():
                raise UsageError(f"annotation not found: {ann_path}")
            objects = parse_annotation(ann_path.read_bytes())
            if len(objects) != 1:
                raise UsageError(f"annotation has {len(objects)} objects; expected exactly one")
            truth = objects[0].box
    else:
        raise UsageError(f"run does not support input mode {mode!r}")

    clf = make_classifier(backend)
    result = run_eiss(img, clf, cfg, ground_truth=truth, workers=workers_of(args, manifest))
    write_manifest(out, cfg, backend, inp)
    write_run_outputs(out, result, truth)
    print(f"final_region={list(result.final_region.as_tuple())} stop_reason={result.stop_reason} "
          f"iterations={len(result.records)}"
          + ("" if truth is None else f" iou={result.final_iou:.4f}"))
    return 0


def write_run_outputs(out: Path, result, truth) -> None:
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "x", "y", "w", "h", "blackened", "cropped", "proposals", "iou"])
        for r in result.records:
            w.writerow([r.iteration, *r.resultant_region.as_tuple(), repr(r.blackened_score),
                        repr(r.cropped_score), r.proposal_count,
                        "" if r.iou_vs_truth is None else repr(r.iou_vs_truth)])
    prediction = {
        "final_region": list(result.final_region.as_tuple()),
        "stop_reason": result.stop_reason,
        "iterations": len(result.records),
        "reference": {
            "class_indices": list(result.reference.class_indices),
            "ref_probs": list(result.reference.ref_probs),
            "initial_score": result.reference.initial_score,
        },
        "ground_truth": None if truth is None else list(truth.as_tuple()),
        "final_iou": None if truth is None else iou(result.final_region, truth),
    }
    (out / "prediction.json").write_text(json.dumps(prediction, indent=2) + "\n", encoding="utf-8")
    boxes = {
        "ground_truth": None if truth is None else list(truth.as_tuple()),
        "progression": [list(r.resultant_region.as_tuple()) for r in result.records],
        "final": list(result.final_region.as_tuple()),
    }
    (out / "boxes.json").write_text(json.dumps(boxes, indent=2) + "\n", encoding="utf-8")


def write_report(out: Path, report) -> None:
    export(report, "csv", out / "report.csv")
    export(report, "json", out / "report.json")
    export(report, "plot", out / "plots")
    v = report.mean_iou
    print(f"images={len(report.images)} skipped={len(report.skipped)}")
    print("mean_iou=" + ("nan" if v is None else f"{v:.4f}"))
    for image_id, reason in report.skipped:
        print(f"skipped {image_id}: {reason}")


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = resolve_config(args, manifest)
    backend = resolve_backend(args, manifest)
    out = output_dir(args, manifest)
    inp = dict(manifest.get("input", {}))
    inp["mode"] = "dataset"
    if args.images:
        inp["images"] = str(args.images)
    if args.annotations:
        inp["annotations"] = str(args.annotations)
    if args.cap is not None:
        inp["cap"] = args.cap
    inp.setdefault("cap", 100)
    for key in ("images", "annotations"):
        if key not in inp:
            raise UsageError(f"evaluate needs --{key}")
        if not Path(inp[key]).is_dir():
            raise UsageError(f"not a directory: {inp[key]}")
    if inp["cap"] < 1:
        raise UsageError("--cap must be >= 1")

    annotations, skipped = load_voc_dataset(inp["images"], inp["annotations"])
    selection = sample_dataset(annotations, inp["cap"], cfg.seed)
    samples = samples_from_annotations(inp["images"], selection)
    clf = make_classifier(backend) if samples else None
    report = evaluate(samples, clf, cfg, workers=workers_of(args, manifest), skipped=skipped)
    write_manifest(out, cfg, backend, inp)
    write_report(out, report)
    return 0


def cmd_synth_bench(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = resolve_config(args, manifest)
    backend = resolve_backend(args, manifest)
    out = output_dir(args, manifest)
    inp = dict(manifest.get("input", {}))
    inp["mode"] = "synthetic"
    if args.count is not None:
        inp["count"] = args.count
    inp.setdefault("count", 50)
    inp["seed"] = cfg.seed
    if inp["count"] < 1:
        raise UsageError("--count must be >= 1")
    spec = synthetic_spec(args, inp, backend)
    inp["spec"] = json.loads(json.dumps(asdict(spec)))
    if backend["kind"] == "oracle":
        backend.setdefault("oracle", {})["palette"] = [list(c) for c in spec.palette[: spec.class_count]]
    samples = synthetic_samples(spec, inp["count"], cfg.seed)
    clf = make_classifier(backend)
    report = evaluate(samples, clf, cfg, workers=workers_of(args, manifest))
    write_manifest(out, cfg, backend, inp)
    write_report(out, report)
    return 0


def cmd_export(args) -> int:
    if not args.report.is_file():
        raise UsageError(f"report not found: {args.report}")
    try:
        report = read_report(args.report)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"not a report file: {args.report}: {exc}") from exc
    for p in export(report, args.format, args.out):
        print(p)
    return 0


COMMANDS = {
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "synth-bench": cmd_synth_bench,
    "export": cmd_export,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InfeasibleSpec, AnnotationError, ModelLoadError, MetadataMismatch) as exc:
        print(f"eiss: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"eiss: runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
