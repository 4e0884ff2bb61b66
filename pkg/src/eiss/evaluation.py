"""Batch runs over annotated images, per-class curve aggregation and export."""

from __future__ import annotations

import csv
import io
import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple
from xml.etree import ElementTree

import numpy as np

from .classifier import Classifier
from .engine import EissConfig, EissResult, run_eiss
from .geometry import Region, clamp

log = logging.getLogger(__name__)

OVERALL = "__all__"
CSV_COLUMNS = ("class", "iteration", "mean_blackened", "mean_cropped", "mean_iou", "n")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")


class AnnotationError(ValueError):
    pass


class ExportError(OSError):
    pass


@dataclass(frozen=True)
class Annotation:
    image_id: str
    class_name: str
    box: Region
    image_dims: Tuple[int, int]
    filename: Optional[str] = None


def _byte_offset(data: bytes, line: int, column: int) -> int:
    lines = data.split(b"\n")
    return sum(len(l) + 1 for l in lines[: max(line - 1, 0)]) + column


def parse_annotation(xml_bytes: bytes, image_id: Optional[str] = None) -> List[Annotation]:
    """Objects of one VOC-style XML file, boxes converted to half-open pixels.

    VOC boxes are 1-based and inclusive, so ``xmin=1, xmax=10`` becomes
    ``Region(0, _, 10, _)``.
    """
    try:
        root = ElementTree.fromstring(xml_bytes)
    except ElementTree.ParseError as exc:
        line, col = exc.position
        raise AnnotationError(
            f"parse error at byte {_byte_offset(xml_bytes, line, col)}: {exc}"
        ) from exc

    def text(node, path):
        el = node.find(path)
        if el is None or el.text is None or not el.text.strip():
            raise AnnotationError(f"incomplete annotation: missing {path}")
        return el.text.strip()

    def number(node, path) -> int:
        try:
            return int(round(float(text(node, path))))
        except ValueError as exc:
            raise AnnotationError(f"incomplete annotation: bad number in {path}") from exc

    filename = root.findtext("filename")
    filename = filename.strip() if filename else None
    if image_id is None:
        image_id = Path(filename).stem if filename else text(root, "filename")
    size = root.find("size")
    dims = (number(size, "width"), number(size, "height")) if size is not None else (0, 0)

    out = []
    for obj in root.findall("object"):
        name = text(obj, "name")
        bb = obj.find("bndbox")
        if bb is None:
            raise AnnotationError("incomplete annotation: missing bndbox")
        xmin, ymin = number(bb, "xmin"), number(bb, "ymin")
        xmax, ymax = number(bb, "xmax"), number(bb, "ymax")
        if xmax < xmin or ymax < ymin:
            raise AnnotationError(f"incomplete annotation: inverted box for {name}")
        box = Region(xmin - 1, ymin - 1, xmax - xmin + 1, ymax - ymin + 1)
        if dims != (0, 0):
            box = clamp(box, *dims) or box
        out.append(Annotation(image_id, name, box, dims, filename))
    return out


def single_instance(annotations: Iterable[Annotation]) -> List[Annotation]:
    """Keep only annotations whose image has exactly one object."""
    per_image: Dict[str, List[Annotation]] = {}
    for a in annotations:
        per_image.setdefault(a.image_id, []).append(a)
    return [v[0] for k, v in sorted(per_image.items()) if len(v) == 1]


def sample_dataset(
    annotations: Iterable[Annotation], per_class_cap: int = 100, seed: int = 0
) -> List[Annotation]:
    """Uniform seeded sample of at most ``per_class_cap`` single-instance images per class.

    Classes with fewer images than the cap contribute all of them. Output is
    ordered by class name, then image id.
    """
    if per_class_cap < 1:
        raise ValueError("per_class_cap must be >= 1")
    by_class: Dict[str, List[Annotation]] = {}
    for a in single_instance(annotations):
        by_class.setdefault(a.class_name, []).append(a)
    selection = []
    for name in sorted(by_class):
        items = sorted(by_class[name], key=lambda a: a.image_id)
        if len(items) > per_class_cap:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
            picks = np.sort(rng.choice(len(items), size=per_class_cap, replace=False))
            items = [items[i] for i in picks]
        selection.extend(items)
    return selection


def load_voc_dataset(
    images_dir, annotations_dir
) -> Tuple[List["Sample"], List[Tuple[str, str]]]:
    """Read every ``*.xml`` annotation; returns (samples, skipped)."""
    from .imaging import read_image

    images_dir, annotations_dir = Path(images_dir), Path(annotations_dir)
    annotations: List[Annotation] = []
    skipped: List[Tuple[str, str]] = []
    for xml_path in sorted(annotations_dir.glob("*.xml")):
        try:
            annotations.extend(parse_annotation(xml_path.read_bytes(), image_id=xml_path.stem))
        except (AnnotationError, OSError) as exc:
            skipped.append((xml_path.stem, str(exc)))
    return annotations, skipped


def image_path_for(images_dir, ann: Annotation) -> Path:
    images_dir = Path(images_dir)
    if ann.filename and (images_dir / ann.filename).exists():
        return images_dir / ann.filename
    for ext in IMAGE_EXTENSIONS:
        p = images_dir / f"{ann.image_id}{ext}"
        if p.exists():
            return p
    return images_dir / (ann.filename or f"{ann.image_id}.png")


@dataclass(frozen=True)
class Sample:
    """One image to localize: a lazy loader plus its ground truth."""

    image_id: str
    class_name: str
    box: Region
    load: Callable[[], np.ndarray] = field(compare=False, repr=False)


def samples_from_annotations(images_dir, annotations: Sequence[Annotation]) -> List[Sample]:
    from .imaging import read_image

    return [
        Sample(a.image_id, a.class_name, a.box, lambda p=image_path_for(images_dir, a): read_image(p))
        for a in annotations
    ]


@dataclass
class ImageResult:
    image_id: str
    class_name: str
    ground_truth: Tuple[int, int, int, int]
    final_region: Tuple[int, int, int, int]
    final_iou: float
    stop_reason: str
    iterations: int
    padded: bool
    blackened: List[float]
    cropped: List[float]
    iou: List[float]
    regions: List[Tuple[int, int, int, int]]

    @classmethod
    def from_result(cls, sample: Sample, result: EissResult) -> "ImageResult":
        recs = result.records
        return cls(
            image_id=sample.image_id,
            class_name=sample.class_name,
            ground_truth=sample.box.as_tuple(),
            final_region=result.final_region.as_tuple(),
            final_iou=float(recs[-1].iou_vs_truth),
            stop_reason=result.stop_reason,
            iterations=len(recs),
            padded=False,
            blackened=[r.blackened_score for r in recs],
            cropped=[r.cropped_score for r in recs],
            iou=[float(r.iou_vs_truth) for r in recs],
            regions=[r.resultant_region.as_tuple() for r in recs],
        )


@dataclass
class ClassReport:
    class_name: str
    sample_count: int
    mean_blackened_curve: List[float]
    mean_cropped_curve: List[float]
    mean_iou_curve: List[float]
    crossing_iteration: Optional[int]
    mean_final_iou: float


@dataclass
class Report:
    max_iterations: int
    classes: List[ClassReport] = field(default_factory=list)
    overall: Optional[ClassReport] = None
    images: List[ImageResult] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def mean_iou(self) -> Optional[float]:
        return None if self.overall is None else self.overall.mean_final_iou

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        def image(x):
            x = dict(x)
            for key in ("ground_truth", "final_region"):
                x[key] = tuple(x[key])
            x["regions"] = [tuple(r) for r in x["regions"]]
            return ImageResult(**x)

        return cls(
            max_iterations=d["max_iterations"],
            classes=[ClassReport(**c) for c in d["classes"]],
            overall=ClassReport(**d["overall"]) if d["overall"] else None,
            images=[image(x) for x in d["images"]],
            skipped=[tuple(s) for s in d["skipped"]],
        )


def pad_curve(values: Sequence[float], length: int) -> List[float]:
    """Carry the last value forward to ``length`` entries."""
    values = list(values)[:length]
    return values + [values[-1]] * (length - len(values))


def crossing_iteration(blackened: Sequence[float], cropped: Sequence[float]) -> Optional[int]:
    for i, (b, c) in enumerate(zip(blackened, cropped), 1):
        if b >= c:
            return i
    return None


def aggregate(name: str, results: Sequence[ImageResult], length: int) -> ClassReport:
    def mean(attr):
        rows = np.array([pad_curve(getattr(r, attr), length) for r in results], dtype=np.float64)
        return [float(v) for v in rows.mean(axis=0)]

    black, crop = mean("blackened"), mean("cropped")
    return ClassReport(
        class_name=name,
        sample_count=len(results),
        mean_blackened_curve=black,
        mean_cropped_curve=crop,
        mean_iou_curve=mean("iou"),
        crossing_iteration=crossing_iteration(black, crop),
        mean_final_iou=float(np.mean([r.final_iou for r in results])),
    )


def evaluate(
    samples: Sequence[Sample],
    classifier: Classifier,
    cfg: EissConfig = EissConfig(),
    workers: int = 1,
    skipped: Sequence[Tuple[str, str]] = (),
) -> Report:
    """Run the search on every sample and average curves per class and overall.

    Failures on individual images are recorded under ``skipped``; they never
    abort the batch.
    """
    report = Report(max_iterations=cfg.max_iterations, skipped=list(skipped))

    def one(sample: Sample):
        try:
            img = sample.load()
            return run_eiss(img, classifier, cfg, ground_truth=sample.box)
        except Exception as exc:  # recorded, batch continues
            return exc

    if workers > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, samples))
    else:
        outcomes = [one(s) for s in samples]

    for sample, out in zip(samples, outcomes):
        if isinstance(out, Exception):
            log.warning("skipping %s: %s", sample.image_id, out)
            report.skipped.append((sample.image_id, str(out)))
            continue
        res = ImageResult.from_result(sample, out)
        res.padded = res.iterations < cfg.max_iterations
        report.images.append(res)

    report.images.sort(key=lambda r: (r.class_name, r.image_id))
    report.skipped.sort()
    if not report.images:
        return report
    length = cfg.max_iterations
    names = sorted({r.class_name for r in report.images})
    report.classes = [
        aggregate(n, [r for r in report.images if r.class_name == n], length) for n in names
    ]
    report.overall = aggregate(OVERALL, report.images, length)
    return report


def normalize(values: Sequence[float]) -> List[float]:
    """Affine map onto [0, 1]; constant curves map to 0.5."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return [0.5] * len(v)
    return [float(x) for x in (v - lo) / (hi - lo)]


CURVES = {
    "blackened": "mean_blackened_curve",
    "cropped": "mean_cropped_curve",
    "iou": "mean_iou_curve",
}


def normalize_curves(report: Report) -> Dict[str, Dict[str, Dict[str, List[float]]]]:
    """``{class: {curve: {"raw": [...], "normalized": [...]}}}`` for plotting."""
    out = {}
    entries = list(report.classes) + ([report.overall] if report.overall else [])
    for cr in entries:
        out[cr.class_name] = {}
        for key, attr in CURVES.items():
            raw = list(getattr(cr, attr))
            out[cr.class_name][key] = {"raw": raw, "normalized": normalize(raw) if raw else []}
    return out


def _fmt(v: float) -> str:
    return repr(float(v))


def report_csv(report: Report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for cr in report.classes:
        for i in range(report.max_iterations):
            writer.writerow(
                [
                    cr.class_name,
                    i + 1,
                    _fmt(cr.mean_blackened_curve[i]),
                    _fmt(cr.mean_cropped_curve[i]),
                    _fmt(cr.mean_iou_curve[i]),
                    cr.sample_count,
                ]
            )
    return buf.getvalue()


def report_json(report: Report) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def read_report(path) -> Report:
    return Report.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def export(report: Report, fmt: str, path) -> List[Path]:
    """Write ``report`` as ``csv``, ``json`` or ``plot`` data; returns written paths.

    ``csv`` and ``json`` write a single file at ``path``. ``plot`` treats
    ``path`` as a directory and writes one two-column (iteration, value) file
    per class and curve, raw and normalized.
    """
    path = Path(path)
    try:
        if fmt == "csv":
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(report_csv(report), encoding="utf-8")
            return [path]
        if fmt == "json":
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(report_json(report), encoding="utf-8")
            return [path]
        if fmt == "plot":
            written = []
            path.mkdir(parents=True, exist_ok=True)
            for name, curves in normalize_curves(report).items():
                for curve, series in curves.items():
                    for kind, values in series.items():
                        p = path / f"{_safe(name)}.{curve}.{kind}.tsv"
                        lines = [f"{i}\t{_fmt(v)}" for i, v in enumerate(values, 1)]
                        p.write_text("iteration\tvalue\n" + "\n".join(lines) + "\n", encoding="utf-8")
                        written.append(p)
            return written
    except OSError as exc:
        raise ExportError(f"export failed: {path}: {exc}") from exc
    raise ValueError(f"unknown export format {fmt!r}")
