"""Greedy blacken/crop region search guided by a frozen top-K reference.

Each iteration proposes every ``alpha``-scaled sub-region of the current
search frame, scores the original image with that region blackened and
with that region cropped out and rescaled, and shrinks the frame to the
bounding box of the best proposals from both branches.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .classifier import Classifier, ResponseVector
from .geometry import (
    DegenerateRegion,
    Region,
    bounding_union,
    child_size,
    iou,
    lattice_offsets,
    propose_grid,
)
from .imaging import blacken, crop_rescale, image_dims, resize

log = logging.getLogger(__name__)

STOP_ETA = "eta_threshold"
STOP_MAX = "max_iterations"
STOP_DEGENERATE = "degenerate_region"

# proposals per classifier call; fixed so results never depend on worker count
CHUNK = 64


@dataclass(frozen=True)
class EissConfig:
    alpha: float = 0.8
    eta: float = 10.0
    k: int = 1
    max_iterations: int = 30
    stride: int = 1
    top_regions_per_branch: int = 5
    sample_count: Optional[int] = None
    min_region_side: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.top_regions_per_branch < 1:
            raise ValueError("top_regions_per_branch must be >= 1")
        if self.sample_count is not None and self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.min_region_side < 1:
            raise ValueError("min_region_side must be >= 1")


@dataclass(frozen=True)
class TopKReference:
    class_indices: Tuple[int, ...]
    ref_probs: Tuple[float, ...]

    @property
    def initial_score(self) -> float:
        p = np.asarray(self.ref_probs, dtype=np.float64)
        return float((p * p).sum())

    @property
    def max_score(self) -> float:
        return float(sum(self.ref_probs))


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    resultant_region: Region
    blackened_score: float
    cropped_score: float
    proposal_count: int
    iou_vs_truth: Optional[float] = None
    top_blackened: Tuple[Region, ...] = ()
    top_cropped: Tuple[Region, ...] = ()


@dataclass(frozen=True)
class EissResult:
    final_region: Region
    records: Tuple[IterationRecord, ...]
    stop_reason: str
    reference: TopKReference

    @property
    def final_iou(self) -> Optional[float]:
        return self.records[-1].iou_vs_truth


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, descending; ties go to the lower index."""
    order = np.lexsort((np.arange(len(probs)), -np.asarray(probs)))
    return order[:k]


def initial_reference(classifier: Classifier, img: np.ndarray, k: int) -> TopKReference:
    if k > classifier.class_count:
        raise ValueError(f"k={k} exceeds class count {classifier.class_count}")
    resp = classifier.classify(resize(img, classifier.input_size))
    idx = top_k_indices(resp.probs, k)
    ref = TopKReference(tuple(int(i) for i in idx), tuple(float(resp.probs[i]) for i in idx))
    if ref.initial_score <= 0:
        raise ValueError("reference response has zero mass on its top-k classes")
    return ref


def score_matrix(probs: np.ndarray, ref: TopKReference) -> np.ndarray:
    """Top-K inner products for a (B, C) probability matrix."""
    sub = probs[:, list(ref.class_indices)]
    return (sub * np.asarray(ref.ref_probs, dtype=np.float64)).sum(axis=1)


def score_proposal(resp: ResponseVector, ref: TopKReference) -> float:
    return float(score_matrix(resp.probs[None, :], ref)[0])


def should_stop(blackened: float, cropped: float, initial_score: float, eta: float) -> bool:
    """True once the cropped-minus-blackened gap drops below ``eta`` percent of the reference."""
    return (cropped - blackened) < (eta / 100.0) * initial_score


def sample_regions(
    parent: Region, alpha: float, m: int, rng: np.random.Generator
) -> List[Region]:
    """``m`` distinct stride-1 proposals drawn uniformly, returned row-major."""
    if m < 1:
        raise ValueError("sample count must be >= 1")
    cw, ch = child_size(parent, alpha)
    xs, ys = lattice_offsets(parent, (cw, ch), 1)
    n = len(xs) * len(ys)
    if m >= n:
        picks = np.arange(n)
    else:
        picks = np.sort(rng.choice(n, size=m, replace=False))
    return [Region(xs[i % len(xs)], ys[i // len(xs)], cw, ch) for i in picks]


def _score_chunk(img, classifier, ref, regions):
    black = score_matrix(classifier.predict_blackened(img, regions), ref)
    crop = score_matrix(classifier.predict_cropped(img, regions), ref)
    return black, crop


def score_candidates(
    img: np.ndarray,
    classifier: Classifier,
    ref: TopKReference,
    candidates: Sequence[Region],
    workers: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Blackened and cropped scores for every candidate, in candidate order."""
    chunks = [candidates[i : i + CHUNK] for i in range(0, len(candidates), CHUNK)]
    if workers > 1 and classifier.thread_safe and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _score_chunk(img, classifier, ref, c), chunks))
    else:
        parts = [_score_chunk(img, classifier, ref, c) for c in chunks]
    return (
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
    )


def select_top(black: np.ndarray, crop: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Positions of the ``n`` best blackened and cropped proposals.

    Blackened proposals rank by lowest score (largest loss of response when
    the region is hidden); cropped proposals by highest score. Ties keep
    candidate order, which is row-major.
    """
    black_order = np.argsort(black, kind="stable")[:n]
    crop_order = np.argsort(-crop, kind="stable")[:n]
    return black_order, crop_order


def candidate_regions(parent: Region, cfg: EissConfig, rng: Optional[np.random.Generator]) -> List[Region]:
    cw, ch = child_size(parent, cfg.alpha)
    if cw < cfg.min_region_side or ch < cfg.min_region_side:
        raise DegenerateRegion("region degenerate")
    if cfg.sample_count is not None:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        return sample_regions(parent, cfg.alpha, cfg.sample_count, rng)
    return propose_grid(parent, cfg.alpha, cfg.stride)


def run_iteration(
    img: np.ndarray,
    classifier: Classifier,
    ref: TopKReference,
    parent: Region,
    cfg: EissConfig,
    *,
    iteration: int = 1,
    rng: Optional[np.random.Generator] = None,
    ground_truth: Optional[Region] = None,
    workers: int = 1,
) -> IterationRecord:
    candidates = candidate_regions(parent, cfg, rng)
    black, crop = score_candidates(img, classifier, ref, candidates, workers)
    b_idx, c_idx = select_top(black, crop, cfg.top_regions_per_branch)
    top_b = tuple(candidates[i] for i in b_idx)
    top_c = tuple(candidates[i] for i in c_idx)
    resultant = bounding_union(top_b + top_c)

    b_score = score_matrix(classifier.predict(blacken(img, resultant)[None]), ref)[0]
    c_score = score_matrix(
        classifier.predict(crop_rescale(img, resultant, classifier.input_size)[None]), ref
    )[0]
    return IterationRecord(
        iteration=iteration,
        resultant_region=resultant,
        blackened_score=float(b_score),
        cropped_score=float(c_score),
        proposal_count=len(candidates),
        iou_vs_truth=None if ground_truth is None else iou(resultant, ground_truth),
        top_blackened=top_b,
        top_cropped=top_c,
    )


def run_eiss(
    img: np.ndarray,
    classifier: Classifier,
    cfg: EissConfig = EissConfig(),
    ground_truth: Optional[Region] = None,
    workers: int = 1,
) -> EissResult:
    ref = initial_reference(classifier, img, cfg.k)
    s0 = ref.initial_score
    rng = np.random.default_rng(cfg.seed) if cfg.sample_count is not None else None
    w, h = image_dims(img)
    parent = Region.frame(w, h)
    records: List[IterationRecord] = []
    stop = STOP_MAX
    for t in range(1, cfg.max_iterations + 1):
        try:
            rec = run_iteration(
                img, classifier, ref, parent, cfg,
                iteration=t, rng=rng, ground_truth=ground_truth, workers=workers,
            )
        except DegenerateRegion:
            if not records:
                raise
            stop = STOP_DEGENERATE
            break
        except Exception as exc:
            raise RuntimeError(f"iteration {t}: {exc}") from exc
        records.append(rec)
        log.debug("iter %d region=%s black=%.4f crop=%.4f", t, rec.resultant_region,
                  rec.blackened_score, rec.cropped_score)
        if should_stop(rec.blackened_score, rec.cropped_score, s0, cfg.eta):
            stop = STOP_ETA
            break
        parent = rec.resultant_region
    return EissResult(records[-1].resultant_region, tuple(records), stop, ref)
