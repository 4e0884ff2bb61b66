"""Classifier backends that the search scores against.

Every backend maps images to per-class probability vectors. Two are
provided: :class:`OracleClassifier`, a closed-form stand-in whose response
peaks when an object's visible area fraction hits a target, and
:class:`PretrainedClassifier`, which hosts a serialized TorchScript network
described by a key-value metadata file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .imaging import DTYPE, blacken_batch, crop_rescale_batch
from .geometry import Region, clamp


class ModelLoadError(RuntimeError):
    pass


class MetadataMismatch(ValueError):
    pass


class ClassifyError(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"classify failed on image {index}: {cause}")
        self.index = index
        self.__cause__ = cause


@dataclass(frozen=True)
class ResponseVector:
    probs: np.ndarray
    labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        p = self.probs
        if p.ndim != 1 or np.any(p < 0) or np.any(p > 1) or abs(float(p.sum()) - 1.0) > 1e-6:
            raise ValueError("response must be a probability vector")

    def __len__(self) -> int:
        return len(self.probs)


class Classifier:
    """Base contract: fixed input size, fixed class count, deterministic output.

    Subclasses implement :meth:`predict` on a stacked batch of equally sized
    images. ``thread_safe = False`` makes the engine serialize calls.
    """

    input_width: int
    input_height: int
    class_count: int
    labels: Optional[Tuple[str, ...]] = None
    thread_safe: bool = True

    @property
    def input_size(self) -> Tuple[int, int]:
        return (self.input_width, self.input_height)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Probabilities of shape (B, class_count) for a (B, H, W, C) batch."""
        raise NotImplementedError

    def predict_blackened(self, img: np.ndarray, regions: Sequence[Region]) -> np.ndarray:
        """Probabilities for ``img`` with each region zeroed in turn.

        Backends with structure to exploit may override this; the result must
        equal ``predict(blacken_batch(img, regions))`` exactly.
        """
        return self.predict(blacken_batch(img, regions))

    def predict_cropped(self, img: np.ndarray, regions: Sequence[Region]) -> np.ndarray:
        return self.predict(crop_rescale_batch(img, regions, self.input_size))

    def classify(self, img: np.ndarray) -> ResponseVector:
        return ResponseVector(self.predict(img[None])[0], self.labels)

    def classify_batch(self, images: Sequence[np.ndarray]) -> List[ResponseVector]:
        if len(images) == 0:
            raise ValueError("empty batch")
        out = []
        groups: Dict[tuple, List[int]] = {}
        for i, img in enumerate(images):
            groups.setdefault(img.shape, []).append(i)
        results: Dict[int, np.ndarray] = {}
        for idx in groups.values():
            try:
                probs = self.predict(np.stack([images[i] for i in idx]))
            except Exception:
                # locate the offending image
                for i in idx:
                    try:
                        results[i] = self.predict(images[i][None])[0]
                    except Exception as exc:
                        raise ClassifyError(i, exc) from exc
                continue
            for i, p in zip(idx, probs):
                results[i] = p
        for i in range(len(images)):
            out.append(ResponseVector(results[i], self.labels))
        return out


@dataclass(frozen=True)
class OracleParams:
    palette: Tuple[Tuple[float, ...], ...] = ((0.9, 0.2, 0.2), (0.2, 0.4, 0.9))
    peak_fraction: float = 0.3
    background_mass: float = 0.25
    color_tolerance: float = 0.05

    def __post_init__(self):
        if not 0 < self.peak_fraction < 1:
            raise ValueError("peak_fraction must lie in (0, 1)")
        if self.background_mass <= 0:
            raise ValueError("background_mass must be positive")
        if not 0 <= self.color_tolerance < 0.5:
            raise ValueError("color_tolerance must lie in [0, 0.5)")


def peaked(x: np.ndarray, peak: float) -> np.ndarray:
    """Unimodal response ``(x/peak) * exp(1 - x/peak)``; 0 at 0, 1 at ``peak``."""
    r = np.asarray(x, dtype=np.float64) / peak
    return r * np.exp(1.0 - r)


def oracle_probs(fractions: np.ndarray, params: OracleParams) -> np.ndarray:
    """Map per-class area fractions (..., C) to C object probs + background."""
    f = peaked(fractions, params.peak_fraction)
    denom = params.background_mass + f.sum(axis=-1, keepdims=True)
    return np.concatenate([f / denom, params.background_mass / denom], axis=-1)


class OracleClassifier(Classifier):
    """Synthetic classifier responding to the area share of each palette color.

    A pixel counts toward class ``c`` when every channel is within
    ``color_tolerance`` of the class color. The oracle accepts images of any
    size; ``input_size`` only fixes the crop resolution used by the search.
    The last output is a background pseudo-class.
    """

    def __init__(self, params: OracleParams = OracleParams(), input_size: Tuple[int, int] = (32, 32)):
        self.params = params
        self.input_width, self.input_height = input_size
        self.class_count = len(params.palette) + 1
        self.labels = tuple(f"class_{i}" for i in range(len(params.palette))) + ("background",)
        self._palette = np.asarray(params.palette, dtype=DTYPE)

    def membership(self, batch: np.ndarray) -> np.ndarray:
        """Boolean (..., H, W, C) mask: pixel matches class color within tolerance."""
        if batch.shape[-1] != self._palette.shape[1]:
            raise ValueError(
                f"image has {batch.shape[-1]} channels, palette has {self._palette.shape[1]}"
            )
        tol = DTYPE(self.params.color_tolerance)
        return np.stack(
            [(np.abs(batch - color) <= tol).all(axis=-1) for color in self._palette], axis=-1
        )

    def fractions(self, batch: np.ndarray) -> np.ndarray:
        b, h, w, _ = batch.shape
        counts = np.count_nonzero(self.membership(batch).reshape(b, h * w, -1), axis=1)
        return counts / float(h * w)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return oracle_probs(self.fractions(batch), self.params)

    def predict_blackened(self, img: np.ndarray, regions: Sequence[Region]) -> np.ndarray:
        # Zeroed pixels match a class only if its color is within tolerance of
        # black, so per-class counts follow from a summed-area table.
        h, w = img.shape[:2]
        member = self.membership(img).astype(np.int64)
        sat = np.zeros((h + 1, w + 1, member.shape[-1]), dtype=np.int64)
        sat[1:, 1:] = member.cumsum(0).cumsum(1)
        black_hits = self.membership(np.zeros((1, 1, 1, img.shape[-1]), dtype=DTYPE))[0, 0, 0]
        counts = np.empty((len(regions), member.shape[-1]), dtype=np.int64)
        for i, region in enumerate(regions):
            r = clamp(region, w, h)
            if r is None:
                counts[i] = sat[h, w]
                continue
            inside = sat[r.y2, r.x2] - sat[r.y, r.x2] - sat[r.y2, r.x] + sat[r.y, r.x]
            counts[i] = sat[h, w] - inside + black_hits * r.area
        return oracle_probs(counts / float(h * w), self.params)


def oracle_response(img: np.ndarray, params: OracleParams) -> ResponseVector:
    return OracleClassifier(params).classify(img)


# --- pretrained adapter -------------------------------------------------------

META_KEYS = ("input_width", "input_height", "channel_means", "scale", "apply_softmax", "labels_file")


@dataclass
class ModelMeta:
    input_width: int
    input_height: int
    channel_means: Tuple[float, float, float]
    scale: float
    apply_softmax: bool
    labels: Tuple[str, ...]


def parse_meta(path) -> ModelMeta:
    """Read a ``key = value`` metadata file; ``#`` starts a comment line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelLoadError(f"model load failed: cannot read metadata {path}: {exc}") from exc
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ModelLoadError(f"model load failed: {path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    missing = [k for k in META_KEYS if k not in raw]
    if missing:
        raise ModelLoadError(f"model load failed: metadata missing keys {missing}")
    try:
        means = tuple(float(v) for v in raw["channel_means"].replace(",", " ").split())
        if len(means) != 3:
            raise ValueError("channel_means needs 3 values")
        softmax = raw["apply_softmax"].lower()
        if softmax not in ("true", "false"):
            raise ValueError("apply_softmax must be true or false")
        labels_path = Path(raw["labels_file"])
        if not labels_path.is_absolute():
            labels_path = path.parent / labels_path
        labels = tuple(l.strip() for l in labels_path.read_text(encoding="utf-8").splitlines() if l.strip())
        return ModelMeta(
            input_width=int(raw["input_width"]),
            input_height=int(raw["input_height"]),
            channel_means=means,
            scale=float(raw["scale"]),
            apply_softmax=softmax == "true",
            labels=labels,
        )
    except (ValueError, OSError) as exc:
        raise ModelLoadError(f"model load failed: bad metadata {path}: {exc}") from exc


class PretrainedClassifier(Classifier):
    """TorchScript network behind the classifier contract.

    Input images are resampled to the declared size (bilinear, corner
    aligned), shifted by ``-channel_means``, multiplied by ``scale`` and fed
    as a float32 NCHW tensor. Softmax is applied only when the metadata asks.
    """

    thread_safe = False

    def __init__(self, module, meta: ModelMeta):
        self.module = module
        self.meta = meta
        self.input_width, self.input_height = meta.input_width, meta.input_height
        self.labels = meta.labels
        self.class_count = len(meta.labels)

    def preprocess(self, batch: np.ndarray) -> np.ndarray:
        b, h, w, c = batch.shape
        if (w, h) != self.input_size:
            frame = Region(0, 0, w, h)
            batch = np.stack([crop_rescale_batch(img, [frame], self.input_size)[0] for img in batch])
        if c == 1:
            batch = np.repeat(batch, 3, axis=-1)
        means = np.asarray(self.meta.channel_means, dtype=DTYPE)
        x = (batch - means) * DTYPE(self.meta.scale)
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=np.float32)

    def raw_forward(self, x: np.ndarray) -> np.ndarray:
        import torch

        with torch.inference_mode():
            out = self.module(torch.from_numpy(x))
        return out.detach().cpu().double().numpy().reshape(x.shape[0], -1)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        out = self.raw_forward(self.preprocess(batch))
        if self.meta.apply_softmax:
            out = out - out.max(axis=1, keepdims=True)
            out = np.exp(out)
            out /= out.sum(axis=1, keepdims=True)
        return np.clip(out, 0.0, 1.0)


def load_pretrained(model_path, meta_path) -> PretrainedClassifier:
    meta = parse_meta(meta_path)
    try:
        import torch

        module = torch.jit.load(str(model_path), map_location="cpu")
        module.eval()
    except Exception as exc:
        raise ModelLoadError(f"model load failed: {model_path}: {exc}") from exc
    clf = PretrainedClassifier(module, meta)
    probe = np.zeros((1, meta.input_height, meta.input_width, 3), dtype=DTYPE)
    try:
        n_out = clf.raw_forward(clf.preprocess(probe)).shape[1]
    except Exception as exc:
        raise ModelLoadError(f"model load failed: forward pass: {exc}") from exc
    if n_out != len(meta.labels):
        raise MetadataMismatch(
            f"metadata mismatch: model emits {n_out} classes, metadata lists {len(meta.labels)} labels"
        )
    return clf
