import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eiss.classifier import (
    ClassifyError,
    MetadataMismatch,
    ModelLoadError,
    OracleClassifier,
    OracleParams,
    ResponseVector,
    load_pretrained,
    oracle_response,
    parse_meta,
)
from eiss.geometry import Region
from eiss.imaging import SyntheticSpec, blacken, blacken_batch, crop_rescale, generate_synthetic

RED = (0.9, 0.2, 0.2)
GRAY = (0.5, 0.5, 0.5)
PARAMS = OracleParams()


def image_with_fraction(n_object, total=100, color=RED):
    flat = np.tile(np.asarray(GRAY, dtype=np.float32), (total, 1))
    flat[:n_object] = color
    return flat.reshape(10, total // 10, 3)


def test_oracle_all_black():
    r = oracle_response(np.zeros((8, 8, 3), dtype=np.float32), PARAMS)
    assert r.probs[-1] == 1.0
    assert not r.probs[:-1].any()


def test_oracle_at_peak():
    r = oracle_response(image_with_fraction(30), PARAMS)
    assert r.probs[0] == pytest.approx(0.8, abs=1e-12)
    assert r.probs[-1] == pytest.approx(0.2, abs=1e-12)


def test_oracle_past_peak():
    r = oracle_response(image_with_fraction(60), PARAMS)
    f = 2 * math.exp(-1)  # (0.6/0.3) * exp(1 - 0.6/0.3)
    assert f == pytest.approx(0.735759, abs=1e-6)
    assert r.probs[0] == pytest.approx(f / (0.25 + f), abs=1e-12)
    assert r.probs[0] == pytest.approx(0.74639, abs=1e-5)


def test_oracle_tolerance_window():
    img = image_with_fraction(30, color=(0.94, 0.16, 0.2))
    assert oracle_response(img, PARAMS).probs[0] == pytest.approx(0.8)
    img = image_with_fraction(30, color=(0.96, 0.2, 0.2))
    assert oracle_response(img, PARAMS).probs[-1] == 1.0


@given(st.integers(0, 10**6))
def test_oracle_probability_vector(seed):
    rng = np.random.default_rng(seed)
    img = rng.choice([0.0, 0.2, 0.4, 0.5, 0.9], size=(9, 11, 3)).astype(np.float32)
    r = OracleClassifier().classify(img)
    assert abs(r.probs.sum() - 1) <= 1e-6
    assert np.all((r.probs >= 0) & (r.probs <= 1))
    assert np.array_equal(r.probs, OracleClassifier().classify(img.copy()).probs)


def test_oracle_params_validation():
    with pytest.raises(ValueError):
        OracleParams(peak_fraction=1.0)
    with pytest.raises(ValueError):
        OracleParams(background_mass=0)
    with pytest.raises(ValueError):
        OracleParams(color_tolerance=0.5)


def test_response_vector_validation():
    with pytest.raises(ValueError):
        ResponseVector(np.array([0.5, 0.6]))


def small_object_image(seed):
    spec = SyntheticSpec(frame=(64, 64), object_area_fraction_range=(0.1, 0.2))
    return generate_synthetic(spec, seed)


@pytest.mark.parametrize("seed", range(5))
def test_oracle_blacken_inside_object_decreases(seed):
    img, box, cls = small_object_image(seed)
    clf = OracleClassifier()
    before = clf.classify(img).probs[cls]
    inner = Region(box.x + 2, box.y + 2, box.w - 4, box.h - 4)
    after = clf.classify(blacken(img, inner)).probs[cls]
    assert after < before


@pytest.mark.parametrize("seed", range(5))
def test_oracle_crop_towards_peak_increases(seed):
    img, box, cls = small_object_image(seed)
    clf = OracleClassifier()
    before = clf.classify(img).probs[cls]
    # grow a frame around the object until its object share is at most the peak
    pad = 0
    while True:
        frame = Region(box.x - pad, box.y - pad, box.w + 2 * pad, box.h + 2 * pad)
        crop = img[max(frame.y, 0) : frame.y2, max(frame.x, 0) : frame.x2]
        share = box.area / (crop.shape[0] * crop.shape[1])
        if share <= 0.3:
            break
        pad += 1
    assert box.area / 64**2 < share <= 0.3
    assert clf.classify(crop).probs[cls] > before


@pytest.mark.parametrize("seed", range(5))
def test_oracle_crop_inside_object_below_peak(seed):
    img, box, cls = small_object_image(seed)
    clf = OracleClassifier()
    inner = Region(box.x + 1, box.y + 1, box.w - 2, box.h - 2)
    p = clf.classify(crop_rescale(img, inner, clf.input_size)).probs[cls]
    assert p < 1 / (1 + PARAMS.background_mass)


@given(st.integers(0, 10**6), st.lists(st.tuples(st.integers(-5, 40), st.integers(-5, 40),
                                                 st.integers(1, 30), st.integers(1, 30)),
                                       min_size=1, max_size=12))
def test_blackened_fast_path_exact(seed, boxes):
    spec = SyntheticSpec(frame=(40, 36))
    img, _, _ = generate_synthetic(spec, seed)
    regions = [Region(*b) for b in boxes]
    clf = OracleClassifier()
    assert np.array_equal(clf.predict_blackened(img, regions), clf.predict(blacken_batch(img, regions)))


def test_blackened_fast_path_black_palette():
    params = OracleParams(palette=((0.02, 0.02, 0.02), (0.9, 0.2, 0.2)))
    clf = OracleClassifier(params)
    img = np.full((20, 20, 3), 0.5, dtype=np.float32)
    img[2:8, 2:8] = 0.9, 0.2, 0.2
    regions = [Region(0, 0, 5, 5), Region(10, 10, 30, 30)]
    assert np.array_equal(clf.predict_blackened(img, regions), clf.predict(blacken_batch(img, regions)))


def test_classify_batch_single_and_identical():
    clf = OracleClassifier()
    img, _, _ = small_object_image(0)
    (one,) = clf.classify_batch([img])
    assert np.array_equal(one.probs, clf.classify(img).probs)
    many = clf.classify_batch([img] * 4)
    assert all(np.array_equal(m.probs, one.probs) for m in many)


def test_classify_batch_partition_independent():
    clf = OracleClassifier()
    images = [small_object_image(s)[0] for s in range(6)]
    whole = clf.classify_batch(images)
    parts = clf.classify_batch(images[:2]) + clf.classify_batch(images[2:])
    for a, b in zip(whole, parts):
        assert a.probs.tobytes() == b.probs.tobytes()


def test_classify_batch_reports_offender():
    clf = OracleClassifier()
    good = np.zeros((4, 4, 3), dtype=np.float32)
    bad = np.zeros((4, 4, 1), dtype=np.float32)
    with pytest.raises(ClassifyError) as err:
        clf.classify_batch([good, good, bad])
    assert err.value.index == 2


# --- pretrained adapter -------------------------------------------------------

torch = pytest.importorskip("torch")


class Fixed(torch.nn.Module):
    def __init__(self, values):
        super().__init__()
        self.register_buffer("values", torch.tensor(values, dtype=torch.float32))

    def forward(self, x):
        return self.values.unsqueeze(0).expand(x.shape[0], -1)


class ShapeProbe(torch.nn.Module):
    """Emits (h, w) / (h + w): reveals the spatial size it was fed."""

    def forward(self, x):
        h = torch.full((x.shape[0], 1), float(x.shape[2]))
        w = torch.full((x.shape[0], 1), float(x.shape[3]))
        return torch.cat([h, w], dim=1) / (h + w)


class MeanProbe(torch.nn.Module):
    """Emits per-channel means as logits."""

    def forward(self, x):
        return x.mean(dim=(2, 3))


def save_model(tmp_path, module, labels, width=227, height=227, softmax=False,
               means="0 0 0", scale=1.0, name="model.pt"):
    path = tmp_path / name
    torch.jit.script(module).save(str(path))
    (tmp_path / "labels.txt").write_text("\n".join(labels) + "\n")
    meta = tmp_path / "model.meta"
    meta.write_text(
        "# fixture model\n"
        f"input_width = {width}\n"
        f"input_height = {height}\n"
        f"channel_means = {means}\n"
        f"scale = {scale}\n"
        f"apply_softmax = {'true' if softmax else 'false'}\n"
        "labels_file = labels.txt\n"
    )
    return path, meta


def test_pretrained_fixed_vector(tmp_path):
    values = [0.1, 0.6, 0.3]
    model, meta = save_model(tmp_path, Fixed(values), ["a", "b", "c"])
    clf = load_pretrained(model, meta)
    r = clf.classify(np.zeros((50, 40, 3), dtype=np.float32))
    np.testing.assert_array_equal(r.probs, np.array(values, dtype=np.float32).astype(np.float64))
    assert r.labels == ("a", "b", "c")
    assert clf.class_count == 3


def test_pretrained_resamples_to_declared_size(tmp_path):
    model, meta = save_model(tmp_path, ShapeProbe(), ["h", "w"], width=227, height=113)
    clf = load_pretrained(model, meta)
    assert clf.preprocess(np.zeros((1, 128, 128, 3), dtype=np.float32)).shape == (1, 3, 113, 227)
    r = clf.classify(np.zeros((128, 128, 3), dtype=np.float32))
    np.testing.assert_allclose(r.probs, [113 / 340, 227 / 340], rtol=1e-6)


def test_pretrained_square_input(tmp_path):
    model, meta = save_model(tmp_path, ShapeProbe(), ["h", "w"])
    clf = load_pretrained(model, meta)
    assert clf.preprocess(np.zeros((2, 128, 128, 3), dtype=np.float32)).shape == (2, 3, 227, 227)


def test_pretrained_softmax_and_means(tmp_path):
    model, meta = save_model(tmp_path, MeanProbe(), ["r", "g", "b"], width=8, height=8,
                             softmax=True, means="0.5 0.25 0.0", scale=2.0)
    clf = load_pretrained(model, meta)
    img = np.ones((8, 8, 3), dtype=np.float32)
    logits = (1 - np.array([0.5, 0.25, 0.0])) * 2.0
    expected = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(clf.classify(img).probs, expected, rtol=1e-6)


def test_pretrained_grayscale_input(tmp_path):
    model, meta = save_model(tmp_path, MeanProbe(), ["r", "g", "b"], width=4, height=4, softmax=True)
    clf = load_pretrained(model, meta)
    r = clf.classify(np.full((6, 6, 1), 0.5, dtype=np.float32))
    np.testing.assert_allclose(r.probs, [1 / 3] * 3, rtol=1e-6)


def test_pretrained_label_mismatch(tmp_path):
    model, meta = save_model(tmp_path, Fixed([1 / 21] * 21), [f"c{i}" for i in range(1000)])
    with pytest.raises(MetadataMismatch, match="metadata mismatch"):
        load_pretrained(model, meta)


def test_pretrained_missing_model(tmp_path):
    _, meta = save_model(tmp_path, Fixed([0.5, 0.5]), ["a", "b"])
    with pytest.raises(ModelLoadError, match="model load failed"):
        load_pretrained(tmp_path / "nope.pt", meta)


def test_pretrained_corrupt_model(tmp_path):
    _, meta = save_model(tmp_path, Fixed([0.5, 0.5]), ["a", "b"])
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a torchscript archive")
    with pytest.raises(ModelLoadError, match="model load failed"):
        load_pretrained(bad, meta)


def test_meta_missing_key(tmp_path):
    p = tmp_path / "m.meta"
    p.write_text("input_width = 3\n")
    with pytest.raises(ModelLoadError, match="missing keys"):
        parse_meta(p)


def test_meta_bad_bool(tmp_path):
    (tmp_path / "l.txt").write_text("a\n")
    p = tmp_path / "m.meta"
    p.write_text("input_width=1\ninput_height=1\nchannel_means=0 0 0\nscale=1\n"
                 "apply_softmax=maybe\nlabels_file=l.txt\n")
    with pytest.raises(ModelLoadError):
        parse_meta(p)
