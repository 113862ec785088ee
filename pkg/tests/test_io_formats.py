import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from squeezekit import io_formats as io
from squeezekit.analysis_dse import SweepResult, SweepRow
from squeezekit.arch_builder import HeadSpec, Metaparams, StemSpec, Variant, build_squeezenet
from squeezekit.errors import FormatError, MetaparameterError, ParameterError, ParseError
from squeezekit.model import init_params


@pytest.fixture(scope="module")
def small_graph():
    mp = Metaparams(base_e=16, incr_e=16, stem=StemSpec(8, 3, 2, 1), head=HeadSpec(4))
    return build_squeezenet(mp, input_shape=(3, 32, 32))


# --- architecture text --------------------------------------------------------

def test_arch_round_trip_defaults(tmp_path):
    cfg = io.ArchConfig()
    io.save_arch(tmp_path / "a.arch", cfg)
    assert io.load_arch(tmp_path / "a.arch") == cfg


@settings(max_examples=60, deadline=None)
@given(base=st.integers(1, 512), incr=st.integers(0, 512), freq=st.integers(1, 4),
       pct=st.floats(0, 1), sr=st.floats(1e-6, 1, exclude_min=False),
       variant=st.sampled_from(list(Variant)), placement=st.sampled_from(["even", "all"]),
       classes=st.integers(1, 2000))
def test_arch_round_trip_property(base, incr, freq, pct, sr, variant, placement, classes):
    mp = Metaparams(base, incr, freq, pct, sr, head=HeadSpec(classes))
    cfg = io.ArchConfig(mp, variant, placement)
    assert io.parse_arch(io.render_arch(cfg)) == cfg


def test_arch_range_error():
    text = io.render_arch(io.ArchConfig()).replace("sr = 0.125", "sr = 1.5")
    with pytest.raises(MetaparameterError, match="sr=1.5"):
        io.parse_arch(text)


def test_arch_duplicate_key_names_line_and_key():
    text = "[meta]\nsr = 0.25\nsr = 0.5\n"
    with pytest.raises(ParseError) as info:
        io.parse_arch(text)
    assert info.value.line == 3 and info.value.key == "sr"
    assert "line 3" in str(info.value)


def test_arch_unknown_key_rejected_with_line():
    with pytest.raises(ParseError) as info:
        io.parse_arch("[meta]\n\nbogus = 1\n")
    assert info.value.line == 3 and info.value.key == "bogus"


def test_arch_unknown_section_and_garbage():
    with pytest.raises(ParseError):
        io.parse_arch("[nope]\n")
    with pytest.raises(ParseError):
        io.parse_arch("[meta]\njust words\n")


def test_arch_missing_file(tmp_path):
    with pytest.raises(FormatError, match="missing.arch"):
        io.load_arch(tmp_path / "missing.arch")


# --- weights --------------------------------------------------------------------

def test_weights_round_trip_bitwise(tmp_path, small_graph):
    w = init_params(small_graph, 5)
    io.save_weights(tmp_path / "w.sqzw", w, small_graph)
    back = io.load_weights(tmp_path / "w.sqzw", small_graph)
    assert list(back) == list(w)
    for k in w:
        assert back[k].data.tobytes() == w[k].data.tobytes()


def test_weights_empty_file(tmp_path):
    io.save_weights(tmp_path / "e.sqzw", {})
    assert (tmp_path / "e.sqzw").read_bytes() == b"SQZW\x01\x00\x00\x00\x00"
    assert io.load_weights(tmp_path / "e.sqzw") == {}


def test_weights_layout(tmp_path):
    io.save_weights(tmp_path / "one.sqzw", {"a": np.array([[1.0, 2.0]], np.float32)})
    raw = (tmp_path / "one.sqzw").read_bytes()
    assert raw == (b"SQZW\x01" + (1).to_bytes(4, "little") + (1).to_bytes(2, "little") + b"a"
                   + b"\x02" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                   + np.array([1.0, 2.0], "<f4").tobytes())


def test_weights_bad_magic_and_truncation(tmp_path, small_graph):
    io.save_weights(tmp_path / "w.sqzw", init_params(small_graph, 0), small_graph)
    raw = (tmp_path / "w.sqzw").read_bytes()
    (tmp_path / "m").write_bytes(b"ABCD" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        io.load_weights(tmp_path / "m")
    (tmp_path / "t").write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="truncated"):
        io.load_weights(tmp_path / "t")
    (tmp_path / "x").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        io.load_weights(tmp_path / "x")


@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_weights_any_shape_mismatch_fails(tmp_path_factory, small_graph, data):
    w = {k: v.data for k, v in init_params(small_graph, 0).items()}
    name = data.draw(st.sampled_from(sorted(w)))
    shape = list(w[name].shape)
    axis = data.draw(st.integers(0, len(shape) - 1))
    shape[axis] += data.draw(st.integers(1, 3))
    w[name] = np.zeros(shape, np.float32)
    path = tmp_path_factory.mktemp("w") / "w.sqzw"
    io.save_weights(path, w)
    with pytest.raises(FormatError, match=name.replace(".", r"\.")):
        io.load_weights(path, small_graph)


# --- CSV ------------------------------------------------------------------------------

def test_csv_one_row_and_exact_round_trip(tmp_path):
    result = SweepResult("sr", (SweepRow(0.1, 123, 492, 1 / 3),), "vanilla")
    io.emit_csv(result, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 2
    row = next(csv.DictReader(open(tmp_path / "s.csv")))
    assert float(row["value"]) == 0.1
    assert float(row["toy_accuracy"]) == 1 / 3


def test_csv_quotes_commas(tmp_path):
    class R:
        def csv_rows(self):
            return ["name", "v"], [["a,b", 1.5]]

    io.emit_csv(R(), tmp_path / "q.csv")
    assert (tmp_path / "q.csv").read_text().splitlines()[1] == '"a,b",1.5'


def test_csv_io_error_names_path(tmp_path):
    class R:
        def csv_rows(self):
            return ["x"], []

    with pytest.raises(FormatError, match="nodir"):
        io.emit_csv(R(), tmp_path / "nodir" / "x.csv")


# --- toy dataset ------------------------------------------------------------------------

def test_dataset_deterministic_and_balanced():
    a = io.gen_toy_dataset(3, 203, 4)
    b = io.gen_toy_dataset(3, 203, 4)
    assert a.images.tobytes() == b.images.tobytes()
    counts = np.bincount(a.labels, minlength=4)
    assert counts.max() - counts.min() <= 1
    assert a.images.shape == (203, 3, 32, 32)


def test_dataset_brightest_blob_in_labelled_quadrant():
    ds = io.gen_toy_dataset(0, 200, 4)
    for img, label in zip(ds.images, ds.labels):
        lum = img.sum(axis=0)
        y, x = np.unravel_index(np.argmax(lum), lum.shape)
        assert (int(y >= 16) * 2 + int(x >= 16)) == label


def test_dataset_centroid_baseline_beats_chance():
    ds = io.gen_toy_dataset(1, 800, 4)
    xtr, ytr = ds.train
    xte, yte = ds.heldout
    means = np.stack([xtr[ytr == c].reshape((ytr == c).sum(), -1).mean(0) for c in range(4)])
    flat = xte.reshape(len(xte), -1)
    pred = np.argmin(((flat[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == yte) >= 0.6


def test_dataset_two_classes_and_errors():
    ds = io.gen_toy_dataset(0, 10, 2)
    assert set(ds.labels.tolist()) == {0, 1}
    with pytest.raises(ParameterError):
        io.gen_toy_dataset(0, 10, 3)
    with pytest.raises(ParameterError):
        io.gen_toy_dataset(0, 3, 4)


def test_dataset_standardized_on_train_split():
    ds = io.gen_toy_dataset(0, 400, 4)
    x, _ = ds.train
    assert abs(float(x.mean())) < 1e-4
    assert abs(float(x.std()) - 1) < 1e-3


def test_idx_round_trip(tmp_path):
    images = np.random.default_rng(0).integers(0, 255, (6, 3, 8, 8), dtype=np.uint8)
    labels = np.array([0, 1, 0, 1, 1, 0], np.uint8)
    io.save_idx(tmp_path / "images.idx", images)
    io.save_idx(tmp_path / "labels.idx", labels)
    ds = io.load_idx_dataset(tmp_path, heldout_fraction=0.5)
    assert ds.num_classes == 2
    assert ds.images.shape == (6, 3, 8, 8)
    np.testing.assert_allclose(ds.images * 255, images, atol=1e-4)


def test_idx_bad_file(tmp_path):
    (tmp_path / "images.idx").write_bytes(b"\x01\x02\x03\x04")
    with pytest.raises(FormatError):
        io.load_idx(tmp_path / "images.idx")
