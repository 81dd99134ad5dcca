import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrd import tensors
from nrd.tensors import IGNORE, FormatError


def test_roundtrip_zeros(tmp_path):
    t = np.zeros((2, 3), dtype=np.float32)
    tensors.tensor_write(t, tmp_path / "t.nrdt")
    back = tensors.tensor_read(tmp_path / "t.nrdt")
    assert back.dtype == np.float32 and back.shape == (2, 3)
    assert back.tobytes() == t.tobytes()


def test_scalar(tmp_path):
    tensors.tensor_write(np.array(3.5, dtype=np.float64), tmp_path / "s.nrdt")
    back = tensors.tensor_read(tmp_path / "s.nrdt")
    assert back.shape == () and back == 3.5 and back.dtype == np.float64


def test_golden_bytes():
    raw = tensors.encode_tensor(np.zeros((2, 3), dtype=np.float32))
    expected = b"NRDT" + bytes([1, 0, 2, 0]) + struct.pack("<II", 2, 3) + b"\x00" * 24
    assert raw == expected
    raw = tensors.encode_tensor(np.array([1.0], dtype=np.float64))
    assert raw == b"NRDT\x01\x01\x01\x00\x01\x00\x00\x00" + b"\x00\x00\x00\x00\x00\x00\xf0\x3f"


def test_bundle_golden_bytes():
    raw = tensors.encode_bundle([("a", np.zeros((1,), dtype=np.float32))])
    assert raw == b"NRDB\x01\x00\x00\x00\x01\x00a" + b"NRDT\x01\x00\x01\x00\x01\x00\x00\x00" + b"\x00" * 4


def test_thousand_random_tensors_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ndim = int(rng.integers(0, 5))
        shape = tuple(int(n) for n in rng.integers(1, 5, size=ndim))
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        t = rng.standard_normal(shape).astype(dtype)
        back = tensors.decode_tensor(io.BytesIO(tensors.encode_tensor(t)))
        assert back.dtype == t.dtype and back.shape == t.shape
        assert back.tobytes() == t.tobytes()


@pytest.mark.parametrize(
    "payload",
    [b"XXXX\x01\x00\x00\x00", b"NRDT\x01\x00\x01\x00\x05\x00\x00\x00" + b"\x00" * 8, b"NRD"],
    ids=["bad-magic", "truncated-data", "truncated-header"],
)
def test_format_errors(tmp_path, payload):
    path = tmp_path / "bad.nrdt"
    path.write_bytes(payload)
    with pytest.raises(FormatError):
        tensors.tensor_read(path)


def test_extent_overflow(tmp_path):
    path = tmp_path / "huge.nrdt"
    path.write_bytes(b"NRDT\x01\x01\x02\x00" + struct.pack("<II", 0xFFFFFFFF, 0xFFFFFFFF))
    with pytest.raises(FormatError):
        tensors.tensor_read(path)


def test_bundle_preserves_order(tmp_path):
    entries = [("zeta", np.ones(2, np.float32)), ("alpha", np.zeros((1, 1), np.float64)), ("m/1", np.arange(3.0))]
    tensors.bundle_write(entries, tmp_path / "b.nrdb")
    back = tensors.bundle_read(tmp_path / "b.nrdb")
    assert list(back) == ["zeta", "alpha", "m/1"]
    for name, t in entries:
        assert back[name].tobytes() == t.tobytes()


def test_bundle_rejects_duplicates():
    with pytest.raises(ValueError):
        tensors.encode_bundle([("a", np.zeros(1, np.float32)), ("a", np.zeros(1, np.float32))])


def test_empty_bundle(tmp_path):
    tensors.bundle_write([], tmp_path / "e.nrdb")
    assert tensors.bundle_read(tmp_path / "e.nrdb") == {}


def test_text_tensor_roundtrip():
    s = "decoder = nrd\nµ\n"
    assert tensors.tensor_to_text(tensors.text_to_tensor(s)) == s


# ---------------------------------------------------------------- PGM / PPM


def test_pgm_roundtrip_small(tmp_path):
    labels = np.array([[0, 1], [255, 2]], dtype=np.uint8)
    tensors.pgm_write(labels, tmp_path / "l.pgm")
    raw = (tmp_path / "l.pgm").read_bytes()
    assert raw == b"P5\n2 2\n255\n" + bytes([0, 1, 255, 2])
    np.testing.assert_array_equal(tensors.pgm_read(tmp_path / "l.pgm"), labels)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pgm_roundtrip_random(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 19, size=(64, 64))
    labels[rng.random((64, 64)) < 0.05] = IGNORE
    path = tmp_path_factory.mktemp("pgm") / "r.pgm"
    tensors.pgm_write(labels, path)
    np.testing.assert_array_equal(tensors.pgm_read(path), labels)


def test_pgm_rejects_large_ids(tmp_path):
    with pytest.raises(ValueError):
        tensors.pgm_write(np.array([[256]]), tmp_path / "x.pgm")


def test_pgm_malformed_header(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n2 2\n255\n0000")
    with pytest.raises(FormatError):
        tensors.pgm_read(tmp_path / "x.pgm")


def test_ppm_ignore_is_black(tmp_path):
    tensors.ppm_color_write(np.full((4, 5), IGNORE), tmp_path / "c.ppm")
    raw = (tmp_path / "c.ppm").read_bytes()
    assert raw == b"P6\n5 4\n255\n" + b"\x00" * 60


def test_ppm_deterministic_palette(tmp_path):
    labels = np.arange(20).reshape(4, 5)
    tensors.ppm_color_write(labels, tmp_path / "a.ppm")
    tensors.ppm_color_write(labels, tmp_path / "b.ppm")
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    rgb = tensors.ppm_read(tmp_path / "a.ppm")
    np.testing.assert_array_equal(rgb.reshape(-1, 3), tensors.PALETTE)
    assert len({tuple(c) for c in tensors.PALETTE}) == 20


# ---------------------------------------------------------------------- RNG


def test_rng_determinism():
    a = tensors.rand_uniform(tensors.seeded_rng(42, "init"), (3, 4))
    b = tensors.rand_uniform(tensors.seeded_rng(42, "init"), (3, 4))
    assert a.tobytes() == b.tobytes()


def test_rng_streams_independent_of_consumption_order():
    first = tensors.seeded_rng(7, "init").random(5)
    data = tensors.seeded_rng(7, "data")
    data.random(1000)
    assert tensors.seeded_rng(7, "init").random(5).tobytes() == first.tobytes()
    assert not np.array_equal(tensors.seeded_rng(7, "data").random(5), first)


def test_rng_pinned_sequence():
    # PCG64 output for seed 0 / stream "init"; guards against silent algorithm changes
    raw = tensors.seeded_rng(0, "init").bit_generator.random_raw(3)
    assert [int(v) for v in raw] == [18104708506341660462, 3689710913212670225, 15773457661249626321]


def test_uniform_mean():
    x = tensors.rand_uniform(tensors.seeded_rng(3, "lln"), [10**5], 0, 1)
    assert abs(float(x.mean()) - 0.5) < 0.01
    assert x.min() >= 0 and x.max() < 1


def test_normal_zero_std():
    x = tensors.rand_normal(tensors.seeded_rng(3), (7, 2), mean=1.25, std=0.0)
    assert np.all(x == 1.25)
