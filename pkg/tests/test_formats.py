import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from specmatch import formats
from specmatch.errors import FormatError, ShapeMismatch


finite_f64 = st.floats(allow_nan=False, allow_infinity=False, width=64)


class TestFmat:
    @given(
        st.integers(1, 6), st.integers(1, 6),
        st.lists(finite_f64, min_size=36, max_size=36),
    )
    def test_roundtrip(self, tmp_path_factory, rows, cols, values):
        tmp = tmp_path_factory.mktemp("fmat")
        m = np.array(values[: rows * cols]).reshape(rows, cols)
        formats.write_fmat(tmp / "m.fmat", m)
        back = formats.read_fmat(tmp / "m.fmat")
        assert back.tobytes() == m.tobytes() and back.shape == m.shape

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.fmat"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            formats.read_fmat(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "m.fmat"
        formats.write_fmat(p, np.ones((4, 4)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError):
            formats.read_fmat(p)

    def test_rejects_non_matrix(self, tmp_path):
        with pytest.raises(ShapeMismatch):
            formats.write_fmat(tmp_path / "m.fmat", np.ones((2, 2, 2)))


class TestPmap:
    def test_roundtrip(self, tmp_path):
        idx = np.array([0, 5, 2, 2, 7], dtype=np.int64)
        formats.write_pmap(tmp_path / "p.pmap", idx)
        np.testing.assert_array_equal(formats.read_pmap(tmp_path / "p.pmap"), idx)

    def test_negative_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            formats.write_pmap(tmp_path / "p.pmap", np.array([1, -2]))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "p.pmap"
        p.write_bytes(b"XXXX\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            formats.read_pmap(p)


class TestPpm:
    def test_deterministic_bytes_and_sidecar(self, tmp_path):
        m = np.abs(np.random.default_rng(0).standard_normal((8, 10)))
        formats.write_ppm(tmp_path / "a.ppm", m)
        formats.write_ppm(tmp_path / "b.ppm", m)
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
        side = json.loads((tmp_path / "a.ppm.json").read_text())
        assert side["max"] == pytest.approx(m.max())
        header = (tmp_path / "a.ppm").read_bytes()[:15]
        assert header.startswith(b"P6\n10 8\n255\n")

    def test_zero_matrix(self, tmp_path):
        formats.write_ppm(tmp_path / "z.ppm", np.zeros((3, 3)))
        body = (tmp_path / "z.ppm").read_bytes().split(b"255\n", 1)[1]
        assert body == b"\x00" * 27


class TestAtomicity:
    def test_no_temp_files_left(self, tmp_path):
        formats.write_fmat(tmp_path / "m.fmat", np.ones((3, 3)))
        formats.write_json(tmp_path / "r.json", {"ок": 1})
        leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
        assert not leftovers

    def test_overwrite_in_place(self, tmp_path):
        p = tmp_path / "m.fmat"
        formats.write_fmat(p, np.ones((2, 2)))
        formats.write_fmat(p, 2 * np.ones((2, 2)))
        np.testing.assert_array_equal(formats.read_fmat(p), 2 * np.ones((2, 2)))
