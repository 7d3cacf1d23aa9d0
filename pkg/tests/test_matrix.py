import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tica.errors import DegenerateInput, FormatError, IoError
from tica.matrix import center_scale, double_center, read_matrix, split_sessions, write_matrix


def test_bin_header_example(tmp_path):
    write_matrix([[1, 2], [3, 4]], tmp_path / "m.bin")
    np.testing.assert_array_equal(read_matrix(tmp_path / "m.bin"), [[1, 2], [3, 4]])


def test_csv_parse(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1.5,2\n3,4\n")
    np.testing.assert_array_equal(read_matrix(p), [[1.5, 2], [3, 4]])


def test_one_by_one_roundtrip(tmp_path):
    write_matrix([[0.0]], tmp_path / "z.bin")
    assert read_matrix(tmp_path / "z.bin").shape == (1, 1)


def test_random_roundtrips_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        m = rng.standard_normal((rng.integers(1, 6), rng.integers(1, 6)))
        write_matrix(m, tmp_path / f"{i}.bin")
        assert np.array_equal(read_matrix(tmp_path / f"{i}.bin"), m)
        write_matrix(m, tmp_path / f"{i}.csv")
        np.testing.assert_allclose(read_matrix(tmp_path / f"{i}.csv"), m, rtol=1e-12)


def test_empty_path():
    with pytest.raises(IoError):
        write_matrix([[1.0]], "")


def test_missing_file(tmp_path):
    with pytest.raises(IoError):
        read_matrix(tmp_path / "nope.bin")


def test_truncated_payload(tmp_path):
    write_matrix(np.ones((3, 3)), tmp_path / "t.bin")
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        read_matrix(tmp_path / "t.bin")


def test_non_numeric_csv(tmp_path):
    (tmp_path / "b.csv").write_text("1,x\n")
    with pytest.raises(FormatError):
        read_matrix(tmp_path / "b.csv")


def test_center_scale_small_example():
    out = center_scale([[1, 2], [3, 4]])
    np.testing.assert_allclose(out.data, 0.0, atol=1e-15)
    assert out.scale_factor == pytest.approx(np.sqrt(2))


def test_center_scale_fixed_point():
    rng = np.random.default_rng(1)
    x = double_center(rng.standard_normal((8, 30)))
    x /= x.std(axis=0, ddof=1).mean()
    np.testing.assert_allclose(center_scale(x).data, x, atol=1e-12)


def test_center_scale_sums_vanish():
    x = np.random.default_rng(2).standard_normal((10, 20))
    d = center_scale(x).data
    assert np.abs(d.sum(axis=0)).max() < 1e-10
    assert np.abs(d.sum(axis=1)).max() < 1e-10


def test_constant_data_is_degenerate():
    with pytest.raises(DegenerateInput):
        center_scale(np.ones((5, 4)))


@settings(max_examples=50, deadline=None)
@given(arrays(float, (6, 7), elements=st.floats(-100, 100)),
       arrays(float, 7, elements=st.floats(-10, 10)), arrays(float, 6, elements=st.floats(-10, 10)))
def test_double_centering_ignores_offsets(x, col_off, row_off):
    shifted = x + col_off[None, :] + row_off[:, None]
    np.testing.assert_allclose(double_center(shifted), double_center(x), atol=1e-9)


def test_split_even_and_odd():
    x = np.arange(20.0).reshape(5, 4)
    a, b = split_sessions(x)
    np.testing.assert_array_equal(a, x[:2])
    np.testing.assert_array_equal(b, x[2:4])
    np.testing.assert_array_equal(np.vstack(split_sessions(x[:4])), x[:4])
    with pytest.raises(DegenerateInput):
        split_sessions(x[:3])
