import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sica.datamodel import (
    BadMagicError,
    ComponentSet,
    Dataset,
    FormatVersionError,
    MixingMatrix,
    NonFiniteError,
    PayloadSizeError,
    PreconditionError,
    ThresholdResult,
    TruncatedPayloadError,
    load_dataset,
    read_matrix,
    read_sidecar,
    write_matrix,
    write_sidecar,
)

from conftest import whiten_rows


def test_identity_layout(tmp_path):
    p = tmp_path / "eye.sica"
    write_matrix(np.eye(2), p)
    raw = p.read_bytes()
    header = b"SICA1 2 2\n"
    assert raw[:len(header)] == header
    assert len(raw) == len(header) + 32
    assert raw[len(header):] == np.eye(2).astype("<f8").tobytes()
    assert np.array_equal(read_matrix(p), np.eye(2))


def test_single_zero(tmp_path):
    p = tmp_path / "z.sica"
    write_matrix(np.array([[0.0]]), p)
    out = read_matrix(p)
    assert out.shape == (1, 1) and out[0, 0] == 0.0


def test_zeros_3x4(tmp_path):
    p = tmp_path / "z.sica"
    write_matrix(np.zeros((3, 4)), p)
    assert np.array_equal(read_matrix(p), np.zeros((3, 4)))


def test_random_80x80_roundtrip(tmp_path):
    m = np.random.default_rng(7).standard_normal((80, 80))
    p = tmp_path / "r.sica"
    write_matrix(m, p)
    out = read_matrix(p)
    assert out.tobytes() == m.tobytes()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_roundtrip_bitwise(tmp_path_factory, m):
    p = tmp_path_factory.mktemp("rt") / "m.sica"
    write_matrix(m, p)
    assert read_matrix(p).tobytes() == np.ascontiguousarray(m).tobytes()


def test_negative_zero_preserved(tmp_path):
    p = tmp_path / "nz.sica"
    write_matrix(np.array([[-0.0, 0.0]]), p)
    assert np.signbit(read_matrix(p)[0, 0])


def test_version_error(tmp_path):
    p = tmp_path / "v2.sica"
    p.write_bytes(b"SICA2 1 1\n" + np.zeros(1).tobytes())
    with pytest.raises(FormatVersionError):
        read_matrix(p)


@pytest.mark.parametrize("header", [b"NOPE 1 1\n", b"SICA1 1\n", b"SICA1 a b\n", b"SICA1 1 1"])
def test_bad_header(tmp_path, header):
    p = tmp_path / "bad.sica"
    p.write_bytes(header + np.zeros(1).tobytes())
    with pytest.raises(BadMagicError):
        read_matrix(p)


def test_truncated(tmp_path):
    p = tmp_path / "t.sica"
    write_matrix(np.ones((2, 3)), p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(TruncatedPayloadError):
        read_matrix(p)


def test_excess_payload(tmp_path):
    p = tmp_path / "x.sica"
    write_matrix(np.ones((2, 3)), p)
    p.write_bytes(p.read_bytes() + b"\0" * 8)
    with pytest.raises(PayloadSizeError) as info:
        read_matrix(p)
    assert not isinstance(info.value, TruncatedPayloadError)


def test_write_rejects_nonfinite(tmp_path):
    with pytest.raises(NonFiniteError):
        write_matrix(np.array([[1.0, np.nan]]), tmp_path / "n.sica")


def test_sidecar_and_dataset(tmp_path):
    p = tmp_path / "y.sica"
    write_matrix(np.arange(12.0).reshape(2, 6), p)
    write_sidecar(p, seed=4, created_by="test", grid=(2, 3))
    assert read_sidecar(p)["grid"] == [2, 3]
    ds = load_dataset(p)
    assert ds.grid == (2, 3) and ds.meta["seed"] == "4"


class TestDataset:
    def test_grid_mismatch(self):
        with pytest.raises(PreconditionError):
            Dataset(np.zeros((3, 10)), grid=(3, 3))

    @pytest.mark.parametrize("shape", [(1, 5), (5, 1)])
    def test_too_small(self, shape):
        with pytest.raises(PreconditionError):
            Dataset(np.zeros(shape))

    def test_nonfinite(self):
        y = np.zeros((3, 3))
        y[1, 1] = np.inf
        with pytest.raises(NonFiniteError):
            Dataset(y)

    def test_read_only(self):
        ds = Dataset(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            ds.data[0, 0] = 1.0


class TestComponentSet:
    def test_whitened_flag_is_verified(self, rng):
        x = rng.standard_normal((3, 500))
        with pytest.raises(PreconditionError):
            ComponentSet(x, whitened=True)
        ComponentSet(whiten_rows(x), whitened=True)

    def test_unwhitened_accepts_anything_finite(self, rng):
        ComponentSet(rng.standard_normal((3, 50)) * 7)

    def test_loadings_shape(self, rng):
        with pytest.raises(PreconditionError):
            ComponentSet(rng.standard_normal((3, 50)), loadings=np.zeros((10, 2)))


def test_mixing_orthogonality(rng):
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    MixingMatrix(q)
    with pytest.raises(PreconditionError):
        MixingMatrix(q * 1.01)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
def test_threshold_result_alpha(alpha):
    with pytest.raises(PreconditionError):
        ThresholdResult(alpha=alpha, tau=1.0, supports=np.zeros((1, 2), bool), method="gaussian")
