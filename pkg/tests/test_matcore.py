import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saraopt import matcore
from saraopt.matcore import (
    RankDeficientError,
    RngStream,
    ShapeMismatchError,
    add_scaled,
    deterministic_mode,
    frobenius_norm,
    gaussian_matrix,
    hadamard,
    load_matrix,
    matmul,
    matrix_from_json,
    matrix_to_json,
    qr_orthonormal,
    save_matrix,
    spectral_norm,
    svd,
    transpose,
)


def random_matrix(seed, m, n, scale=1.0):
    return gaussian_matrix(RngStream(seed), m, n) * scale


class TestSvd:
    def test_diagonal_matrix(self):
        f = svd(np.diag([3.0, 1.0]))
        assert np.allclose(f.S, [3.0, 1.0])
        assert np.allclose(f.U, np.eye(2))
        assert np.allclose(f.Vt, np.eye(2))

    def test_zero_matrix(self):
        f = svd(np.zeros((3, 2)))
        assert f.S.shape == (2,)
        assert np.all(f.S == 0.0)

    def test_reconstruction(self):
        a = random_matrix(11, 4, 3)
        f = svd(a)
        rec = f.U @ np.diag(f.S) @ f.Vt
        rel = np.linalg.norm(rec - a) / np.linalg.norm(a)
        assert rel <= 1e-10

    def test_factor_invariants(self):
        for seed, (m, n) in enumerate([(5, 3), (3, 5), (6, 6), (2, 9)]):
            a = random_matrix(100 + seed, m, n)
            f = svd(a)
            k = min(m, n)
            assert np.all(np.diff(f.S) <= 0) and np.all(f.S >= 0)
            assert np.max(np.abs(f.U.T @ f.U - np.eye(k))) <= 1e-10
            assert np.max(np.abs(f.Vt @ f.Vt.T - np.eye(k))) <= 1e-10

    def test_sign_canonicalization(self):
        for seed in range(10):
            f = svd(random_matrix(200 + seed, 5, 4))
            for j in range(f.U.shape[1]):
                col = f.U[:, j]
                nz = np.flatnonzero(col)
                assert col[nz[0]] > 0

    def test_deterministic(self):
        a = random_matrix(3, 6, 4)
        f1, f2 = svd(a), svd(a.copy())
        assert np.array_equal(f1.U, f2.U)
        assert np.array_equal(f1.S, f2.S)
        assert np.array_equal(f1.Vt, f2.Vt)

    def test_reconstruction_property_random_shapes(self):
        # shapes up to 64x64
        rng = RngStream(42).child("shapes")
        for trial in range(25):
            m = int(rng.gen.integers(1, 65))
            n = int(rng.gen.integers(1, 65))
            a = gaussian_matrix(rng.child(trial), m, n)
            f = svd(a)
            rec = f.U @ np.diag(f.S) @ f.Vt
            assert np.linalg.norm(rec - a) <= 1e-9 * max(np.linalg.norm(a), 1.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            svd(np.array([[np.nan, 1.0], [0.0, 2.0]]))


class TestQr:
    def test_identity_columns(self):
        a = np.eye(3)[:, :2]
        q = qr_orthonormal(a)
        assert np.allclose(q, a)

    def test_scaling_removal(self):
        q = qr_orthonormal(np.array([[2.0, 0.0], [0.0, 3.0], [0.0, 0.0]]))
        assert np.allclose(q, np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))

    def test_gaussian_orthonormality(self):
        q = qr_orthonormal(random_matrix(8, 8, 3))
        assert np.max(np.abs(q.T @ q - np.eye(3))) <= 1e-12

    def test_span_preserved(self):
        a = random_matrix(9, 7, 3)
        q = qr_orthonormal(a)
        # projection of a onto span(q) returns a
        assert np.allclose(q @ (q.T @ a), a, atol=1e-10)

    def test_idempotent_on_orthonormal(self):
        q = qr_orthonormal(random_matrix(10, 6, 4))
        assert np.array_equal(qr_orthonormal(q), q) or np.allclose(qr_orthonormal(q), q, atol=1e-14)

    def test_rank_deficient_names_column(self):
        a = np.ones((4, 2))
        with pytest.raises(RankDeficientError, match="column 1"):
            qr_orthonormal(a)


class TestArithmetic:
    def test_matmul_identity(self):
        b = random_matrix(1, 2, 5)
        assert np.array_equal(matmul(np.eye(2), b), b)

    def test_hadamard(self):
        assert np.array_equal(hadamard([[1.0, 2.0]], [[3.0, 4.0]]), [[3.0, 8.0]])

    def test_frobenius(self):
        assert frobenius_norm([[3.0, 4.0]]) == pytest.approx(5.0, abs=1e-15)

    def test_add_scaled(self):
        a, b = np.ones((2, 2)), np.full((2, 2), 2.0)
        assert np.array_equal(add_scaled(a, b, -0.5), np.zeros((2, 2)))

    def test_transpose(self):
        a = random_matrix(2, 3, 4)
        assert np.array_equal(transpose(a), a.T)

    def test_spectral_norm_matches_svd(self):
        a = random_matrix(5, 6, 4)
        assert spectral_norm(a) == pytest.approx(svd(a).S[0], rel=1e-12)

    def test_shape_mismatch_messages(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeMismatchError):
            hadamard(np.ones((2, 3)), np.ones((3, 2)))

    def test_matmul_associativity_deterministic(self):
        rng = RngStream(77)
        with deterministic_mode():
            for trial in range(10):
                a = gaussian_matrix(rng.child(f"a{trial}"), 5, 4)
                b = gaussian_matrix(rng.child(f"b{trial}"), 4, 6)
                c = gaussian_matrix(rng.child(f"c{trial}"), 6, 3)
                left = matmul(matmul(a, b), c)
                right = matmul(a, matmul(b, c))
                assert np.linalg.norm(left - right) <= 1e-9 * max(np.linalg.norm(left), 1.0)

    def test_deterministic_mode_matches_default(self):
        a, b = random_matrix(21, 6, 5), random_matrix(22, 5, 7)
        with deterministic_mode():
            d = matmul(a, b)
        assert np.allclose(d, a @ b, atol=1e-12)


class TestRngStream:
    def test_reproducible(self):
        a = gaussian_matrix(RngStream(5, 9), 3, 4)
        b = gaussian_matrix(RngStream(5, 9), 3, 4)
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = gaussian_matrix(RngStream(5, 1), 3, 4)
        b = gaussian_matrix(RngStream(5, 2), 3, 4)
        assert not np.array_equal(a, b)

    def test_child_streams_stable(self):
        a = RngStream(17).child("noise").child(3)
        b = RngStream(17).child("noise").child(3)
        assert a.stream_id == b.stream_id
        assert np.array_equal(a.gen.standard_normal(5), b.gen.standard_normal(5))

    def test_gaussian_moments(self):
        x = gaussian_matrix(RngStream(123), 400, 250)  # 1e5 entries
        assert abs(x.mean()) <= 0.02
        assert abs(x.var() - 1.0) <= 0.03

    def test_stream_independence_correlation(self):
        x = gaussian_matrix(RngStream(9, 1), 200, 50).ravel()
        y = gaussian_matrix(RngStream(9, 2), 200, 50).ravel()
        corr = np.corrcoef(x, y)[0, 1]
        assert abs(corr) <= 0.02

    def test_gaussian_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            gaussian_matrix(RngStream(0), 0, 3)


class TestSerialization:
    def test_binary_roundtrip(self, tmp_path):
        a = random_matrix(31, 5, 7)
        path = tmp_path / "a.mat"
        save_matrix(path, a)
        assert np.array_equal(load_matrix(path), a)

    def test_binary_layout(self, tmp_path):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        path = tmp_path / "a.mat"
        save_matrix(path, a)
        raw = path.read_bytes()
        assert raw[:16] == (2).to_bytes(8, "little") * 2
        assert np.frombuffer(raw[16:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "bad.mat"
        path.write_bytes(b"\x01\x00")
        with pytest.raises(ValueError, match="truncated"):
            load_matrix(path)

    def test_json_roundtrip(self):
        a = random_matrix(32, 3, 2)
        assert np.array_equal(matrix_from_json(matrix_to_json(a)), a)

    @settings(max_examples=25, deadline=None)
    @given(
        m=st.integers(1, 12),
        n=st.integers(1, 12),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_binary_roundtrip_property(self, tmp_path_factory, m, n, seed):
        a = gaussian_matrix(RngStream(seed), m, n)
        path = tmp_path_factory.mktemp("mats") / "m.mat"
        save_matrix(path, a)
        assert np.array_equal(load_matrix(path), a)
