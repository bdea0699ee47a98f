import numpy as np
import pytest

from pseudolab import tensor
from pseudolab.tensor import SeededRng, ShapeError


class TestMatmul:
    def test_identity(self):
        rng = SeededRng(1)
        a = rng.gaussian((3, 3))
        eye = np.eye(3, dtype=np.float32)
        assert np.array_equal(tensor.matmul(eye, a), a)

    def test_hand_checked_2x2(self):
        a = tensor.as_tensor([[1, 2], [3, 4]])
        b = tensor.as_tensor([[0], [1]])
        assert np.array_equal(tensor.matmul(a, b), tensor.as_tensor([[2], [4]]))

    def test_matches_naive_triple_loop_bitwise(self):
        rng = SeededRng(8371)
        a = rng.gaussian((8, 8))
        b = rng.gaussian((8, 8))
        got = tensor.matmul(a, b)
        ref = np.zeros((8, 8), dtype=np.float64)
        for i in range(8):
            for j in range(8):
                acc = 0.0
                for k in range(8):
                    acc += float(a[i, k]) * float(b[k, j])
                ref[i, j] = acc
        assert np.array_equal(got, ref.astype(np.float32))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tensor.matmul(np.zeros((2, 3), np.float32), np.zeros((2, 3), np.float32))
        with pytest.raises(ShapeError):
            tensor.matmul(np.zeros(3, np.float32), np.zeros((3, 1), np.float32))


class TestSoftmax:
    def test_symmetry(self):
        out = tensor.softmax(tensor.as_tensor([0.0, 0.0]), axis=0)
        assert np.allclose(out, [0.5, 0.5], atol=1e-7)

    def test_large_logits_no_overflow(self):
        out = tensor.softmax(tensor.as_tensor([1000.0, 0.0]), axis=0)
        assert np.all(np.isfinite(out))
        assert abs(out[0] - 1.0) < 1e-6 and abs(out[1]) < 1e-6

    def test_matches_exp_normalize_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        got = tensor.softmax(tensor.as_tensor(x), axis=0)
        e = np.exp(x)
        assert np.allclose(got, e / e.sum(), atol=1e-7)

    def test_rows_are_simplex_points(self):
        rng = SeededRng(5)
        for trial in range(50):
            x = rng.gaussian((4, 6), sigma=5.0)
            p = tensor.softmax(x, axis=1)
            assert np.all(p >= 0)
            assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-6)

    def test_shift_invariance(self):
        rng = SeededRng(6)
        for trial in range(50):
            x = rng.gaussian((3, 5), sigma=3.0)
            shift = float(rng.gaussian((), sigma=50.0))
            a = tensor.softmax(x, axis=1)
            b = tensor.softmax(x + np.float32(shift), axis=1)
            assert np.all(np.abs(a - b) < 1e-6)


class TestMeanStd:
    def test_constant_slice(self):
        m, s = tensor.mean_std(tensor.as_tensor([0.7, 0.7, 0.7]), axis=0)
        assert abs(float(m) - 0.7) < 1e-7
        assert float(s) == 0.0

    def test_two_point(self):
        m, s = tensor.mean_std(tensor.as_tensor([0.0, 1.0]), axis=0)
        assert float(m) == 0.5 and float(s) == 0.5

    def test_matches_two_pass_oracle(self):
        rng = SeededRng(17)
        x = rng.uniform((5,))
        m, s = tensor.mean_std(x, axis=0)
        mu = sum(float(v) for v in x) / 5
        var = sum((float(v) - mu) ** 2 for v in x) / 5
        assert abs(float(m) - mu) < 1e-7
        assert abs(float(s) - var**0.5) < 1e-7

    def test_population_divisor(self):
        x = tensor.as_tensor([1.0, 2.0, 3.0, 4.0])
        _, s = tensor.mean_std(x, axis=0)
        assert abs(float(s) - np.sqrt(1.25)) < 1e-6  # /n, not /(n-1)

    def test_permutation_invariance(self):
        rng = SeededRng(23)
        x = rng.uniform((6, 11))
        m1, s1 = tensor.mean_std(x, axis=1)
        for trial in range(10):
            perm = rng.permutation(11)
            m2, s2 = tensor.mean_std(x[:, perm], axis=1)
            assert np.allclose(m1, m2, atol=1e-7)
            assert np.allclose(s1, s2, atol=1e-7)

    def test_empty_axis_rejected(self):
        with pytest.raises(ShapeError):
            tensor.mean_std(np.zeros((0, 3), np.float32), axis=0)


class TestSeededRng:
    def test_bernoulli_edge_cases(self):
        rng = SeededRng(3)
        assert not rng.bernoulli((500,), 0.0).any()
        assert rng.bernoulli((500,), 1.0).all()

    def test_same_seed_identical_tensors(self):
        a = SeededRng(42)
        b = SeededRng(42)
        assert np.array_equal(a.uniform((100,)), b.uniform((100,)))
        assert np.array_equal(a.gaussian((50,), 1.0, 2.0), b.gaussian((50,), 1.0, 2.0))
        assert np.array_equal(a.bernoulli((50,), 0.3), b.bernoulli((50,), 0.3))
        assert np.array_equal(a.permutation(64), b.permutation(64))

    def test_bernoulli_mean_within_3_sigma(self):
        p = 0.37
        draws = SeededRng(911).bernoulli((1_000_000,), p)
        sigma = np.sqrt(p * (1 - p) / 1_000_000)
        assert abs(float(draws.mean()) - p) <= 3 * sigma

    def test_fork_paths_are_independent_and_composable(self):
        root = SeededRng(7)
        assert root.fork(2, 5).seed == root.fork(2).fork(5).seed
        assert root.fork(0).seed != root.fork(1).seed
        a = root.fork(0).uniform((64,))
        b = root.fork(1).uniform((64,))
        assert not np.array_equal(a, b)

    def test_parameter_validation(self):
        rng = SeededRng(1)
        with pytest.raises(ValueError):
            rng.bernoulli((3,), 1.5)
        with pytest.raises(ValueError):
            rng.gaussian((3,), 0.0, -1.0)
        with pytest.raises(ValueError):
            SeededRng(-1)

    def test_module_level_wrappers(self):
        rng = SeededRng(9)
        assert tensor.rng_uniform(SeededRng(9), (8,)).tolist() == rng.uniform((8,)).tolist()
        assert tensor.rng_bernoulli(SeededRng(9), (8,), 0.5).shape == (8,)
        assert tensor.rng_gaussian(SeededRng(9), (8,), 2.0, 0.0).tolist() == [2.0] * 8
