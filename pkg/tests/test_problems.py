import numpy as np
import pytest

from suda.arrayfile import read_arrays, write_arrays
from suda.errors import InvalidParameterError
from suda.problems import (
    GradOracle,
    gen_logistic,
    gen_pl_toy,
    gen_quadratic,
    make_problem,
)


def finite_difference(problem, i, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (problem.local_value(i, x + e) - problem.local_value(i, x - e)) / (2 * h)
    return g


ALL_KINDS = [
    lambda: gen_logistic(n=4, d=6, l_samples=50, rho=0.001, het_var=0.5, seed=2),
    lambda: gen_pl_toy(8, 1.5),
    lambda: gen_quadratic(n=5, d=4, het_var=2.0, seed=4),
]


class TestGradients:
    @pytest.mark.parametrize("factory", ALL_KINDS)
    def test_finite_difference_agreement(self, factory):
        problem = factory()
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            i = int(rng.integers(problem.n))
            x = rng.normal(size=problem.d) * 2.0
            g = problem.local_grad(i, x)
            fd = finite_difference(problem, i, x)
            rel = np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-8)
            worst = max(worst, rel)
        assert worst <= 1e-6

    @pytest.mark.parametrize("factory", ALL_KINDS)
    def test_block_matches_local(self, factory):
        problem = factory()
        rng = np.random.default_rng(3)
        X = rng.normal(size=(problem.n, problem.d))
        blocked = problem.grad_block(X)
        for i in range(problem.n):
            assert np.allclose(blocked[i], problem.local_grad(i, X[i]), atol=1e-12)

    def test_nonfinite_rejected(self):
        problem = gen_quadratic(n=3, d=2, het_var=1.0, seed=0)
        X = np.full((3, 2), np.nan)
        with pytest.raises(InvalidParameterError):
            problem.grad_block(X)

    def test_logistic_label_flip_negates_data_term(self):
        problem = gen_logistic(n=2, d=4, l_samples=30, rho=0.0, het_var=0.0, seed=5)
        flipped = gen_logistic(n=2, d=4, l_samples=30, rho=0.0, het_var=0.0, seed=5)
        flipped.labels = -flipped.labels
        x0 = np.zeros(4)
        assert np.allclose(problem.local_grad(0, x0), -flipped.local_grad(0, x0), atol=1e-12)

    def test_pl_toy_grad_at_zero_is_ai(self):
        problem = gen_pl_toy(8, 1.5)
        for i in range(8):
            assert problem.local_grad(i, np.zeros(1))[0] == pytest.approx(problem.a[i], abs=1e-14)


class TestGenerators:
    def test_logistic_defaults_match_reference_protocol(self):
        import inspect

        sig = inspect.signature(gen_logistic)
        assert sig.parameters["d"].default == 20
        assert sig.parameters["l_samples"].default == 2000
        assert sig.parameters["rho"].default == 0.001

    def test_logistic_labels_pm_one(self):
        problem = gen_logistic(n=3, d=4, l_samples=40, rho=0.001, het_var=1.0, seed=1)
        assert set(np.unique(problem.labels)) <= {-1.0, 1.0}

    def test_logistic_deterministic(self):
        a = gen_logistic(n=3, d=4, l_samples=20, rho=0.001, het_var=0.3, seed=9)
        b = gen_logistic(n=3, d=4, l_samples=20, rho=0.001, het_var=0.3, seed=9)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_logistic_homogeneous_when_het_zero(self):
        # all agents label with the same solution: same label probabilities
        problem = gen_logistic(n=4, d=3, l_samples=10, rho=0.001, het_var=0.0, seed=3)
        assert problem.heterogeneity_at(np.zeros(3)) < 0.1  # finite-sample only

    def test_heterogeneity_increases_with_het_var(self):
        x0 = np.zeros(20)

        def avg_het(hv):
            vals = []
            for seed in range(10):
                p = gen_logistic(n=4, d=20, l_samples=200, rho=0.001, het_var=hv, seed=seed)
                vals.append(p.heterogeneity_at(x0))
            return np.mean(vals)

        h0, h1, h2 = avg_het(0.0), avg_het(0.5), avg_het(2.0)
        assert h0 < h1 < h2

    def test_pl_toy_pairing(self):
        problem = gen_pl_toy(32, 2.0)
        assert problem.a[0] == 2.0  # a_1 = het * 1
        assert problem.a[30] == -2.0  # a_{n-1} = -a_1
        assert abs(problem.a.sum()) < 1e-12

    def test_pl_toy_average_is_clean(self):
        problem = gen_pl_toy(6, 3.0)
        xs = np.linspace(-4, 4, 21)
        for x in xs:
            mean = np.mean([problem.local_value(i, np.array([x])) for i in range(6)])
            assert mean == pytest.approx(x * x + 3 * np.sin(x) ** 2, abs=1e-12)

    def test_pl_toy_odd_n_rejected(self):
        with pytest.raises(InvalidParameterError):
            gen_pl_toy(7, 1.0)

    def test_pl_constant_positive(self):
        problem = gen_pl_toy(8, 1.0)
        mu = problem.pl_constant()
        assert 0.05 < mu < 8.0
        # surrogate inequality on a grid
        xs = np.linspace(-5, 5, 501)
        xs = xs[np.abs(xs) > 1e-3]
        f = xs**2 + 3 * np.sin(xs) ** 2
        g = 2 * xs + 3 * np.sin(2 * xs)
        assert np.all(g**2 + 1e-12 >= 2 * mu * f)

    def test_make_problem_dispatch(self):
        p = make_problem({"kind": "pl_toy", "n": 4, "het_var": 0.5})
        assert p.kind == "pl_toy"
        with pytest.raises(InvalidParameterError):
            make_problem({"kind": "nope"})
        with pytest.raises(InvalidParameterError):
            make_problem({"kind": "pl_toy", "n": 4, "het_var": 0.5, "bogus": 1})


class TestReferenceOptimum:
    def test_pl_toy_exact_zero(self):
        problem = gen_pl_toy(4, 1.0)
        val, tag = problem.reference_optimum()
        assert val == 0.0 and tag == "exact"

    def test_quadratic_closed_form(self):
        problem = gen_quadratic(n=6, d=3, het_var=2.0, seed=8)
        val, tag = problem.reference_optimum()
        # brute-force check: value at the mean target, and no lower nearby
        xbar = problem.targets.mean(axis=0)
        assert val == pytest.approx(problem.global_value(xbar), abs=1e-14)
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert problem.global_value(xbar + 0.1 * rng.normal(size=3)) >= val

    def test_logistic_cached(self, tmp_path):
        problem = gen_logistic(n=2, d=3, l_samples=40, rho=0.01, het_var=0.0, seed=4)
        val, tag = problem.reference_optimum(cache_dir=tmp_path, grad_tol=1e-8)
        assert "centralized-gd" in tag
        assert np.linalg.norm(problem.global_grad(np.zeros(3))) > 1e-8  # nontrivial
        val2, tag2 = problem.reference_optimum(cache_dir=tmp_path)
        assert val2 == val and "cached" in tag2


class TestOracle:
    def test_zero_noise_exact(self):
        problem = gen_quadratic(n=3, d=4, het_var=1.0, seed=0)
        oracle = GradOracle(problem, 0.0, seed=1)
        X = np.ones((3, 4))
        assert np.array_equal(oracle.stoch_grad_block(X, 5), problem.grad_block(X))

    def test_noise_moments(self):
        problem = gen_quadratic(n=2, d=5, het_var=0.0, seed=0)
        var = 0.04
        oracle = GradOracle(problem, var, seed=3)
        draws = np.stack([oracle.noise_block(k) for k in range(20000)])
        emp_var = draws.var(axis=0)
        assert np.max(np.abs(emp_var - var)) < 0.05 * var
        # mean within 3 sigma / sqrt(N)
        assert np.max(np.abs(draws.mean(axis=0))) < 3 * np.sqrt(var / 20000)

    def test_keyed_reproducibility(self):
        problem = gen_quadratic(n=3, d=2, het_var=1.0, seed=0)
        a = GradOracle(problem, 0.5, seed=7)
        b = GradOracle(problem, 0.5, seed=7)
        assert np.array_equal(a.noise_block(3), b.noise_block(3))
        assert not np.array_equal(a.noise_block(3), a.noise_block(4))

    def test_streams_independent_across_agents(self):
        problem = gen_quadratic(n=2, d=1, het_var=1.0, seed=0)
        oracle = GradOracle(problem, 1.0, seed=2)
        draws = np.stack([oracle.noise_block(k) for k in range(5000)])[:, :, 0]
        corr = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
        assert abs(corr) < 0.05


class TestArrayFile:
    def test_roundtrip(self, tmp_path):
        arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([3.14])}
        path = tmp_path / "x.bin"
        write_arrays(path, arrays, {"kind": "test"})
        loaded, meta = read_arrays(path)
        assert meta == {"kind": "test"}
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])

    def test_header_is_json_line(self, tmp_path):
        import json

        path = tmp_path / "x.bin"
        write_arrays(path, {"v": np.zeros(4)}, {})
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
        assert header["arrays"][0]["shape"] == [4]
