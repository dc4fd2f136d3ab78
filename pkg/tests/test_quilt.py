import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from phantomhaz.quilt import (
    Axis,
    Lattice,
    ParamDecomposition,
    PriorSpec,
    horseshoe_joint_logprior,
    horseshoe_logprior,
    prior_scale,
    softplus,
)


def two_axis_lattice(counts=None):
    axes = [Axis("g1", ("a", "c")), Axis("g2", ("b", "d"))]
    if counts is None:
        counts = np.full((2, 2), 25.0)
    return Lattice(axes, counts)


def brute_force_lookup(dec, kappa_idx):
    """Oracle: enumerate every stored term and sum the matching slices."""
    total = np.zeros(dec.value_shape)
    for subset, arr in dec.terms.items():
        total = total + arr[tuple(kappa_idx[d] for d in subset)]
    # re-derive independently from the definition: all subsets up to max_order
    check = np.zeros(dec.value_shape)
    for order in range(dec.max_order + 1):
        for subset in itertools.combinations(range(dec.lattice.n_axes), order):
            if subset in dec.terms:
                check = check + dec.terms[subset][tuple(kappa_idx[d] for d in subset)]
    assert np.allclose(total, check)
    return total


class TestLookup:
    def test_two_axis_additive_example(self):
        lat = two_axis_lattice()
        dec = ParamDecomposition(lat, max_order=2)
        dec.terms[()][...] = 0.2
        dec.terms[(0,)][0] = -0.1
        dec.terms[(1,)][0] = 0.3
        dec.terms[(0, 1)][0, 0] = 0.05
        assert dec.lookup(("a", "b")) == pytest.approx(0.45, abs=1e-15)

    def test_zero_higher_orders_gives_constant(self):
        lat = two_axis_lattice()
        dec = ParamDecomposition(lat, max_order=2)
        dec.terms[()][...] = 1.7
        for kappa in itertools.product("ac", "bd"):
            assert dec.lookup(kappa) == pytest.approx(1.7)

    def test_three_axis_matches_subset_sum_oracle(self):
        rng = np.random.default_rng(3)
        axes = [Axis("x", ("0", "1", "2")), Axis("y", ("0", "1")), Axis("z", ("0", "1", "2", "3"))]
        lat = Lattice(axes, np.ones((3, 2, 4)))
        dec = ParamDecomposition(lat, max_order=2, value_shape=(2,))
        for subset in dec.subsets():
            dec.terms[subset][...] = rng.normal(size=dec.terms[subset].shape)
        for kappa in itertools.product(range(3), range(2), range(4)):
            expected = brute_force_lookup(dec, kappa)
            np.testing.assert_allclose(dec.lookup(kappa), expected, atol=1e-14)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(4)
        lat = two_axis_lattice()
        dec = ParamDecomposition(lat, max_order=2, value_shape=(3,))
        for subset in dec.subsets():
            dec.terms[subset][...] = rng.normal(size=dec.terms[subset].shape)
        kappa_idx = rng.integers(0, 2, size=(40, 2))
        batch = dec.lookup_batch(kappa_idx)
        for i, row in enumerate(kappa_idx):
            np.testing.assert_allclose(batch[i], dec.lookup(tuple(row)), atol=1e-14)

    def test_out_of_bounds_raises(self):
        dec = ParamDecomposition(two_axis_lattice(), max_order=1)
        with pytest.raises(IndexError):
            dec.lookup((2, 0))
        with pytest.raises(KeyError):
            dec.lookup(("nope", "b"))

    def test_linearity_in_terms(self):
        rng = np.random.default_rng(5)
        lat = two_axis_lattice()
        d1 = ParamDecomposition(lat, 2)
        d2 = ParamDecomposition(lat, 2)
        for subset in d1.subsets():
            d1.terms[subset][...] = rng.normal(size=d1.terms[subset].shape)
            d2.terms[subset][...] = rng.normal(size=d2.terms[subset].shape)
        for kappa in itertools.product(range(2), range(2)):
            combined = (d1 + d2).lookup(kappa)
            assert abs(combined - (d1.lookup(kappa) + d2.lookup(kappa))) < 1e-12

    def test_balanced_mean_zero_first_order_sums_to_zero(self):
        lat = two_axis_lattice(np.full((2, 2), 10.0))
        dec = ParamDecomposition(lat, 1)
        dec.terms[(0,)][...] = np.array([0.75, -0.75])
        weights = lat.cell_counts / lat.total_n
        total = sum(
            weights[i, j] * dec.lookup((i, j))
            for i in range(2)
            for j in range(2)
        )
        assert total == pytest.approx(0.0, abs=1e-15)


class TestPriorScale:
    def test_proportional_to_count(self):
        counts = np.array([[100.0, 200.0], [300.0, 400.0]])
        lat = two_axis_lattice(counts)
        dec = ParamDecomposition(lat, 2)
        prior = PriorSpec(base_variance=1.0)
        # axis 0, level 0 has marginal count 300 of 1000
        assert prior_scale(dec, ("g1",), ("a",), prior) == pytest.approx(0.3)
        assert prior_scale(dec, (0, 1), (0, 0), prior) == pytest.approx(0.1)

    def test_zero_order_is_base_variance(self):
        dec = ParamDecomposition(two_axis_lattice(), 2)
        assert prior_scale(dec, (), (), PriorSpec(1.0)) == pytest.approx(1.0)
        assert prior_scale(dec, (), (), PriorSpec(2.5)) == pytest.approx(2.5)

    def test_empty_cell_floor(self):
        counts = np.array([[0.0, 0.0], [500.0, 500.0]])
        lat = two_axis_lattice(counts)
        dec = ParamDecomposition(lat, 2)
        assert prior_scale(dec, ("g1",), ("a",), PriorSpec(1.0)) == pytest.approx(1e-8)

    def test_monotone_in_count(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            c1, c2 = sorted(rng.uniform(0, 1000, size=2))
            counts = np.array([[c1, 0.0], [c2, 0.0]])
            lat = two_axis_lattice(counts)
            dec = ParamDecomposition(lat, 1)
            v1 = prior_scale(dec, (0,), (0,), PriorSpec(1.0))
            v2 = prior_scale(dec, (0,), (1,), PriorSpec(1.0))
            assert v1 <= v2


def horseshoe_marginal_oracle(v, g, c):
    """1-D quadrature over the half-Cauchy local scale."""

    def integrand(lam):
        var = c**2 * g**2 * lam**2 / (c**2 + g**2 * lam**2)
        return (
            np.exp(-0.5 * v * v / var)
            / np.sqrt(2 * np.pi * var)
            * 2.0
            / (np.pi * (1 + lam**2))
        )

    val, _ = integrate.quad(integrand, 0.0, np.inf, limit=500)
    return np.log(val)


class TestHorseshoe:
    def test_symmetric(self):
        v = np.array([0.3, -1.2, 2.0])
        a = horseshoe_logprior(v, 0.1, 1.0)
        b = horseshoe_logprior(-v, 0.1, 1.0)
        assert a == pytest.approx(b, rel=1e-12)

    def test_marginal_matches_quadrature_oracle(self):
        # DERIVED oracle: independent 1-D integration over the local scale
        values = np.array([0.1, 1.0, 3.0])
        g, c = 0.15, 2.0
        expected = sum(horseshoe_marginal_oracle(v, g, c) for v in values)
        assert horseshoe_logprior(values, g, c) == pytest.approx(expected, abs=1e-4)

    def test_joint_finite_max_at_zero_given_auxiliaries(self):
        raw = np.array([0.5, -0.3, 1.0])
        lp0, grad_v, _ = horseshoe_joint_logprior(np.zeros(3), raw, 0.1, 1.0)
        assert np.isfinite(lp0)
        np.testing.assert_allclose(grad_v, 0.0, atol=1e-14)
        lp_off, _, _ = horseshoe_joint_logprior(np.full(3, 0.05), raw, 0.1, 1.0)
        assert lp_off < lp0

    def test_joint_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=5)
        a = rng.normal(size=5)
        lp, gv, ga = horseshoe_joint_logprior(v, a, 0.2, 1.5)
        eps = 1e-6
        for i in range(5):
            dv = np.zeros(5)
            dv[i] = eps
            up, _, _ = horseshoe_joint_logprior(v + dv, a, 0.2, 1.5)
            dn, _, _ = horseshoe_joint_logprior(v - dv, a, 0.2, 1.5)
            assert gv[i] == pytest.approx((up - dn) / (2 * eps), rel=1e-5, abs=1e-8)
            up, _, _ = horseshoe_joint_logprior(v, a + dv, 0.2, 1.5)
            dn, _, _ = horseshoe_joint_logprior(v, a - dv, 0.2, 1.5)
            assert ga[i] == pytest.approx((up - dn) / (2 * eps), rel=1e-5, abs=1e-8)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            horseshoe_logprior(np.array([np.nan]), 0.1, 1.0)
        with pytest.raises(ValueError):
            horseshoe_logprior(np.array([1.0]), -0.1, 1.0)

    def test_softplus_positive(self):
        x = np.linspace(-20, 20, 41)
        assert np.all(softplus(x) > 0)


class TestSerialization:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(8)
        axes = [Axis("mdc", ("m1", "m2", "m3")), Axis("hx", ("lo", "hi"))]
        lat = Lattice(axes, rng.integers(1, 50, size=(3, 2)).astype(float))
        dec = ParamDecomposition(lat, 2, value_shape=(4,))
        for subset in dec.subsets():
            dec.terms[subset][...] = rng.normal(size=dec.terms[subset].shape)
        restored = ParamDecomposition.from_json(dec.to_json())
        assert restored.subsets() == dec.subsets()
        for subset in dec.subsets():
            np.testing.assert_array_equal(restored.terms[subset], dec.terms[subset])
        np.testing.assert_array_equal(
            restored.lattice.cell_counts, lat.cell_counts
        )

    def test_wildcard_keys_in_wire_format(self):
        dec = ParamDecomposition(two_axis_lattice(), 1)
        obj = dec.to_json_dict()
        keys = [tuple(e["key"]) for e in obj["terms"]]
        assert ("*", "*") in keys
        assert ("a", "*") in keys and ("*", "d") in keys

    def test_wildcard_level_name_rejected(self):
        with pytest.raises(ValueError):
            Axis("bad", ("*", "x"))


class TestLattice:
    def test_counts_must_match_total(self):
        axes = [Axis("a", ("x", "y"))]
        with pytest.raises(ValueError):
            Lattice(axes, np.array([1.0, 2.0]), total_n=10)

    def test_from_assignments(self):
        axes = [Axis("a", ("x", "y")), Axis("b", ("u", "v"))]
        lat = Lattice.from_assignments(axes, [("x", "u"), ("x", "u"), ("y", "v")])
        assert lat.cell_counts[0, 0] == 2
        assert lat.cell_counts[1, 1] == 1
        assert lat.total_n == 3

    @given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=4))
    @settings(max_examples=20, deadline=None)
    def test_marginal_counts_sum_to_total(self, n1, n2):
        axes = [
            Axis("a", tuple(f"a{i}" for i in range(n1))),
            Axis("b", tuple(f"b{i}" for i in range(n2))),
        ]
        counts = np.arange(n1 * n2, dtype=float).reshape(n1, n2) + 1
        lat = Lattice(axes, counts)
        assert lat.marginal_counts((0,)).sum() == pytest.approx(lat.total_n)
        assert lat.marginal_counts((1,)).sum() == pytest.approx(lat.total_n)
