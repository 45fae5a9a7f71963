"""Spectral core: transforms against direct DFT sums, Leray projection, bases, cutoffs."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsns.spectral import (
    CutoffProfile,
    SpectralField,
    WaveGrid,
    apply_cutoff,
    apply_leray,
    cutoff_extent,
    dealias_points_required,
    divfree_basis,
    field_inner,
    frac_laplacian_apply,
    leray_multiplier,
    reflect_modes,
    satisfies_dealias_rule,
    transform_forward,
    transform_inverse,
    _forward_array,
    _forward_real,
    _inverse_array,
    _inverse_real,
)


def _grid(d, M, m, n):
    return WaveGrid(d=d, M=M, modes_per_axis=m, physical_points_per_axis=n)


def _random_hermitian_coeffs(grid, rng, shape=()):
    """Coefficient array of a real field: c(-k) = conj(c(k))."""
    raw = rng.standard_normal(shape + grid.box_shape) + 1j * rng.standard_normal(
        shape + grid.box_shape
    )
    return 0.5 * (raw + reflect_modes(np.conj(raw), grid.d))


def _dft_forward_oracle(values, grid):
    """O((n m)^d) direct evaluation of the forward transform sum."""
    n, M, d = grid.physical_points_per_axis, grid.M, grid.d
    out = np.zeros(grid.box_shape, dtype=complex)
    cell = (M / n) ** d
    for kappa in itertools.product(*(grid.kappa_axis,) * d):
        acc = 0.0 + 0.0j
        for j in itertools.product(*(range(n),) * d):
            phase = -2j * np.pi * sum(k * jj / n for k, jj in zip(kappa, j))
            acc += values[j] * np.exp(phase)
        out[tuple(int(k) for k in kappa)] = cell * acc
    return out


@pytest.fixture(scope="module")
def grid2():
    return _grid(2, 1.0, 5, 8)


@pytest.fixture(scope="module")
def grid2_rect():
    return _grid(2, 2.5, 5, 9)


@pytest.fixture(scope="module")
def grid3():
    return _grid(3, 1.0, 5, 8)


def test_grid_validation():
    with pytest.raises(ValueError):
        _grid(4, 1.0, 5, 8)
    with pytest.raises(ValueError):
        _grid(2, 1.0, 4, 8)
    with pytest.raises(ValueError):
        _grid(2, 1.0, 9, 7)
    with pytest.raises(ValueError):
        _grid(2, -1.0, 5, 8)


def test_kappa_axis_order(grid2):
    assert grid2.h == 2
    assert np.array_equal(grid2.kappa_axis, [0, 1, 2, -2, -1])


def test_forward_matches_direct_dft(grid2_rect):
    rng = np.random.default_rng(0)
    n = grid2_rect.physical_points_per_axis
    u = rng.standard_normal((n, n))
    got = _forward_array(u.astype(complex), grid2_rect)
    want = _dft_forward_oracle(u, grid2_rect)
    assert np.max(np.abs(got - want)) < 1e-11


def test_forward_constant(grid3):
    n = grid3.physical_points_per_axis
    u = np.full((1, n, n, n), 3.25)
    f = transform_forward(u, grid3)
    want = np.zeros((1,) + grid3.box_shape)
    want[0, 0, 0, 0] = 3.25 * grid3.M**3
    assert np.max(np.abs(f.coeffs - want)) < 1e-12


def test_forward_cosine(grid2_rect):
    g = grid2_rect
    n = g.physical_points_per_axis
    x = np.arange(n) * (g.M / n)
    u = (np.cos(2 * np.pi * x[:, None] / g.M) + 0.0 * x[None, :])[None]
    f = transform_forward(u, g)
    want = np.zeros((1,) + g.box_shape, dtype=complex)
    want[0, 1, 0] = g.M**2 / 2
    want[0, -1, 0] = g.M**2 / 2
    assert np.max(np.abs(f.coeffs - want)) < 1e-12


@pytest.mark.parametrize("which", ["grid2", "grid2_rect", "grid3"])
def test_round_trip_real_field(which, request):
    grid = request.getfixturevalue(which)
    rng = np.random.default_rng(1)
    c = _random_hermitian_coeffs(grid, rng, shape=(1,))
    u = transform_inverse(SpectralField(grid, 1, c))
    assert u.dtype == np.float64
    back = transform_forward(u, grid)
    assert np.max(np.abs(back.coeffs - c)) < 1e-12 * max(1.0, np.max(np.abs(c)))


def test_real_fast_path_matches_generic(grid3):
    n = grid3.physical_points_per_axis
    rng = np.random.default_rng(2)
    u = rng.standard_normal((4, n, n, n))
    fast = _forward_real(u, grid3)
    slow = _forward_array(u.astype(complex), grid3)
    assert np.max(np.abs(fast - slow)) < 1e-12

    c = _random_hermitian_coeffs(grid3, rng, shape=(4,))
    ur = _inverse_real(c, grid3)
    us = _inverse_array(c, grid3)
    assert np.max(np.abs(ur - us.real)) < 1e-12
    assert np.max(np.abs(us.imag)) < 1e-12


def test_inverse_rejects_non_hermitian(grid2):
    c = np.zeros((1,) + grid2.box_shape, dtype=complex)
    c[0, 1, 0] = 1.0  # no conjugate partner
    with pytest.raises(ValueError):
        transform_inverse(SpectralField(grid2, 1, c))


def test_parseval(grid2_rect):
    g = grid2_rect
    n = g.physical_points_per_axis
    rng = np.random.default_rng(3)
    fu = SpectralField(g, 1, _random_hermitian_coeffs(g, rng, shape=(1,)))
    fv = SpectralField(g, 1, _random_hermitian_coeffs(g, rng, shape=(1,)))
    u = transform_inverse(fu)
    v = transform_inverse(fv)
    phys = (g.M / n) ** 2 * np.sum(u * v)  # exact quadrature of the integral
    spec = field_inner(fu, fv)
    assert abs(phys - spec) < 1e-10 * max(1.0, abs(phys))


def test_reflect_modes_involution_and_indexing(grid2):
    rng = np.random.default_rng(4)
    a = rng.standard_normal(grid2.box_shape)
    r = reflect_modes(a, 2)
    assert np.array_equal(reflect_modes(r, 2), a)
    # entry at kappa maps to -kappa
    assert r[1, 2] == a[-1, -2]
    assert r[0, 1] == a[0, -1]
    assert r[0, 0] == a[0, 0]


# ---------------------------------------------------------------------------
# Leray projection


def test_leray_multiplier_examples():
    p = leray_multiplier(np.array([1.0, 0.0]), 2)
    assert np.allclose(p, np.diag([0.0, 1.0]), atol=1e-15)
    p = leray_multiplier(np.array([1.0, 1.0]), 2)
    assert np.allclose(p, 0.5 * np.array([[1, -1], [-1, 1]]), atol=1e-15)
    p = leray_multiplier(np.array([0.0, 0.0, 0.0]), 3)
    assert np.allclose(p, np.eye(3), atol=1e-15)


def test_leray_multiplier_is_orthogonal_projector():
    rng = np.random.default_rng(5)
    for d in (2, 3):
        for _ in range(20):
            k = rng.integers(-4, 5, size=d).astype(float)
            if not k.any():
                continue
            p = leray_multiplier(k, d)
            assert np.allclose(p, p.T, atol=1e-14)
            assert np.allclose(p @ p, p, atol=1e-14)
            assert np.allclose(p @ k, 0.0, atol=1e-13)
            assert abs(np.trace(p) - (d - 1)) < 1e-13


@pytest.mark.parametrize("which", ["grid2", "grid3"])
def test_apply_leray_idempotent_and_divfree(which, request):
    grid = request.getfixturevalue(which)
    d = grid.d
    rng = np.random.default_rng(6)
    worst_idem = 0.0
    worst_div = 0.0
    for _ in range(200):
        c = _random_hermitian_coeffs(grid, rng, shape=(d,))
        pf = apply_leray(SpectralField(grid, d, c))
        ppf = apply_leray(pf)
        scale = np.max(np.abs(pf.coeffs)) + 1e-300
        worst_idem = max(worst_idem, np.max(np.abs(ppf.coeffs - pf.coeffs)) / scale)
        worst_div = max(worst_div, pf.divergence_max() / scale)
    assert worst_idem < 1e-12, f"idempotence defect {worst_idem}"
    assert worst_div < 1e-12, f"divergence after projection {worst_div}"


def test_apply_leray_matches_dense_oracle(grid3):
    rng = np.random.default_rng(7)
    c = _random_hermitian_coeffs(grid3, rng, shape=(3,))
    pf = apply_leray(SpectralField(grid3, 3, c)).coeffs
    m = grid3.modes_per_axis
    for idx in itertools.product(range(m), repeat=3):
        kappa = np.array([grid3.kappa_axis[i] for i in idx], dtype=float)
        want = leray_multiplier(kappa, 3) @ c[(slice(None),) + idx]
        got = pf[(slice(None),) + idx]
        assert np.max(np.abs(got - want)) < 1e-13


def test_apply_leray_kills_gradients(grid3):
    rng = np.random.default_rng(9)
    phi = _random_hermitian_coeffs(grid3, rng)
    grad = 2j * np.pi * grid3.kappa_mesh / grid3.M * phi[None]
    out = apply_leray(SpectralField(grid3, 3, grad))
    # the zero mode carries no gradient, so the whole projection vanishes
    assert np.max(np.abs(out.coeffs)) < 1e-12 * max(1.0, np.max(np.abs(grad)))


# ---------------------------------------------------------------------------
# Divergence-free bases


def _gram_schmidt_projector(k):
    """Oracle: orthonormalize the complement of k within span{e_i} and sum outer products."""
    k = np.asarray(k, dtype=float)
    d = len(k)
    khat = k / np.linalg.norm(k)
    vs = []
    for i in range(d):
        v = np.zeros(d)
        v[i] = 1.0
        v = v - (v @ khat) * khat
        for w in vs:
            v = v - (v @ w) * w
        nrm = np.linalg.norm(v)
        if nrm > 1e-10:
            vs.append(v / nrm)
    assert len(vs) == d - 1
    return sum(np.outer(v, v) for v in vs)


def test_divfree_basis_rejects_zero():
    with pytest.raises(ValueError):
        divfree_basis(np.zeros(2), 2)


def test_divfree_basis_2d_example():
    basis = divfree_basis(np.array([1.0, 0.0]), 2)
    assert basis.shape == (1, 2)
    assert np.allclose(np.abs(basis[0]), [0.0, 1.0], atol=1e-15)


@pytest.mark.parametrize(
    "k",
    [
        (1, 0, 0),
        (0, 0, 3),
        (1, 1, 0),
        (2, 1, 1),
        (-1, 2, -2),
        (3, -3, 3),
        (1, 2),
        (-2, 5),
    ],
)
def test_divfree_basis_orthonormal_and_spans_complement(k):
    k = np.array(k, dtype=float)
    d = len(k)
    basis = divfree_basis(k, d)
    assert basis.shape == (d - 1, d)
    proj = np.zeros((d, d))
    for a in range(d - 1):
        assert abs(np.dot(basis[a], k)) < 1e-13, "basis vector not orthogonal to k"
        for b in range(d - 1):
            want = 1.0 if a == b else 0.0
            assert abs(np.dot(basis[a], basis[b]) - want) < 1e-13
        proj += np.outer(basis[a], basis[a])
    assert np.allclose(proj, _gram_schmidt_projector(k), atol=1e-12)
    assert np.allclose(proj, leray_multiplier(k, d), atol=1e-12)


@pytest.mark.parametrize("which", ["grid2", "grid3"])
def test_divfree_basis_mesh_matches_pointwise(which, request):
    grid = request.getfixturevalue(which)
    mesh = grid.divfree_basis_mesh
    assert mesh.shape == (grid.d - 1, grid.d) + grid.box_shape
    rng = np.random.default_rng(10)
    for _ in range(30):
        idx = tuple(rng.integers(0, grid.modes_per_axis, size=grid.d))
        kappa = np.array([grid.kappa_axis[i] for i in idx], dtype=float)
        got = mesh[(slice(None), slice(None)) + idx]
        if not kappa.any():
            assert np.array_equal(got, np.zeros_like(got))
            continue
        want = divfree_basis(kappa, grid.d)
        assert np.max(np.abs(got - want)) < 1e-14


# ---------------------------------------------------------------------------
# Fractional Laplacian and cutoffs


def test_frac_laplacian_multipliers(grid2):
    c = np.zeros((2,) + grid2.box_shape, dtype=complex)
    c[0, 1, 0] = 1.0
    c[0, -1, 0] = 1.0
    f = SpectralField(grid2, 2, c)
    out = frac_laplacian_apply(f, theta=1.0)
    assert abs(out.coeffs[0, 1, 0] - 4 * np.pi**2) < 1e-12
    half = frac_laplacian_apply(f, theta=1.0, sign="half-forcing")
    assert abs(half.coeffs[0, 1, 0] - 2 * np.pi) < 1e-12
    with pytest.raises(ValueError):
        frac_laplacian_apply(f, theta=1.0, sign="backward")
    # zero mode is annihilated for every theta
    c0 = np.zeros((2,) + grid2.box_shape, dtype=complex)
    c0[1, 0, 0] = 2.0
    g = frac_laplacian_apply(SpectralField(grid2, 2, c0), theta=0.75)
    assert np.max(np.abs(g.coeffs)) == 0.0


def test_frac_laplacian_preserves_reality(grid2):
    rng = np.random.default_rng(11)
    c = _random_hermitian_coeffs(grid2, rng, shape=(2,))
    out = frac_laplacian_apply(SpectralField(grid2, 2, c), theta=0.6)
    u = transform_inverse(out)  # raises if reality broke
    assert u.shape == (2,) + (grid2.physical_points_per_axis,) * 2


def test_sharp_cutoff_inclusive_boundary():
    prof = CutoffProfile(kind="sharp", N=2.0)
    vals = prof.evaluate(np.array([2.0, 2.0 + 1e-6, 1.9, 2.2]))
    assert vals[0] == 1.0, "modes on the shell |k| = N are retained"
    assert vals[1] == 0.0
    assert vals[2] == 1.0
    assert vals[3] == 0.0


def test_smooth_cutoff_profile():
    prof = CutoffProfile(kind="smooth", N=4.0)
    assert prof.evaluate(np.array([0.0]))[0] == 1.0
    assert prof.evaluate(np.array([4.0]))[0] == 0.0
    assert prof.evaluate(np.array([5.0]))[0] == 0.0
    r = 0.5
    want = np.exp(-(r**2) / (1 - r**2))
    assert abs(prof.evaluate(np.array([2.0]))[0] - want) < 1e-14


def test_apply_cutoff_multiplies(grid2):
    rng = np.random.default_rng(12)
    c = _random_hermitian_coeffs(grid2, rng, shape=(2,))
    prof = CutoffProfile(kind="sharp", N=1.0)
    out = apply_cutoff(SpectralField(grid2, 2, c), prof)
    mask = prof.evaluate(grid2.k_abs)
    assert np.array_equal(out.coeffs, c * mask)


def test_dealias_rule_on_reference_grids():
    sharp4 = CutoffProfile(kind="sharp", N=4.0)
    g16 = _grid(3, 1.0, 11, 16)
    assert cutoff_extent(g16, sharp4) == 4
    assert dealias_points_required(g16, sharp4) == 13
    assert satisfies_dealias_rule(g16, sharp4)
    sharp2 = CutoffProfile(kind="sharp", N=2.0)
    g8 = _grid(3, 1.0, 5, 8)
    assert dealias_points_required(g8, sharp2) == 7
    assert satisfies_dealias_rule(g8, sharp2)
    g12 = _grid(3, 1.0, 9, 12)
    assert not satisfies_dealias_rule(g12, sharp4)
    # cutoff radius clipped by the box when M*N exceeds h
    assert cutoff_extent(g8, CutoffProfile(kind="sharp", N=7.0)) == 2


def test_spectral_field_validate(grid2):
    rng = np.random.default_rng(13)
    c = _random_hermitian_coeffs(grid2, rng, shape=(2,))
    f = apply_leray(SpectralField(grid2, 2, c))
    report = f.validate(tol=1e-10)
    assert report["ok"], report
    c2 = c.copy()
    c2[:, 1, 0] += 1.0  # break the conjugate pairing with (-1, 0)
    bad = SpectralField(grid2, 2, c2)
    assert not bad.validate(tol=1e-10)["ok"]


@settings(max_examples=25, deadline=None)
@given(
    m=st.integers(min_value=1, max_value=3).map(lambda h: 2 * h + 1),
    extra=st.integers(min_value=0, max_value=4),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_property(m, extra, seed):
    grid = _grid(2, 1.5, m, m + extra)
    rng = np.random.default_rng(seed)
    c = _random_hermitian_coeffs(grid, rng, shape=(1,))
    back = transform_forward(transform_inverse(SpectralField(grid, 1, c)), grid)
    assert np.max(np.abs(back.coeffs - c)) < 1e-11 * max(1.0, np.max(np.abs(c)))
