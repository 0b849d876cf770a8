import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vpflow.grid import DistanceField, GridGeometry, GridSet, NoBoundaryError, hausdorff, perimeter, signed_distance
from vpflow.oracle import exhaustive_minimize
from vpflow.shapes import ball, ellipse, two_balls
from vpflow.step import (
    BracketError,
    MaxIterationsError,
    RimContactError,
    StepConfig,
    StepWarning,
    find_lambda,
    fixed_ball_threshold,
    linear_energy,
    minimize_linear,
    solve_at_lambda,
    step,
    step_energy,
)


def _interior_free(geom):
    inner = np.zeros(geom.dims, bool)
    inner[tuple(slice(1, -1) for _ in geom.dims)] = True
    return np.flatnonzero(inner)


@st.composite
def tiny_instances(draw):
    a = draw(st.integers(4, 6))
    b = draw(st.integers(4, 6))
    spacing = draw(st.sampled_from([1.0, 0.5]))
    geom = GridGeometry((a, b), spacing)
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    d = DistanceField(geom, rng.normal(size=geom.dims) * draw(st.floats(0.1, 5.0)))
    n_free = (a - 2) * (b - 2)
    m = draw(st.integers(1, n_free))
    h = draw(st.floats(0.2, 5.0))
    return d, m, h


@st.composite
def small_sets(draw):
    geom = GridGeometry((8, 8))
    inner = draw(st.lists(st.booleans(), min_size=16, max_size=16))
    mask = np.zeros((8, 8), bool)
    mask[2:6, 2:6] = np.array(inner).reshape(4, 4)
    if not mask.any():
        mask[3, 3] = True
    h = draw(st.floats(0.3, 20.0))
    return GridSet(geom, mask), h


# -- energies -----------------------------------------------------------------


def test_step_energy_of_e_is_its_perimeter():
    E = ball(GridGeometry((32, 32)), 8.0)
    assert step_energy(E, E, 3.0) == perimeter(E)


def test_step_energy_ring_matches_direct_sum():
    g = GridGeometry((40, 40))
    E = ball(g, 8.0)
    F = ball(g, 9.0)
    d = signed_distance(E).values
    ring = F.mask & ~E.mask
    direct = sum(abs(d[i]) for i in zip(*np.nonzero(ring)))
    assert step_energy(F, E, 1.0) == pytest.approx(perimeter(F) + direct, rel=1e-12)


def test_step_energy_is_linear_in_inverse_h():
    g = GridGeometry((32, 32))
    E, F = ball(g, 6.0), ball(g, 7.5)
    a = step_energy(F, E, 2.0) - perimeter(F)
    b = step_energy(F, E, 1.0) - perimeter(F)
    assert a == pytest.approx(0.5 * b, rel=1e-12)


def test_step_energy_rejects_bad_h():
    E = ball(GridGeometry((16, 16)), 4.0)
    for h in (0.0, -1.0):
        with pytest.raises(ValueError):
            step_energy(E, E, h)


# -- unconstrained cut ----------------------------------------------------------


def test_solve_at_lambda_extremes():
    g = GridGeometry((12, 12))
    rng = np.random.default_rng(3)
    d = DistanceField(g, rng.normal(size=(12, 12)))
    h = 0.7
    empty = solve_at_lambda(d, h, d.values.min() / h - 1.0)
    assert empty.is_empty()
    full = solve_at_lambda(d, h, d.values.max() / h + 100.0)
    assert np.array_equal(full.mask[1:-1, 1:-1], np.ones((10, 10), bool))
    assert not full.mask[0].any() and not full.mask[-1].any()


def test_solve_at_lambda_matches_enumeration():
    g = GridGeometry((5, 5))
    rng = np.random.default_rng(11)
    d = DistanceField(g, rng.normal(size=(5, 5)))
    h, lam = 1.0, 0.3
    free = _interior_free(g)
    results = []
    for bits in range(1 << free.size):
        mask = np.zeros(25, bool)
        mask[free[[i for i in range(free.size) if bits >> i & 1]]] = True
        F = GridSet(g, mask.reshape(5, 5))
        results.append((perimeter(F) + ((d.values - lam * h) * F.mask).sum() / h, F))
    best = min(e for e, _ in results)
    minimisers = [F.mask for e, F in results if e <= best + 1e-9]
    got = solve_at_lambda(d, h, lam)
    value = perimeter(got) + ((d.values - lam * h) * got.mask).sum() / h
    assert value == pytest.approx(best, abs=1e-9)
    # minimal minimiser: contained in every optimal set
    assert np.array_equal(got.mask, np.logical_and.reduce(minimisers))


def test_solve_at_lambda_rejects_bad_input():
    g = GridGeometry((6, 6))
    vals = np.zeros((6, 6))
    vals[2, 2] = np.nan
    with pytest.raises(ValueError):
        solve_at_lambda(DistanceField(g, vals), 1.0, 0.0)
    with pytest.raises(ValueError):
        solve_at_lambda(DistanceField(g, np.zeros((6, 6))), 1.0, math.inf)


def test_lambda_monotonicity_probe():
    g = GridGeometry((48, 48))
    E = ellipse(g, (14.0, 8.0))
    d = signed_distance(E)
    vols = [solve_at_lambda(d, 20.0, lam).n_cells for lam in np.linspace(-0.5, 0.8, 40)]
    assert all(a <= b for a, b in zip(vols, vols[1:]))


# -- constrained step -----------------------------------------------------------


def test_fixed_disk_multiplier_near_curvature():
    g = GridGeometry((128, 128))
    R = 24.0
    E = ball(g, R)
    res = find_lambda(E, StepConfig(0.1 * R * R, E.volume))
    assert abs(res.lam - 1.0 / R) <= 0.2 / R


def test_six_by_six_matches_exhaustive_search():
    g = GridGeometry((6, 6))
    rng = np.random.default_rng(2)
    d = DistanceField(g, rng.normal(size=(6, 6)))
    sol = minimize_linear(d, StepConfig(1.0, 4.0))
    ref = exhaustive_minimize(d, 1.0, 4)
    assert ref.n_candidates == math.comb(16, 4) == 1820
    assert sol.set == ref.set
    assert sol.linear_energy == ref.energy


@given(tiny_instances())
def test_oracle_equivalence(inst):
    d, m, h = inst
    sol = minimize_linear(d, StepConfig(h, m * d.geometry.cell_volume))
    ref = exhaustive_minimize(d, h, m)
    assert sol.set.n_cells == m
    assert sol.linear_energy == ref.energy
    assert sol.set == ref.set


def test_single_disk_is_kept():
    g = GridGeometry((96, 96))
    R = 20.0
    E = ball(g, R)
    res = step(E, StepConfig(0.2 * R * R, E.volume))
    assert hausdorff(res.next, E) <= 2.0
    assert res.volume == E.volume


def test_far_apart_disks_are_kept():
    g = GridGeometry((160, 64))
    E = two_balls(g, 10.0, 60.0)
    res = step(E, StepConfig(10.0, E.volume))
    assert hausdorff(res.next, E) <= 2.0


def test_ellipse_step_decreases_perimeter():
    g = GridGeometry((72, 72))
    E = ellipse(g, (20.0, 10.0))
    res = step(E, StepConfig(40.0, E.volume))
    assert res.dissipation > 0
    assert res.perimeter < perimeter(E)
    assert res.volume == E.volume


def test_coarse_ellipse_step_matches_exhaustive_search():
    g = GridGeometry((6, 6))
    m = np.zeros((6, 6), bool)
    m[1:5, 2:4] = True  # 4 x 2 cells: a coarse 2:1 ellipse
    E = GridSet(g, m)
    d = signed_distance(E)
    for h in (0.5, 2.0, 8.0):
        res = find_lambda(E, StepConfig(h, E.volume))
        ref = exhaustive_minimize(d, h, E.n_cells)
        assert res.next == ref.set
        assert linear_energy(res.next, d, h) == ref.energy


@given(small_sets())
def test_step_inequality(inst):
    E, h = inst
    res = find_lambda(E, StepConfig(h, E.volume))
    assert res.perimeter + res.dissipation / h <= perimeter(E) + res.epsilon_adj + 1e-9
    assert res.volume == E.volume
    assert res.energy == res.perimeter + res.dissipation / res.h


def test_step_is_deterministic():
    g = GridGeometry((64, 64))
    E = ellipse(g, (18.0, 9.0))
    cfg = StepConfig(30.0, E.volume)
    a, b = step(E, cfg), step(E, cfg)
    assert a.next == b.next
    assert a.to_json() == b.to_json()


@pytest.mark.parametrize("shift", [(3, 0), (0, -4), (2, 5)])
def test_step_translation_equivariance(shift):
    g = GridGeometry((72, 72))
    E = ellipse(g, (16.0, 8.0))
    cfg = StepConfig(25.0, E.volume)
    moved = step(E.shifted(shift), cfg).next
    assert moved == step(E, cfg).next.shifted(shift)


def test_result_json_fields():
    E = ball(GridGeometry((32, 32)), 6.0)
    res = step(E, StepConfig(5.0, E.volume))
    data = json.loads(res.to_json())
    for key in ("lambda", "perimeter", "dissipation", "energy", "volume", "bisection_iters", "adjustment_cells", "epsilon_adj"):
        assert key in data
    assert data["energy"] == res.perimeter + res.dissipation / res.h


# -- errors -----------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        StepConfig(0.0, 10.0)
    with pytest.raises(ValueError):
        StepConfig(1.0, -1.0)
    with pytest.raises(ValueError):
        StepConfig(1.0, 10.0, lambda_bracket=(1.0, 1.0))
    with pytest.raises(ValueError):
        StepConfig(1.0, 10.0, volume_tolerance=-1)
    with pytest.raises(ValueError):
        StepConfig(1.0, 10.0, tie_break="random")


def test_bracket_failure():
    E = ball(GridGeometry((32, 32)), 5.0)
    cfg = StepConfig(4.0, E.volume, lambda_bracket=(1e6, 1e6 + 1.0))
    with pytest.raises(BracketError):
        find_lambda(E, cfg)


def test_user_bracket_that_straddles_works():
    E = ball(GridGeometry((32, 32)), 5.0)
    a = find_lambda(E, StepConfig(4.0, E.volume, lambda_bracket=(-50.0, 50.0)))
    b = find_lambda(E, StepConfig(4.0, E.volume))
    assert a.next == b.next


def test_max_iterations_error_carries_best():
    E = ellipse(GridGeometry((64, 64)), (18.0, 9.0))
    with pytest.raises(MaxIterationsError) as info:
        find_lambda(E, StepConfig(30.0, E.volume, max_bisection_iters=1))
    assert info.value.best is not None


def test_rim_contact_and_missing_boundary():
    g = GridGeometry((16, 16))
    m = np.zeros((16, 16), bool)
    m[1:6, 1:6] = True
    with pytest.raises(RimContactError):
        step(GridSet(g, m), StepConfig(1.0, 25.0))
    with pytest.raises(NoBoundaryError):
        find_lambda(GridSet(g, np.zeros((16, 16), bool)), StepConfig(1.0, 1.0))


def test_volume_mismatch_rejected():
    E = ball(GridGeometry((32, 32)), 5.0)
    with pytest.raises(ValueError):
        find_lambda(E, StepConfig(1.0, E.volume + 3.0))


def test_large_h_warns():
    E = ball(GridGeometry((48, 48)), 6.0)
    r = math.sqrt(E.volume / math.pi)
    with pytest.warns(StepWarning):
        step(E, StepConfig(fixed_ball_threshold(r, 2) * 1.01, E.volume))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        step(E, StepConfig(0.5 * fixed_ball_threshold(r, 2), E.volume))


def test_whole_cell_target_required():
    g = GridGeometry((6, 6))
    d = DistanceField(g, np.zeros((6, 6)))
    with pytest.raises(ValueError):
        minimize_linear(d, StepConfig(1.0, 2.5))
    with pytest.raises(ValueError):
        minimize_linear(d, StepConfig(1.0, 17.0))
