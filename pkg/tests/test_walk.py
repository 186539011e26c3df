"""Walk statistics against their exact structural identities and the
classical limits (frequency balance, Poisson clock, isotropic CLT)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homog.environment import DistributionSpec, sample_environment
from homog.lattice import build_ball, build_torus
from homog.solver import invariant_density
from homog.walk import (
    WindowExitError,
    chain_average_a,
    occupation_density,
    qclt_estimate,
    simulate,
)

UNIF = DistributionSpec("uniform-diagonal")
CONST = DistributionSpec("constant")

ORIGIN2 = np.zeros(2, dtype=np.int64)
ORIGIN3 = np.zeros(3, dtype=np.int64)


def test_endpoint_and_occupation_identities():
    env = sample_environment(UNIF, 2, 3, geometry=4)
    s = simulate(env, ORIGIN3, 500, seed=7)
    assert s.steps == 500
    assert s.occupation.sum() == 500
    # endpoint = start + signed jump totals, exactly
    signed = s.jump_counts[0::2] - s.jump_counts[1::2]
    np.testing.assert_array_equal(s.endpoint - s.start, signed)
    assert s.jump_counts.sum() == s.steps
    disp = (s.endpoint - s.start).astype(float)
    np.testing.assert_allclose(s.displacement_moments, np.outer(disp, disp))


def test_paths_are_deterministic():
    env = sample_environment(UNIF, 5, 2, geometry=5)
    a = simulate(env, ORIGIN2, 300, seed=13, walk_index=4)
    b = simulate(env, ORIGIN2, 300, seed=13, walk_index=4)
    np.testing.assert_array_equal(a.endpoint, b.endpoint)
    np.testing.assert_array_equal(a.occupation, b.occupation)
    np.testing.assert_array_equal(a.jump_counts, b.jump_counts)
    c = simulate(env, ORIGIN2, 300, seed=13, walk_index=5)
    assert not np.array_equal(a.endpoint, c.endpoint) or not np.array_equal(
        a.jump_counts, c.jump_counts)


def test_single_walks_reproduce_ensemble_paths():
    # counter-keyed draws make the ensemble a pure partition of walks
    env = sample_environment(UNIF, 9, 3, geometry=4)
    q = qclt_estimate(env, 5, 200, seed=3)
    for w in range(5):
        s = simulate(env, ORIGIN3, 200, seed=3, walk_index=w)
        np.testing.assert_array_equal(s.endpoint.astype(float), q.endpoints[w])


def test_jump_frequencies_balance():
    # constant sample: all 2d directions equally likely (p = 1/(2d))
    env = sample_environment(CONST, 0, 2, geometry=4)
    counts = np.zeros(4)
    n_walks, steps = 25, 2000
    for w in range(n_walks):
        counts += simulate(env, ORIGIN2, steps, seed=1, walk_index=w).jump_counts
    n = n_walks * steps
    p = 1.0 / 4.0
    z = (counts - n * p) / np.sqrt(n * p * (1 - p))
    assert np.max(np.abs(z)) < 4.0


def test_zero_drift():
    env = sample_environment(CONST, 0, 3, geometry=4)
    q = qclt_estimate(env, 3000, 100, seed=17)
    mean = q.endpoints.mean(axis=0)
    se = q.endpoints.std(axis=0, ddof=1) / np.sqrt(q.n_walks)
    assert np.all(np.abs(mean) < 4.0 * se + 1e-12)


def test_continuous_clock_is_poisson():
    env = sample_environment(CONST, 0, 2, geometry=4)
    t = 1000.0
    s = simulate(env, ORIGIN2, t, mode="continuous", seed=23)
    z = (s.steps - t) / np.sqrt(t)
    assert abs(z) < 4.0
    assert s.time == t
    assert s.mode == "continuous"


def test_continuous_embeds_the_discrete_chain():
    env = sample_environment(UNIF, 4, 2, geometry=5)
    sc = simulate(env, ORIGIN2, 200.0, mode="continuous", seed=31, walk_index=2)
    sd = simulate(env, ORIGIN2, sc.steps, mode="discrete", seed=31, walk_index=2)
    np.testing.assert_array_equal(sc.endpoint, sd.endpoint)
    np.testing.assert_array_equal(sc.jump_counts, sd.jump_counts)


def test_qclt_isotropic_for_constant_sample():
    env = sample_environment(CONST, 0, 3, geometry=4)
    q = qclt_estimate(env, 4000, 150, seed=29)
    # simple random walk: covariance = I/d
    for i in range(3):
        err = abs(q.covariance[i, i] - 1.0 / 3.0)
        assert err < 3.0 * q.standard_errors[i, i]
    off = ~np.eye(3, dtype=bool)
    assert np.all(np.abs(q.covariance[off]) < 3.0 * q.standard_errors[off])
    # symmetric psd by construction
    np.testing.assert_allclose(q.covariance, q.covariance.T)
    assert np.min(np.linalg.eigvalsh(q.covariance)) > -1e-12


def test_qclt_agrees_with_weighted_average():
    env = sample_environment(UNIF, 7, 3, geometry=8)
    torus = build_torus(8, 3)
    m = invariant_density(env, torus)
    a = env.a_axis_grids(torus.shape)
    truth = np.array([(m.grid_view() * a[k]).sum() for k in range(3)])
    q = qclt_estimate(env, 1500, 1200, seed=3)
    diag = np.diag(q.covariance)
    se = np.diag(q.standard_errors)
    assert np.all(np.abs(diag - truth) < 4.0 * se)


def test_chain_average_tracks_weighted_average():
    env = sample_environment(UNIF, 3, 3, geometry=8)
    torus = build_torus(8, 3)
    m = invariant_density(env, torus)
    a = env.a_axis_grids(torus.shape)
    truth = np.array([(m.grid_view() * a[k]).sum() for k in range(3)])
    mean, se = chain_average_a(env, 300, 3000, seed=11, burn_in=300)
    assert np.all(np.abs(mean - truth) < 5.0 * se + 1e-4)
    assert np.max(np.abs(mean - truth) / truth) < 0.01


def test_occupation_density_tracks_invariant_density():
    torus = build_torus(4, 3)
    env = sample_environment(UNIF, 0, 3, geometry=4)
    m = invariant_density(env, torus)
    s = simulate(env, ORIGIN3, 60000, seed=100)
    od = occupation_density(s, torus)
    assert np.all(od.values >= 0.0)
    assert od.values.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(od.values - m.values)) < 3.5e-3  # ~15% of max(m)


def test_window_exit_raises_off_torus():
    env = sample_environment(UNIF, 3, 2)
    with pytest.raises(WindowExitError):
        simulate(env, ORIGIN2, 10000, seed=1, window=4)


def test_window_ignored_on_torus():
    env = sample_environment(UNIF, 3, 2, geometry=4)
    s = simulate(env, ORIGIN2, 2000, seed=1, window=1)
    assert s.steps == 2000  # wrapped lookups never leave the sample


def test_validation_errors():
    env = sample_environment(UNIF, 1, 2, geometry=4)
    envinf = sample_environment(UNIF, 1, 2)
    with pytest.raises(ValueError):
        simulate(env, ORIGIN2, 10, mode="quantum")
    with pytest.raises(ValueError):
        simulate(env, ORIGIN3, 10)  # wrong start dimension
    with pytest.raises(ValueError):
        simulate(env, ORIGIN2, -1)
    with pytest.raises(ValueError):
        simulate(env, ORIGIN2, -1.0, mode="continuous")
    with pytest.raises(ValueError):
        qclt_estimate(envinf, 10, 100)
    with pytest.raises(ValueError):
        qclt_estimate(env, 1, 100)
    with pytest.raises(ValueError):
        qclt_estimate(env, 10, 0)
    with pytest.raises(ValueError):
        chain_average_a(env, 10, 100, burn_in=100)
    # infinite sample: no occupation is recorded
    s = simulate(envinf, ORIGIN2, 10)
    assert s.occupation is None
    torus = build_torus(4, 2)
    with pytest.raises(ValueError):
        occupation_density(s, torus)
    s2 = simulate(env, ORIGIN2, 10)
    with pytest.raises(ValueError):
        occupation_density(s2, build_torus(5, 2))
    with pytest.raises(ValueError):
        occupation_density(s2, build_ball(3.0, 2))
    z = simulate(env, ORIGIN2, 0)
    with pytest.raises(ValueError):
        occupation_density(z, torus)


def test_horizon_warning_flag():
    env = sample_environment(UNIF, 1, 2, geometry=6)
    assert qclt_estimate(env, 4, 30, seed=0).horizon_warning
    assert not qclt_estimate(env, 4, 40, seed=0).horizon_warning


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**63 - 1),
       widx=st.integers(min_value=0, max_value=1000))
def test_walk_identities_hold_for_any_stream(seed, widx):
    env = sample_environment(UNIF, 1, 2, geometry=4)
    s = simulate(env, ORIGIN2, 60, seed=seed, walk_index=widx)
    assert s.jump_counts.sum() == 60
    assert s.occupation.sum() == 60
    signed = s.jump_counts[0::2] - s.jump_counts[1::2]
    np.testing.assert_array_equal(s.endpoint - s.start, signed)
