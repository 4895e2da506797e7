import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smforge.analysis.dipoles import dipole_map, fit_dipoles, modal_orientation, permutation_test, register_ncs
from smforge.analysis.records import MoleculeRecord
from smforge.instrument import CameraConfig, ScanConfig, simulate_polarization_series
from smforge.photophysics import EmitterParams
from smforge.sample import sample_from_emitters
from smforge.units import DomainError, axial_difference, wrap_axial

F0 = 381.9e6


def _nc(seed, n=8, nc_id=0, base=None):
    gen = np.random.default_rng(seed)
    xy = gen.uniform(-400, 400, (n, 2))
    mode = gen.uniform(-90, 90) if base is None else base
    phi = wrap_axial(mode + np.concatenate([[0, 1, -1, 2], gen.normal(0, 30, n - 4)]))
    return [MoleculeRecord(nc_id * 100 + i, xy[i, 0], xy[i, 1], 10.0, F0, 40.0, phi=phi[i], nc_id=nc_id)
            for i in range(n)]


def _transform(recs, dx, dy, alpha):
    c, s = math.cos(math.radians(alpha)), math.sin(math.radians(alpha))
    return [r.with_(x=c * r.x - s * r.y + dx, y=s * r.x + c * r.y + dy, phi=r.phi + alpha) for r in recs]


@given(st.integers(0, 10**6), st.floats(-1e5, 1e5), st.floats(-1e5, 1e5), st.floats(-180, 180))
@settings(max_examples=40)
def test_registration_equivariant(seed, dx, dy, alpha):
    recs = _nc(seed)
    a = register_ncs(recs)
    b = register_ncs(_transform(recs, dx, dy, alpha))
    np.testing.assert_allclose(b.points, a.points, atol=1e-6)
    np.testing.assert_allclose(axial_difference(b.phi, a.phi), 0, atol=1e-9)
    assert axial_difference(b.orientation[0], a.orientation[0] + alpha) < 1e-9


def test_collinear_centroid_at_origin():
    recs = [MoleculeRecord(i, 100.0 * i + 50, 20.0 * i - 7, 10.0, F0, 40.0, phi=12.0, nc_id=3) for i in range(3)]
    reg = register_ncs(recs)
    np.testing.assert_allclose(reg.points.mean(axis=0), [0, 0], atol=1e-9)
    # all dipoles equal the mode, so they register to zero
    np.testing.assert_allclose(reg.phi, 0, atol=1e-12)


def test_small_ncs_excluded():
    recs = _nc(1, n=8) + [MoleculeRecord(900, 0, 0, 10, F0, 40, phi=1, nc_id=5)]
    reg = register_ncs(recs)
    assert reg.excluded == [{"nc_id": 5, "count": 1, "reason": "fewer than 3 molecules"}]
    assert set(reg.nc_id.tolist()) == {0}


def test_modal_orientation_ignores_sidebands():
    phi = np.array([40, 41, 39, 42, 38, 40, 75, 5, -50])
    assert axial_difference(modal_orientation(phi), 40.0) <= 1.0
    # wraps through +-90
    assert axial_difference(modal_orientation([88, 89, -89, -88, 10]), 89.0) <= 1.5


def test_permutation_test():
    recs = [r for k in range(20) for r in _nc(k, nc_id=k)]
    reg = register_ncs(recs)
    null = permutation_test(reg, 500, rng=1)
    assert null["p_value"] > 0.01
    assert null == permutation_test(reg, 500, rng=1)
    # make the angle follow x
    rigged = reg.__class__(reg.points, reg.points[:, 0] / 20.0, reg.sigma, reg.nc_id, reg.record_id)
    assert permutation_test(rigged, 500, rng=1)["p_value"] < 0.01


def test_fit_dipoles_shape_check():
    th = np.arange(0, 180, 30.0)
    rows = np.array([np.cos(np.radians(th - p)) ** 2 for p in (10.0, -60.0)])
    fits = fit_dipoles(th, rows)
    assert [round(f["phi"], 6) for f in fits] == [10.0, -60.0]
    with pytest.raises(DomainError):
        fit_dipoles(th[:3], rows)


def test_dipole_map_recovers_angles():
    params = [EmitterParams(F0, 40.0, 3.6, 257.0, phi=25.0), EmitterParams(F0 + 300, 40.0, 3.6, 257.0, phi=-50.0)]
    sample = sample_from_emitters(params, [(0, 0), (800, 0)])
    cam = CameraConfig(width=24, height=16, origin=(-800.0, -800.0), background=1.0,
                       drift_velocity=(0.0, 0.0), drift_rw_sigma=0.0)
    scan = ScanConfig(F0 - 200, F0 + 500, 700.0, 0.01, repetitions=2, power=3.0)
    stacks = simulate_polarization_series(sample, np.arange(0, 180, 18.0), scan, cam, rng=2)
    recs = [MoleculeRecord(i, e.x, e.y, 10.0, e.params.f0, 45.0) for i, e in enumerate(sample.emitters)]
    out = dipole_map(stacks, recs)
    assert axial_difference(out[0].phi, 25.0) < 3.0
    assert axial_difference(out[1].phi, -50.0) < 3.0
    assert not any("dipole_fit_failed" in r.flags for r in out)
