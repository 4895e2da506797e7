import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smforge.analysis.catalog import CatalogOptions, build_catalog, detect_peaks, flag_ambiguous
from smforge.analysis.records import (
    MoleculeRecord,
    catalog_from_json,
    catalog_from_truth,
    catalog_to_json,
    match_to_truth,
    read_catalog_csv,
    site_label,
    write_catalog_csv,
)
from smforge.instrument import CameraConfig, ScanConfig, ScanTrace, simulate_widefield_scan
from smforge.photophysics import EmitterParams
from smforge.rng import Stream
from smforge.sample import sample_from_emitters
from smforge.units import FormatError

F0 = 381.9e6


@given(k=st.integers(1, 6), seed=st.integers(0, 2**32))
@settings(max_examples=200)
def test_k_lines_k_peaks(k, seed):
    gen = Stream(seed, ("peaks",)).generator()
    f = F0 + np.arange(0, 200 * k + 200, 5.0)
    centers = F0 + 100 + 200 * np.arange(k) + gen.uniform(-20, 20, k)
    mu = 2.0 + sum(80.0 / (1 + ((f - c) / 20.0) ** 2) for c in centers)
    # 10 ms points, so 10 counts per kcps
    trace = ScanTrace(f, gen.poisson(mu) / 10.0, exposure_s=0.01)
    peaks = detect_peaks(trace, counts_per_unit=10.0)
    assert len(peaks) == k
    got = np.sort([p.freq for p in peaks])
    # the raw maximum lands within half a linewidth of the center
    assert np.all(np.abs(got - np.sort(centers)) < 20.0)


def _scene(noise=True):
    params = [
        EmitterParams(F0 + 0.0, 40.0, 3.6, 257.0),
        EmitterParams(F0 + 300.0, 45.0, 3.6, 257.0),
        EmitterParams(F0 + 600.0, 50.0, 3.6, 257.0),
    ]
    sample = sample_from_emitters(params, [(0, 0), (900, 300), (-700, 600)], seed=3)
    cam = CameraConfig(width=32, height=32, origin=(-1600.0, -1600.0), background=2.0, noise=noise,
                       drift_velocity=(0.0, 0.0), drift_rw_sigma=0.0)
    scan = ScanConfig(F0 - 200, F0 + 800, 700.0, 0.01, repetitions=3, power=2.0)
    return sample, simulate_widefield_scan(sample, scan, cam, rng=Stream(8))


def test_small_scene_catalog():
    sample, stack = _scene()
    recs = build_catalog(stack)
    assert len(recs) == 3
    m = match_to_truth(recs, sample, position_nm=30.0)
    assert m.recall == 1.0 and not m.spurious
    for i, tid in m.pairs:
        e = sample.emitter(tid)
        assert math.hypot(recs[i].x - e.x, recs[i].y - e.y) < 15.0
        assert abs(recs[i].f0 - e.params.f0) < 10.0
        assert recs[i].n_loc == 3
    assert all(not r.ambiguous for r in recs)


def test_catalog_deterministic():
    _, stack = _scene()
    a = build_catalog(stack)
    b = build_catalog(stack)
    assert catalog_to_json(a) == catalog_to_json(b)


def test_empty_stack_empty_catalog():
    _, stack = _scene()
    stack.frames[:] = 2
    assert build_catalog(stack, CatalogOptions(psf_sigma=130.0)) == []


def _rec(i, x, y, f0, gamma=50.0, **kw):
    return MoleculeRecord(i, x, y, 10.0, f0, gamma, **kw)


def test_flag_ambiguous():
    recs = [_rec(0, 0, 0, F0), _rec(1, 100, 0, F0 + 30), _rec(2, 100, 0, F0 + 1000), _rec(3, 5000, 0, F0)]
    out = flag_ambiguous(recs, 130.0)
    assert [r.ambiguous for r in out] == [True, True, False, False]
    assert flag_ambiguous([_rec(0, 0, 0, F0, flags=("blended",))], 130.0)[0].ambiguous


def test_site_labels():
    assert site_label(382.5e6) == "blue"
    assert site_label(377.4e6) == "red"
    assert _rec(0, 0, 0, 382.1e6).site == "blue"


records = st.lists(
    st.builds(
        MoleculeRecord,
        id=st.integers(0, 10**6),
        x=st.floats(-1e5, 1e5),
        y=st.floats(-1e5, 1e5),
        position_sigma=st.floats(0.1, 100),
        f0=st.floats(370e6, 390e6),
        gamma=st.floats(1, 500),
        phi=st.one_of(st.just(math.nan), st.floats(-89.99, 90)),
        nc_id=st.integers(-1, 100),
        flags=st.lists(st.sampled_from(["ambiguous", "blended", "multi_line"]), unique=True).map(tuple),
    ),
    max_size=20,
)


def _same(a, b):
    assert len(a) == len(b)
    for r, s in zip(a, b):
        for k in ("id", "x", "y", "position_sigma", "f0", "gamma", "nc_id", "site", "flags"):
            assert getattr(r, k) == getattr(s, k), k
        assert (math.isnan(r.phi) and math.isnan(s.phi)) or r.phi == s.phi


@given(records)
def test_catalog_csv_json_lossless(tmp_path_factory, recs):
    p = tmp_path_factory.mktemp("cat") / "c.csv"
    write_catalog_csv(recs, p)
    _same(recs, read_catalog_csv(p))
    _same(recs, catalog_from_json(catalog_to_json(recs)))


def test_catalog_csv_errors(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("id,x\n")
    with pytest.raises(FormatError, match="line 1"):
        read_catalog_csv(p)
    write_catalog_csv([_rec(0, 0, 0, F0)], p)
    p.write_text(p.read_text().replace("10.0", "-1.0", 1))
    with pytest.raises(FormatError, match="line 2"):
        read_catalog_csv(p)


def test_catalog_from_truth():
    params = [EmitterParams(F0, 40.0, 3.6, 257.0, phi=20.0)] * 4
    s = sample_from_emitters(params, [(0, 0), (100, 0), (0, 100), (100, 100)])
    a = catalog_from_truth(s, 5.0, rng=1)
    assert catalog_to_json(a) == catalog_to_json(catalog_from_truth(s, 5.0, rng=1))
    assert all(r.phi == 20.0 and r.nc_id == 0 for r in a)
