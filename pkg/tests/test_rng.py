import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smforge.photophysics import EmitterParams, diffuse_center, diffuse_centers
from smforge.rng import Stream, as_stream


@given(st.integers(0, 2**64 - 1), st.integers(0, 10**6))
def test_same_key_same_draws(seed, k):
    a = Stream(seed).child("emitter", k).generator().random(5)
    b = Stream(seed, ("emitter", k)).generator().random(5)
    np.testing.assert_array_equal(a, b)


def test_distinct_paths_differ():
    s = Stream(1)
    draws = {tuple(s.child("frame", t).generator().random(3)) for t in range(200)}
    assert len(draws) == 200
    assert Stream(1).key() != Stream(2).key()
    # "1" and 1 are different key parts
    assert Stream(0, ("1",)).key() != Stream(0, (1,)).key()


def test_path_encoding_unambiguous():
    assert Stream(0, ("ab", "c")).key() != Stream(0, ("a", "bc")).key()


def test_bad_key_parts():
    with pytest.raises(TypeError):
        Stream(0, (True,)).key()
    with pytest.raises(TypeError):
        Stream(0, (1.5,)).key()
    with pytest.raises(TypeError):
        as_stream("seed")


def test_as_stream():
    s = Stream(3, ("x",))
    assert as_stream(s) is s
    assert as_stream(7, "frame") == Stream(7, ("frame",))


@given(st.integers(1, 40), st.integers(1, 40))
def test_diffusion_prefix_consistency(n, m):
    e = EmitterParams(381.9e6, 40.0, 3.6, 257.0, sigma_f=26.0, jump_rate=0.1, jump_scale=100.0)
    s = Stream(5, ("diffusion", 0))
    a = diffuse_centers(e, n, s)
    b = diffuse_centers(e, m, s)
    k = min(n, m)
    np.testing.assert_array_equal(a[:k], b[:k])
    assert diffuse_center(e, k - 1, s) == a[k - 1]
