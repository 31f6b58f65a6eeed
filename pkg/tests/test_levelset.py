import numpy as np
import pytest
from conftest import ball
from hypothesis import given
from hypothesis import strategies as st

from lsml.grid import DimensionError, interface_mask, signed_distance
from lsml.levelset import (
    COLLAPSED,
    EXPLODED,
    LevelSetState,
    band_mask,
    cfl_dt,
    narrow_band,
    redistance,
    step,
    upwind_grad_norm,
)


def _loop_upwind(u, v):
    """Per-voxel Godunov norm with edge padding, written out longhand."""
    out = np.zeros_like(u)
    n = u.shape
    for idx in np.ndindex(n):
        total = 0.0
        for ax in range(3):
            lo = list(idx)
            hi = list(idx)
            lo[ax] = max(idx[ax] - 1, 0)
            hi[ax] = min(idx[ax] + 1, n[ax] - 1)
            dm = u[idx] - u[tuple(lo)]
            dp = u[tuple(hi)] - u[idx]
            if v[idx] >= 0:
                total += min(dm, 0.0) ** 2 + max(dp, 0.0) ** 2
            else:
                total += max(dm, 0.0) ** 2 + min(dp, 0.0) ** 2
        out[idx] = np.sqrt(total)
    return out


@given(st.integers(0, 2**31))
def test_upwind_matches_longhand(seed):
    r = np.random.default_rng(seed)
    u = r.normal(size=(4, 5, 3))
    v = r.normal(size=u.shape)
    np.testing.assert_allclose(upwind_grad_norm(u, v), _loop_upwind(u, v), atol=1e-12)


def test_upwind_ramp_and_zero():
    u = np.indices((6, 5, 5))[0].astype(float)
    g = upwind_grad_norm(u, np.ones_like(u))
    assert np.all(g[1:-1, 1:-1, 1:-1] == 1.0)
    z = upwind_grad_norm(np.zeros((4, 4, 4)), np.random.default_rng(0).normal(size=(4, 4, 4)))
    assert np.all(z == 0)


def test_upwind_distance_function_near_unit():
    d = np.sqrt(((np.indices((31, 31, 31)) - 15.0) ** 2).sum(axis=0))
    u = 9.0 - d  # exact distance to the sphere, positive inside
    g = upwind_grad_norm(u, np.ones_like(u))
    band = np.abs(u) <= 3
    assert g[band].min() >= 0.9 and g[band].max() <= 1.1


def test_upwind_shape_mismatch():
    with pytest.raises(DimensionError):
        upwind_grad_norm(np.zeros((3, 3, 3)), np.zeros((3, 3, 4)))


@pytest.mark.parametrize("vmax,expect", [(3.0, 0.3), (0.0, 0.9), (0.5, 1.8)])
def test_cfl_dt(vmax, expect):
    v = np.zeros((4, 4, 4))
    v[1, 1, 1] = -vmax
    assert cfl_dt(v, 0.9) == pytest.approx(expect)


def test_cfl_dt_with_gradient_and_bad_safety():
    assert cfl_dt(np.array([1.0, -2.0]), 0.9, np.array([1.0, 2.0])) == pytest.approx(0.9 / 4)
    with pytest.raises(ValueError):
        cfl_dt(np.ones(3), 1.5)


def test_narrow_band_examples():
    m = np.array([1, 1, 1, 0, 0, 0, 0, 0], bool).reshape(8, 1, 1)
    u = signed_distance(m)
    np.testing.assert_array_equal(narrow_band(u, 1)[:, 0], [2, 3])
    assert len(narrow_band(u, 100)) == 8
    with pytest.raises(ValueError):
        narrow_band(u, 0.5)


@given(st.integers(0, 2**31))
def test_narrow_band_sorted_unique(seed):
    u = np.random.default_rng(seed).normal(scale=3, size=(5, 6, 4))
    b = narrow_band(u, 2.0)
    keys = [tuple(x) for x in b]
    assert keys == sorted(set(keys))
    assert np.array_equal(band_mask(u.shape, b), np.abs(u) <= 2.0)


@given(st.integers(0, 2**31))
def test_redistance_keeps_positive_region(seed):
    r = np.random.default_rng(seed)
    u = r.normal(size=(6, 5, 7))
    u.flat[0], u.flat[1] = 1.0, -1.0
    assert np.array_equal(redistance(u) > 0, u > 0)


def test_redistance_is_distance_off_interface(rng):
    m = ball((15, 15, 15), 4)
    u = redistance(np.where(m, 0.3, -0.7))
    far = ~interface_mask(m)
    np.testing.assert_array_equal(u[far], signed_distance(m)[far])
    assert np.all(np.abs(u[~far]) <= 1.0) and np.all(np.abs(u[~far]) >= 0.05)


def test_step_zero_velocity():
    s = LevelSetState.from_mask(ball((15, 15, 15), 4))
    t = step(s, np.zeros(s.u.shape))
    assert np.array_equal(t.mask, s.mask) and t.iteration == 1


def test_step_unit_speed_grows_ball():
    s = LevelSetState.from_mask(ball((31, 31, 31), 8))
    t = step(s, np.ones(s.u.shape))
    r0 = (3 * s.mask.sum() / (4 * np.pi)) ** (1 / 3)
    r1 = (3 * t.mask.sum() / (4 * np.pi)) ** (1 / 3)
    assert t.mask.sum() > s.mask.sum()
    assert 0.6 <= r1 - r0 <= 1.0


@pytest.mark.parametrize("axes", [(10, 6, 5), (8, 8, 4.5), (12, 7, 4)])
def test_step_oracle_velocity_approaches_target(axes):
    g = np.indices((31, 31, 31)) - 15.0
    target = sum((g[a] / axes[a]) ** 2 for a in range(3)) <= 1
    nu = signed_distance(target)
    s = LevelSetState.from_mask(ball((31, 31, 31), 4))
    mismatch = [(s.mask ^ target).sum()]
    for _ in range(25):
        s = step(s, nu)
        mismatch.append((s.mask ^ target).sum())
    assert all(b <= a for a, b in zip(mismatch, mismatch[1:]))
    assert mismatch[-1] == 0


def test_step_flags_collapse_and_explosion():
    m = np.zeros((7, 7, 7), bool)
    m[3, 3, 3] = True
    s = LevelSetState.from_mask(m)
    t = step(s, -np.ones(m.shape))
    assert t.status == COLLAPSED and not t.active
    assert np.array_equal(t.mask, m)
    assert t.u.max() <= 0  # left un-redistanced
    frozen = step(t, np.ones(m.shape))
    assert frozen.iteration == 2 and np.array_equal(frozen.u, t.u)

    big = np.ones((5, 5, 5), bool)
    big[0, 0, 0] = False
    e = step(LevelSetState.from_mask(big), np.ones(big.shape))
    assert e.status == EXPLODED and np.array_equal(e.mask, big)


def _adversarial(seed, shape=(17, 17, 17)):
    r = np.random.default_rng(seed)
    m = ball(shape, r.uniform(3, 6), center=r.uniform(6, 10, size=3))
    v = r.normal(scale=r.uniform(0.1, 5), size=shape) + r.uniform(-1, 1)
    return m, v


@given(st.integers(0, 2**31))
def test_step_only_flips_interface_voxels(seed):
    m, v = _adversarial(seed)
    s = LevelSetState.from_mask(m)
    for _ in range(3):
        t = step(s, v)
        if not t.active:
            break
        changed = t.mask != s.mask
        assert not np.any(changed & ~interface_mask(s.mask))
        s = t


@given(st.integers(0, 2**31))
def test_band_and_full_domain_agree(seed):
    m, v = _adversarial(seed)
    a = b = LevelSetState.from_mask(m)
    for _ in range(5):
        a = step(a, v)
        b = step(b, v, full_domain=True)
        assert np.array_equal(a.mask, b.mask)
        if not a.active:
            break
