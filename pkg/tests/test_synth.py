from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from lsml.evaluation import jaccard
from lsml.features import global_shape
from lsml.grid import connected_components, signed_distance
from lsml.initialization import initialize
from lsml.synth import PhantomParams, generate, generate_dataset

from conftest import ball


def test_unperturbed_noiseless_is_ball():
    p = PhantomParams(radius_range=(9.0, 9.0), amplitude=0.0, noise=0.0, seed=3)
    ph = generate(p)
    assert np.array_equal(ph.gt, ball(p.dims, 9.0))
    assert set(np.unique(ph.image)) == {0.0, 1.0}


def test_same_seed_bitwise():
    p = PhantomParams(seed=17, wall=True)
    a, b = generate(p), generate(p)
    assert a.image.tobytes() == b.image.tobytes() and np.array_equal(a.gt, b.gt)
    c = generate(replace(p, seed=18))
    assert c.image.tobytes() != a.image.tobytes()


def test_noiseless_phantom_initializes():
    ph = generate(PhantomParams(noise=0.0, seed=5))
    assert jaccard(initialize(ph.image), ph.gt) >= 0.6


@pytest.mark.parametrize("seed", range(8))
def test_gt_connected_and_centered(seed):
    p = PhantomParams(seed=seed, amplitude=0.5, n_lobes=5, wall=seed % 2 == 0, vessel=seed % 3 == 0)
    ph = generate(p)
    assert connected_components(ph.gt).count == 1
    assert ph.gt[20, 20, 20]
    lo, hi = p.radius_range
    assert lo <= ph.radius <= hi


def test_wall_and_vessel_touch_object():
    for flag in ("wall", "vessel"):
        p = PhantomParams(seed=2, noise=0.0, **{flag: True})
        ph = generate(p)
        extra = (ph.image > 0.5) & ~ph.gt
        assert extra.any()
        grown = np.zeros_like(ph.gt)
        for ax in range(3):
            for s in (-1, 1):
                grown |= np.roll(ph.gt, s, axis=ax)
        assert (extra & grown).any(), flag


def test_params_validation():
    with pytest.raises(ValueError):
        PhantomParams(radius_range=(6.0, 19.0))
    with pytest.raises(ValueError):
        PhantomParams(noise=-0.1)
    with pytest.raises(ValueError):
        PhantomParams(amplitude=0.6)


def test_dataset_seeds_and_categories():
    tr, va, te = generate_dataset(40, 10, 10, PhantomParams(dims=(21, 21, 21), radius_range=(4, 6)), seed=9)
    seeds = [p.seed for p in tr + va + te]
    assert len(seeds) == 60 == len(set(seeds))
    big, _, _ = generate_dataset(30, 1, 1, PhantomParams(dims=(21, 21, 21), radius_range=(4, 6)), seed=1)
    assert Counter(p.category for p in big) == {"isolated": 10, "wall": 10, "low_contrast": 10}
    again = generate_dataset(40, 10, 10, PhantomParams(dims=(21, 21, 21), radius_range=(4, 6)), seed=9)
    for x, y in zip(tr + va + te, again[0] + again[1] + again[2]):
        assert x.image.tobytes() == y.image.tobytes()


def test_low_contrast_halves_intensity():
    _, _, te = generate_dataset(1, 1, 3, PhantomParams(noise=0.0), seed=4)
    lc = [p for p in te if p.category == "low_contrast"][0]
    assert lc.image.max() == 0.5


def test_dataset_rejects_empty_split():
    with pytest.raises(ValueError):
        generate_dataset(0, 1, 1)


@pytest.mark.parametrize("radius", [8.0, 12.0])
def test_unperturbed_isoperimetric_matches_features(radius):
    ph = generate(PhantomParams(radius_range=(radius, radius), amplitude=0.0, noise=0.0))
    ref = global_shape(signed_distance(ball(ph.gt.shape, radius)))
    assert global_shape(signed_distance(ph.gt)).isoperimetric == ref.isoperimetric


@pytest.mark.xfail(
    strict=True,
    reason="central differences of the binary step overestimate sphere area by about 8%, so Q sits near 0.79",
)
@pytest.mark.parametrize("radius", [8.0, 12.0])
def test_unperturbed_isoperimetric_band(radius):
    ph = generate(PhantomParams(radius_range=(radius, radius), amplitude=0.0, noise=0.0))
    assert 0.85 <= global_shape(signed_distance(ph.gt)).isoperimetric <= 1.10
