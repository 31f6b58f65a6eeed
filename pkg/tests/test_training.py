import warnings

import numpy as np
import pytest

from lsml.evaluation import jaccard
from lsml.features import FM1
from lsml.forest import RandomForestRegressor
from lsml.grid import DegenerateMaskError, signed_distance
from lsml.levelset import COLLAPSED, LevelSetState
from lsml.training import (
    Example,
    ModelSequence,
    TrainConfig,
    TrainingError,
    decode_model,
    default_featurizer,
    encode_model,
    evolve_all,
    fit_iteration,
    make_example,
    make_targets,
    read_model,
    segment,
    standardize,
    train,
    write_model,
)

from conftest import ball

SHAPE = (25, 25, 25)


def _ellipsoid(shape, axes, center=None):
    c = (np.asarray(shape) - 1) / 2 if center is None else np.asarray(center, float)
    g = np.indices(shape).T - c
    return ((g / np.asarray(axes)) ** 2).sum(axis=-1).T <= 1


def _phantom(rng, shape=SHAPE):
    axes = rng.uniform(4.5, 8.0, size=3)
    gt = _ellipsoid(shape, axes)
    image = gt + 0.15 * rng.normal(size=shape)
    return image, gt, ball(shape, 3)


def _examples(n, seed):
    rng = np.random.default_rng(seed)
    return [make_example(*_phantom(rng), id=f"e{i}") for i in range(n)]


def _small(**kw):
    base = dict(samples_per_example=300, n_trees=5, max_features="third", min_samples_leaf=3, importance=False)
    base.update(kw)
    return TrainConfig(**base)


class _OracleForest:
    """Stand-in forest that returns its single input column."""

    n_features_in_ = 1

    def predict(self, x):
        return x[:, 0]


def _nu_featurizer(u, example, coords):
    return example.target[tuple(np.asarray(coords).T)][:, None]


def _const_featurizer(u, example, coords):
    return np.ones((len(coords), 1))


def _with_target(ex, value):
    return Example(ex.image, ex.gt, np.full(ex.gt.shape, float(value)), ex.state, ex.id)


# -- targets and standardization ---------------------------------------------


def test_make_targets_is_signed_distance():
    gt = ball((15, 15, 15), 4)
    assert np.array_equal(make_targets(gt), signed_distance(gt))
    with pytest.raises(DegenerateMaskError):
        make_targets(np.zeros((5, 5, 5), bool))


def test_standardize_examples(rng):
    two = np.array([0.0, 2.0, 0.0, 2.0]).reshape(1, 2, 2)
    np.testing.assert_array_equal(standardize(two), np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 2, 2))
    m = rng.gamma(2.0, size=(6, 7, 8)) * 30
    z = standardize(m)
    assert abs(z.mean()) <= 1e-9 and abs(z.std() - 1) <= 1e-9
    np.testing.assert_allclose(standardize(z), z, atol=1e-12)
    with pytest.raises(ValueError):
        standardize(np.full((3, 3, 3), 5.0))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_iters=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(samples_per_example=0)
    with pytest.raises(ValueError):
        TrainConfig(feature_map="FM9")


# -- fit_iteration -----------------------------------------------------------


def test_fit_constant_regression():
    ex = _with_target(_examples(1, 0)[0], 2.75)
    f = fit_iteration([ex], _small(), 0, featurizer=_const_featurizer)
    assert np.all(f.predict(np.ones((4, 1))) == 2.75)


def test_small_band_used_whole():
    ex = _examples(1, 1)[0]
    seen = []

    def spy(u, example, coords):
        seen.append(np.asarray(coords).copy())
        return np.ones((len(coords), 1))

    fit_iteration([ex], _small(samples_per_example=10**6), 0, featurizer=spy)
    band = ex.state.band
    assert len(seen[0]) == len(band)
    assert len({tuple(c) for c in seen[0]}) == len(band)


def test_subsample_without_replacement():
    ex = _examples(1, 1)[0]
    seen = []

    def spy(u, example, coords):
        seen.append(np.asarray(coords).copy())
        return np.ones((len(coords), 1))

    fit_iteration([ex], _small(samples_per_example=50), 3, featurizer=spy)
    rows = {tuple(c) for c in seen[0]}
    assert len(seen[0]) == 50 == len(rows)
    assert rows <= {tuple(c) for c in ex.state.band}


def test_fit_iteration_deterministic():
    exs = _examples(2, 2)
    cfg = _small()
    a = fit_iteration(exs, cfg, 4)
    b = fit_iteration(exs, cfg, 4)
    assert a.to_bytes() == b.to_bytes()


def test_fit_iteration_all_degenerate():
    ex = _examples(1, 3)[0]
    dead = Example(ex.image, ex.gt, ex.target, LevelSetState(ex.state.u, ex.state.band, status=COLLAPSED))
    with pytest.raises(TrainingError):
        fit_iteration([dead], _small(), 0)


# -- evolve_all --------------------------------------------------------------


def test_zero_forest_keeps_masks():
    exs = [_with_target(e, 0.0) for e in _examples(2, 4)]
    f = fit_iteration(exs, _small(), 0, featurizer=_const_featurizer)
    out = evolve_all(exs, f, _small(), featurizer=_const_featurizer)
    for a, b in zip(exs, out):
        assert np.array_equal(a.state.mask, b.state.mask)


def test_oracle_forest_improves_jaccard():
    exs = _examples(4, 5)
    cfg = _small()
    scores = [np.mean([e.score for e in exs])]
    for _ in range(10):
        exs = evolve_all(exs, _OracleForest(), cfg, featurizer=_nu_featurizer)
        scores.append(np.mean([e.score for e in exs]))
    assert np.all(np.diff(scores) >= 0)
    assert scores[-1] > scores[0]


def test_evolve_permutation_independent():
    exs = _examples(3, 6)
    cfg = _small()
    f = fit_iteration(exs, cfg, 0)
    a = evolve_all(exs, f, cfg)
    b = evolve_all(exs[::-1], f, cfg)[::-1]
    for x, y in zip(a, b):
        assert np.array_equal(x.state.u, y.state.u)


def test_evolve_width_mismatch():
    exs = _examples(1, 7)
    f = RandomForestRegressor(n_trees=2).fit(np.ones((4, 3)) * np.arange(4)[:, None], np.arange(4.0))
    with pytest.raises(ValueError):
        evolve_all(exs, f, _small())


# -- train -------------------------------------------------------------------


def test_train_single_iteration():
    seq = train(_examples(2, 8), _examples(1, 9), _small(max_iters=1))
    assert len(seq.forests) == 1 and len(seq.trace) == 2
    assert seq.n_features == 18


def test_patience_rule_on_constant_scores():
    tr = [_with_target(e, 0.0) for e in _examples(2, 10)]
    va = _examples(1, 11)
    seq = train(tr, va, _small(max_iters=30, patience=3), featurizer=_const_featurizer)
    assert len(seq.forests) == 3
    assert seq.trace == [seq.trace[0]] * 4
    assert seq.n_star == 0


def test_callback_and_trace_maximum():
    calls = []
    seq = train(
        _examples(3, 12),
        _examples(2, 13),
        _small(max_iters=4, patience=2),
        callback=lambda n, tr, va: calls.append((n, np.mean([e.score for e in va]))),
    )
    assert [c[0] for c in calls] == list(range(len(seq.forests) + 1))
    np.testing.assert_allclose([c[1] for c in calls], seq.trace)
    assert seq.trace[seq.n_star] == max(seq.trace)
    assert seq.n_star == int(np.argmax(seq.trace))


@pytest.mark.slow
def test_augmented_featurizer_rig():
    """A forest that can read the target copies it and converges."""
    rng = np.random.default_rng(14)
    cfg = _small(max_iters=20, patience=20, n_trees=10)
    base = default_featurizer(cfg)

    def augmented(u, example, coords):
        return np.column_stack([base(u, example, coords), _nu_featurizer(u, example, coords)])

    def balls(n):
        out = []
        for i in range(n):
            gt = ball(SHAPE, rng.uniform(6, 9), center=rng.uniform(10, 14, size=3))
            img = gt + 0.2 * rng.normal(size=SHAPE)
            out.append(make_example(img, gt, ball(SHAPE, 3), id=str(i)))
        return out

    seq = train(balls(10), balls(10), cfg, featurizer=augmented)
    assert max(seq.trace) >= 0.95


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        train([], _examples(1, 0), _small())


# -- segment -----------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    tr = _examples(4, 20)
    va = _examples(2, 21)
    recorded = {}

    def rec(n, train_set, val_set):
        recorded[n] = [e.state.mask.copy() for e in train_set]

    seq = train(tr, va, _small(max_iters=5, patience=5), callback=rec)
    return seq, tr, recorded


def test_segment_reproduces_training_masks(trained):
    seq, tr, recorded = trained
    for n in range(len(seq.forests) + 1):
        for i, ex in enumerate(tr):
            res = segment(seq, ex.image, ex.state.mask, n_iter=n)
            assert np.array_equal(res.mask, recorded[n][i]), (n, i)


def test_segment_prefix_and_determinism(trained):
    seq, tr, _ = trained
    ex = tr[0]
    res0 = segment(seq, ex.image, ex.state.mask, n_iter=0)
    assert np.array_equal(res0.mask, ex.state.mask) and res0.volumes == [int(ex.state.mask.sum())]
    a = segment(seq, ex.image, ex.state.mask)
    b = segment(seq, ex.image, ex.state.mask)
    assert np.array_equal(a.mask, b.mask) and a.volumes == b.volumes
    assert len(a.volumes) == seq.n_star + 1
    with pytest.raises(ValueError):
        segment(seq, ex.image, ex.state.mask, n_iter=len(seq.forests) + 1)


def test_segment_standardizes_raw_image(trained):
    seq, tr, _ = trained
    ex = tr[1]
    raw = ex.image * 40.0 + 300.0
    a = segment(seq, raw, ex.state.mask, standardize_image=True)
    b = segment(seq, ex.image, ex.state.mask)
    assert np.array_equal(a.mask, b.mask)


def test_segment_collapse_warns():
    exs = [_with_target(e, -50.0) for e in _examples(1, 22)]
    cfg = _small()
    f = fit_iteration(exs, cfg, 0, featurizer=_const_featurizer)
    seq = ModelSequence(cfg, [f] * 40, 40, [0.0] * 41, n_features=1)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = segment(seq, exs[0].image, exs[0].state.mask, featurizer=_const_featurizer)
    assert res.status == COLLAPSED
    assert res.mask.any()
    assert any(issubclass(x.category, RuntimeWarning) for x in w)


# -- persistence -------------------------------------------------------------


def test_model_round_trip(trained, tmp_path):
    seq, tr, _ = trained
    seq.meta["init_sigma"] = "4.0"
    buf = encode_model(seq)
    path = tmp_path / "m.lsm"
    write_model(path, seq)
    back = read_model(path)
    assert encode_model(back) == buf == path.read_bytes()
    assert back.n_star == seq.n_star and back.trace == seq.trace
    assert back.config.feature_map == FM1 and back.meta == {"init_sigma": "4.0"}
    ex = tr[0]
    assert np.array_equal(segment(back, ex.image, ex.state.mask).mask, segment(seq, ex.image, ex.state.mask).mask)


def test_model_header_layout(trained):
    seq, _, _ = trained
    head = encode_model(seq).split(b"\n\n", 1)[0].decode().splitlines()
    assert head[0] == "LSMODEL1" and head[1] == "version=1"
    keys = dict(line.split("=", 1) for line in head[1:])
    for k in ("feature_map", "sigmas", "band_width", "cfl_safety", "n_trees", "n_star", "seed", "trace"):
        assert k in keys
    assert [float(x) for x in keys["trace"].split(",")] == seq.trace


def test_model_decode_errors(trained):
    seq, _, _ = trained
    buf = encode_model(seq)
    with pytest.raises(ValueError):
        decode_model(b"LSMODEL2" + buf[8:])
    with pytest.raises(ValueError):
        decode_model(buf + b"\x00")
    with pytest.raises(ValueError):
        decode_model(buf.replace(b"version=1", b"version=9"))
    with pytest.raises(ValueError):
        decode_model(buf[:20])


def test_model_sequence_invariants():
    with pytest.raises(ValueError):
        ModelSequence(_small(), [], 1, [0.0])
    with pytest.raises(ValueError):
        ModelSequence(_small(), [], 0, [0.0, 1.0])
