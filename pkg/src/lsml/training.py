"""Iterative training and deployment of level-set velocity models.

Every iteration fits one random forest that maps per-voxel features of the
current level sets to the signed distance of the ground truth, then moves
all training and validation level sets one step with it. Deployment replays
the fitted forests up to the validation-optimal iteration count.
"""
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import features as feat
from .evaluation import jaccard
from .forest import RandomForestRegressor
from .grid import DimensionError, as_field, as_mask, signed_distance
from .levelset import OK, LevelSetState, step

__all__ = [
    "TrainConfig",
    "Example",
    "ModelSequence",
    "SegmentResult",
    "TrainingError",
    "make_targets",
    "standardize",
    "make_example",
    "fit_iteration",
    "evolve_all",
    "train",
    "segment",
    "encode_model",
    "decode_model",
    "write_model",
    "read_model",
]

MODEL_MAGIC = "LSMODEL1"
MODEL_VERSION = 1


class TrainingError(RuntimeError):
    """No usable training state is left to fit a velocity model on."""


@dataclass
class TrainConfig:
    """Training hyper-parameters.

    ``threads`` only sets the number of worker threads; results never
    depend on it, so it is not written to model files.
    """

    feature_map: str = feat.FM1
    sigmas: tuple = feat.DEFAULT_SIGMAS
    max_iters: int = 60
    patience: int = 5
    samples_per_example: int = 5000
    band_width: float = 3.0
    cfl_safety: float = 0.9
    n_trees: int = 100
    max_features: object = "all"
    min_samples_leaf: int = 1
    max_depth: object = None
    seed: int = 0
    importance: bool = True
    threads: int = 1

    def __post_init__(self):
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if self.feature_map not in (feat.FM1, feat.FM2):
            raise ValueError(f"unknown feature map {self.feature_map!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.samples_per_example < 1:
            raise ValueError("samples_per_example must be >= 1")
        if self.band_width < 1:
            raise ValueError("band_width must be >= 1")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")

    def forest(self, seed):
        return RandomForestRegressor(
            n_trees=self.n_trees,
            max_features=self.max_features,
            min_samples_leaf=self.min_samples_leaf,
            max_depth=self.max_depth,
            random_state=seed,
            n_jobs=self.threads,
        )


@dataclass
class Example:
    """A standardized image, its ground truth, target and level-set state."""

    image: np.ndarray
    gt: np.ndarray
    target: np.ndarray
    state: LevelSetState
    id: str = ""
    category: str = ""
    scales: object = field(default=None, repr=False)

    def image_scales(self, sigmas):
        sigmas = tuple(float(s) for s in sigmas)
        if self.scales is None or self.scales.sigmas != sigmas:
            self.scales = feat.ImageScales(self.image, sigmas)
        return self.scales

    @property
    def score(self):
        return jaccard(self.state.mask, self.gt)


def make_targets(gt):
    """Signed distance of the ground truth, positive inside."""
    return signed_distance(gt)


def standardize(m):
    """Zero-mean, unit-variance copy of ``m``."""
    m = as_field(m)
    sd = m.std()
    if not sd > 0:
        raise ValueError("cannot standardize a constant image")
    return (m - m.mean()) / sd


def make_example(image, gt, init_mask, band_width=3.0, id="", category="", raw=True):
    """Build an :class:`Example`; ``raw`` images are standardized first."""
    image = standardize(image) if raw else as_field(image)
    gt = as_mask(gt)
    if image.shape != gt.shape:
        raise DimensionError(f"image {image.shape} and mask {gt.shape} differ")
    state = LevelSetState.from_mask(init_mask, band_width)
    if state.u.shape != gt.shape:
        raise DimensionError("initial mask shape does not match the image")
    return Example(image, gt, make_targets(gt), state, id=id, category=category)


def default_featurizer(config):
    def featurize(u, example, coords):
        scales = example.image_scales(config.sigmas)
        return feat.assemble(u, None, config.feature_map, coords, config.sigmas, scales).values

    return featurize


def _sample_band(band, limit, seed, iteration, index):
    if len(band) <= limit:
        return band
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, iteration, index])))
    pick = np.sort(rng.choice(len(band), size=limit, replace=False))
    return band[pick]


def _training_rows(examples, config, iteration, featurizer):
    featurizer = featurizer or default_featurizer(config)
    xs, ys = [], []
    for idx, ex in enumerate(examples):
        if not ex.state.active or len(ex.state.band) == 0:
            continue
        coords = _sample_band(ex.state.band, config.samples_per_example, config.seed, iteration, idx)
        xs.append(featurizer(ex.state.u, ex, coords))
        ys.append(ex.target[tuple(coords.T)])
    if not xs:
        raise TrainingError("every training state has collapsed or exploded")
    return np.vstack(xs), np.concatenate(ys)


def _forest_seed(config, iteration):
    ss = np.random.SeedSequence([config.seed, iteration, 7])
    return int(ss.generate_state(1, np.uint32)[0])


def fit_iteration(examples, config, iter_seed, featurizer=None):
    """Fit the velocity forest of one iteration on band samples of every example.

    Up to ``samples_per_example`` band voxels are drawn without replacement
    per example from a stream keyed by ``(config.seed, iter_seed, index)``.
    """
    x, y = _training_rows(examples, config, iter_seed, featurizer)
    return config.forest(_forest_seed(config, iter_seed)).fit(x, y)


def _velocity(ex, forest, featurizer, full_domain):
    u = ex.state.u
    if full_domain:
        coords = np.argwhere(np.ones(u.shape, dtype=bool))
    else:
        coords = ex.state.band
    v = np.zeros(u.shape)
    if len(coords):
        x = featurizer(u, ex, coords)
        if x.shape[1] != forest.n_features_in_:
            raise ValueError(f"forest expects {forest.n_features_in_} columns, features have {x.shape[1]}")
        v[tuple(coords.T)] = forest.predict(x)
    return v


def evolve_all(examples, forest, config, featurizer=None, full_domain=False):
    """Move every active example one step with the velocity predicted by ``forest``.

    Velocity is predicted on the whole band of each example and is zero
    elsewhere. Collapsed or exploded states are left frozen.
    """
    featurizer = featurizer or default_featurizer(config)
    out = []
    for ex in examples:
        if not ex.state.active:
            out.append(ex)
            continue
        v = _velocity(ex, forest, featurizer, full_domain)
        st = step(ex.state, v, config.band_width, config.cfl_safety, full_domain=full_domain)
        out.append(replace(ex, state=st))
    return out


def _mean_score(examples):
    return float(np.mean([ex.score for ex in examples]))


@dataclass
class ModelSequence:
    """Fitted velocity forests with the validation trace that selected ``n_star``."""

    config: TrainConfig
    forests: list
    n_star: int
    trace: list
    importances: list = field(default_factory=list)
    n_features: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_star > len(self.forests):
            raise ValueError("n_star exceeds the number of forests")
        if len(self.trace) != len(self.forests) + 1:
            raise ValueError("trace must hold one score per forest plus the initial score")


def train(train_set, val_set, config, featurizer=None, callback=None):
    """Run the training loop and return the fitted :class:`ModelSequence`.

    Parameters
    ----------
    train_set, val_set : list of Example
        Initialized, standardized examples. Validation examples are only
        evolved, never fitted on.
    config : TrainConfig
    featurizer : callable, optional
        ``featurizer(u, example, coords) -> ndarray``; defaults to the
        configured feature map.
    callback : callable, optional
        Called as ``callback(n, train_set, val_set)`` after iteration ``n``
        (``n = 0`` before any forest is applied).

    Training stops after ``max_iters`` forests, or once the best validation
    score is ``patience`` iterations old.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    featurizer = featurizer or default_featurizer(config)
    train_set, val_set = list(train_set), list(val_set)
    trace = [_mean_score(val_set)]
    if callback is not None:
        callback(0, train_set, val_set)
    forests, importances = [], []
    for n in range(config.max_iters):
        x, y = _training_rows(train_set, config, n, featurizer)
        forest = config.forest(_forest_seed(config, n)).fit(x, y)
        forests.append(forest)
        if config.importance:
            importances.append(forest.permutation_importance(x, y))
        train_set = evolve_all(train_set, forest, config, featurizer)
        val_set = evolve_all(val_set, forest, config, featurizer)
        trace.append(_mean_score(val_set))
        if callback is not None:
            callback(n + 1, train_set, val_set)
        if len(trace) - 1 - int(np.argmax(trace)) >= config.patience:
            break
    return ModelSequence(
        config=config,
        forests=forests,
        n_star=int(np.argmax(trace)),
        trace=trace,
        importances=importances,
        n_features=forests[0].n_features_in_,
    )


@dataclass
class SegmentResult:
    mask: np.ndarray
    volumes: list
    status: str
    state: LevelSetState = field(repr=False, default=None)


def segment(seq, m, u0, standardize_image=False, n_iter=None, featurizer=None, full_domain=False, callback=None):
    """Apply the first ``n_star`` forests of ``seq`` to image ``m``.

    Parameters
    ----------
    seq : ModelSequence
    m : ndarray
        Image; standardized here when ``standardize_image`` is set.
    u0 : ndarray of bool or LevelSetState
        Initial segmentation.
    n_iter : int, optional
        Number of forests to apply instead of ``seq.n_star``.
    full_domain : bool
        Predict the velocity on every voxel rather than only on the band.
    callback : callable, optional
        Called as ``callback(n, state)`` after iteration ``n`` (``n = 0``
        before any forest is applied).

    Returns
    -------
    SegmentResult
        Final mask, mask volume after every iteration (index 0 is the
        initialization) and the level-set status. A collapsed or exploded
        front returns the last valid mask with a warning.
    """
    config = seq.config
    image = standardize(m) if standardize_image else as_field(m)
    if isinstance(u0, LevelSetState):
        state = u0
    else:
        state = LevelSetState.from_mask(u0, config.band_width)
    if state.u.shape != image.shape:
        raise DimensionError("initialization and image shapes differ")
    n = seq.n_star if n_iter is None else int(n_iter)
    if not 0 <= n <= len(seq.forests):
        raise ValueError(f"n_iter must lie in [0, {len(seq.forests)}]")
    ex = Example(image, np.zeros(image.shape, bool), np.zeros(image.shape), state)
    featurizer = featurizer or default_featurizer(config)
    volumes = [int(state.mask.sum())]
    if callback is not None:
        callback(0, state)
    for i, forest in enumerate(seq.forests[:n]):
        if not ex.state.active:
            break
        ex = evolve_all([ex], forest, config, featurizer, full_domain=full_domain)[0]
        volumes.append(int(ex.state.mask.sum()))
        if callback is not None:
            callback(i + 1, ex.state)
    if ex.state.status != OK:
        warnings.warn(f"level set {ex.state.status}; returning last valid mask", RuntimeWarning)
    return SegmentResult(ex.state.mask.copy(), volumes, ex.state.status, ex.state)


# -- persistence -------------------------------------------------------------

_PERSISTED = (
    "feature_map",
    "sigmas",
    "max_iters",
    "patience",
    "samples_per_example",
    "band_width",
    "cfl_safety",
    "n_trees",
    "max_features",
    "min_samples_leaf",
    "max_depth",
    "seed",
    "importance",
)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _parse_opt(text):
    if text == "none":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _parse_config(kv):
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for key in _PERSISTED:
        if key not in kv:
            raise ValueError(f"model header lacks {key!r}")
        text = kv[key]
        if key == "sigmas":
            out[key] = tuple(float(s) for s in text.split(",")) if text else ()
        elif key in ("max_features", "max_depth"):
            out[key] = _parse_opt(text)
        elif key == "importance":
            out[key] = text == "true"
        elif types[key] in (int, "int"):
            out[key] = int(text)
        elif types[key] in (float, "float"):
            out[key] = float(text)
        else:
            out[key] = text
    return TrainConfig(**out)


def encode_model(seq):
    """Serialize a :class:`ModelSequence` in the LSMODEL1 layout.

    A UTF-8 header of ``key=value`` lines ends with a blank line; the
    forests follow as consecutive binary tree tables.
    """
    cfg = seq.config
    lines = [MODEL_MAGIC, f"version={MODEL_VERSION}"]
    lines += [f"{k}={_fmt(getattr(cfg, k))}" for k in _PERSISTED]
    lines += [
        f"n_forests={len(seq.forests)}",
        f"n_features={seq.n_features}",
        f"n_star={seq.n_star}",
        f"trace={_fmt([float(t) for t in seq.trace])}",
    ]
    for i, imp in enumerate(seq.importances):
        lines.append(f"importance.{i}={_fmt([float(x) for x in imp])}")
    for key in sorted(seq.meta):
        lines.append(f"meta.{key}={seq.meta[key]}")
    head = ("\n".join(lines) + "\n\n").encode("utf-8")
    return head + b"".join(f.to_bytes() for f in seq.forests)


def decode_model(buf, threads=1):
    buf = bytes(buf)
    end = buf.find(b"\n\n")
    if end < 0:
        raise ValueError("model header is not terminated by a blank line")
    lines = buf[:end].decode("utf-8").split("\n")
    if lines[0] != MODEL_MAGIC:
        raise ValueError(f"not an {MODEL_MAGIC} file")
    kv = dict(line.split("=", 1) for line in lines[1:])
    version = int(kv.get("version", -1))
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    config = _parse_config(kv)
    config.threads = threads
    n_forests = int(kv["n_forests"])
    pos = end + 2
    forests = []
    params = dict(
        n_trees=config.n_trees,
        max_features=config.max_features,
        min_samples_leaf=config.min_samples_leaf,
        max_depth=config.max_depth,
        n_jobs=threads,
    )
    for n in range(n_forests):
        forest, pos = RandomForestRegressor.from_bytes(buf, pos, random_state=_forest_seed(config, n), **params)
        forests.append(forest)
    if pos != len(buf):
        raise ValueError("trailing bytes after the last forest")
    trace = [float(t) for t in kv["trace"].split(",")]
    importances = []
    for i in range(n_forests):
        key = f"importance.{i}"
        if key in kv:
            importances.append(np.array([float(x) for x in kv[key].split(",")]))
    return ModelSequence(
        config=config,
        forests=forests,
        n_star=int(kv["n_star"]),
        trace=trace,
        importances=importances,
        n_features=int(kv["n_features"]),
        meta={k[5:]: v for k, v in kv.items() if k.startswith("meta.")},
    )


def write_model(path, seq):
    with open(path, "wb") as fh:
        fh.write(encode_model(seq))


def read_model(path, threads=1):
    with open(path, "rb") as fh:
        return decode_model(fh.read(), threads=threads)
