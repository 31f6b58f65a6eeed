"""Command-line entry point ``lsml``.

Every subcommand accepts ``--config FILE`` holding ``key = value`` lines
whose keys are the long option names (dashes or underscores); explicit
flags override the file. ``--threads`` defaults to ``$LSML_THREADS``.
"""
import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import annotations as ann
from . import features as feat
from . import initialization as ini
from . import synth
from . import training as tr
from .evaluation import overlap, report, write_report_csv, write_scores_csv, write_trace_csv
from .grid import interface_mask
from .io import FormatError, read_field, write_field

MANIFEST_FIELDS = ["split", "id", "path", "mask", "seed", "category", "radius"]


class CLIError(Exception):
    pass


class Outputs:
    """Files created by the running command, removed again if it fails."""

    def __init__(self):
        self.paths = []

    def __call__(self, path):
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def discard(self):
        for p in reversed(self.paths):
            try:
                if p.is_dir():
                    p.rmdir()
                else:
                    p.unlink()
            except OSError:
                pass


def _floats(text):
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _opt(text):
    if text is None or str(text).lower() == "none":
        return None
    try:
        return int(text)
    except ValueError:
        return str(text)


def _bool(text):
    return str(text).lower() in ("1", "true", "yes", "on")


def read_config(path):
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CLIError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _common(p):
    p.add_argument("--config", help="key = value file; flags take precedence")
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("--threads", type=int, help="worker threads (default $LSML_THREADS or 1)")


# option name -> (type, default) per subcommand; parsed with SUPPRESS so
# that the config file can fill whatever the command line leaves out
SPECS = {
    "synth": {
        "out": (str, None),
        "n_train": (int, 40),
        "n_val": (int, 10),
        "n_test": (int, 10),
        "dims": (_ints, (41, 41, 41)),
        "radius_min": (float, 6.0),
        "radius_max": (float, 12.0),
        "amplitude": (float, 0.3),
        "contrast": (float, 1.0),
        "noise": (float, 0.2),
        "categories": (str, ",".join(synth.CATEGORIES)),
        "seed": (int, 0),
    },
    "init-search": {
        "manifest": (str, None),
        "split": (str, "train"),
        "sigmas": (_floats, ini.SIGMA_GRID),
        "p_r": (_floats, ini.P_R_GRID),
        "n_rays": (int, 1024),
        "out": (str, None),
    },
    "train": {
        "manifest": (str, None),
        "out": (str, None),
        "trace": (str, None),
        "record": (str, None),
        "feature_map": (str, feat.FM1),
        "sigmas": (_floats, feat.DEFAULT_SIGMAS),
        "init_sigma": (float, 4.0),
        "init_p_r": (float, 70.0),
        "n_rays": (int, 1024),
        "max_iters": (int, 60),
        "patience": (int, 5),
        "samples_per_example": (int, 5000),
        "band_width": (float, 3.0),
        "cfl_safety": (float, 0.9),
        "n_trees": (int, 100),
        "max_features": (_opt, "all"),
        "min_samples_leaf": (int, 1),
        "max_depth": (_opt, None),
        "importance": (_bool, True),
        "seed": (int, 0),
    },
    "segment": {
        "model": (str, None),
        "image": (str, None),
        "out": (str, None),
        "trace": (str, None),
        "seed_point": (_floats, None),
        "n_iter": (int, None),
    },
    "eval": {
        "manifest": (str, None),
        "split": (str, "test"),
        "pred_dir": (str, None),
        "out": (str, None),
        "report": (str, None),
    },
    "importance": {"model": (str, None), "out": (str, None)},
    "slice": {
        "field": (str, None),
        "out": (str, None),
        "axis": (int, 2),
        "index": (int, None),
        "mask": (str, None),
    },
    "consolidate": {
        "corpus": (str, None),
        "out_dir": (str, None),
        "dims": (_ints, None),
        "slice_thickness": (float, 1.0),
        "pixel_spacing": (float, 1.0),
        "out_dims": (_ints, None),
        "shrink": (float, 0.9),
        "max_group": (int, 4),
    },
}

REQUIRED = {
    "synth": ["out"],
    "init-search": ["manifest", "out"],
    "train": ["manifest", "out"],
    "segment": ["model", "image", "out"],
    "eval": ["manifest", "pred_dir", "out"],
    "importance": ["model", "out"],
    "slice": ["field", "out"],
    "consolidate": ["corpus", "out_dir"],
}


def build_parser():
    parser = argparse.ArgumentParser(prog="lsml", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in SPECS.items():
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        _common(p)
        for key in spec:
            if key == "seed":
                continue
            p.add_argument("--" + key.replace("_", "-"), dest=key)
    return parser


def resolve(ns):
    """Merge defaults, config file and flags into one dict of typed values."""
    spec = SPECS[ns.command]
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    merged = {}
    if getattr(ns, "config", None):
        merged.update(read_config(ns.config))
    merged.update({k: v for k, v in given.items() if v is not None})
    out = {}
    for key, (conv, default) in spec.items():
        if key in merged:
            value = merged.pop(key)
            try:
                out[key] = conv(value) if isinstance(value, str) else value
            except ValueError as exc:
                raise CLIError(f"bad value for --{key.replace('_', '-')}: {value!r}") from exc
        else:
            out[key] = default
    threads = merged.pop("threads", None) or os.environ.get("LSML_THREADS") or 1
    out["threads"] = max(1, int(threads))
    merged.pop("seed", None)  # accepted everywhere, used where it matters
    if merged:
        raise CLIError(f"unknown option(s) for {ns.command}: {', '.join(sorted(merged))}")
    for key in REQUIRED[ns.command]:
        if out.get(key) is None:
            raise CLIError(f"--{key.replace('_', '-')} is required")
    return out


# -- manifests ------------------------------------------------------------------


def read_manifest(path, split=None):
    base = Path(path).parent
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if split is None or row["split"] == split:
                row["path"] = str(base / row["path"])
                row["mask"] = str(base / row["mask"])
                rows.append(row)
    if not rows:
        raise CLIError(f"manifest {path} has no rows for split {split!r}")
    return rows


def _load_pairs(rows):
    return [(read_field(r["path"]), read_field(r["mask"])) for r in rows]


# -- commands --------------------------------------------------------------------


def cmd_synth(o, out):
    root = Path(o["out"])
    tpl = synth.PhantomParams(
        dims=o["dims"],
        radius_range=(o["radius_min"], o["radius_max"]),
        amplitude=o["amplitude"],
        contrast=o["contrast"],
        noise=o["noise"],
    )
    cats = [c for c in o["categories"].split(",") if c]
    splits = synth.generate_dataset(o["n_train"], o["n_val"], o["n_test"], tpl, o["seed"], cats)
    manifest = out(root / "manifest.csv")
    rows = []
    for name, phantoms in zip(("train", "val", "test"), splits):
        for i, ph in enumerate(phantoms):
            ident = f"{name}{i:03d}"
            img = Path(name) / f"{ident}.lsf"
            msk = Path(name) / f"{ident}.lsm"
            write_field(out(root / img), ph.image)
            write_field(out(root / msk), ph.gt)
            rows.append([name, ident, img.as_posix(), msk.as_posix(), ph.seed, ph.category, repr(ph.radius)])
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    print(f"wrote {len(rows)} phantoms to {root}")


def cmd_init_search(o, out):
    rows = read_manifest(o["manifest"], o["split"])
    sigma, p_r, table = ini.grid_search(_load_pairs(rows), o["sigmas"], o["p_r"], n_rays=o["n_rays"])
    with open(out(o["out"]), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "p_r", "mean_jaccard"])
        for s, p, j in table:
            w.writerow([s, p, repr(j)])
    print(f"best sigma={sigma} p_r={p_r}")


def _init_params(o_or_meta, seed_point=None):
    return ini.InitParams(
        sigma=float(o_or_meta["init_sigma"]),
        p_r=float(o_or_meta["init_p_r"]),
        n_rays=int(o_or_meta["n_rays"]),
        seed_point=seed_point,
    )


def _examples(rows, params, band_width):
    out = []
    for r in rows:
        image, gt = read_field(r["path"]), read_field(r["mask"])
        out.append(
            tr.make_example(image, gt, ini.initialize(image, params), band_width, r["id"], r["category"])
        )
    return out


def cmd_train(o, out):
    config = tr.TrainConfig(
        feature_map=o["feature_map"],
        sigmas=o["sigmas"],
        max_iters=o["max_iters"],
        patience=o["patience"],
        samples_per_example=o["samples_per_example"],
        band_width=o["band_width"],
        cfl_safety=o["cfl_safety"],
        n_trees=o["n_trees"],
        max_features=o["max_features"],
        min_samples_leaf=o["min_samples_leaf"],
        max_depth=o["max_depth"],
        seed=o["seed"],
        importance=o["importance"],
        threads=o["threads"],
    )
    params = _init_params(o)
    train_set = _examples(read_manifest(o["manifest"], "train"), params, config.band_width)
    val_set = _examples(read_manifest(o["manifest"], "val"), params, config.band_width)

    best = {"score": -np.inf, "masks": None}

    def keep_best(n, tset, vset):
        score = float(np.mean([e.score for e in vset]))
        if score > best["score"]:
            best["score"] = score
            best["masks"] = [(e.id, e.state.mask.copy()) for e in tset]
        print(f"iter {n}: val mean jaccard {score:.4f}", flush=True)

    seq = tr.train(train_set, val_set, config, callback=keep_best)
    seq.meta.update(init_sigma=repr(params.sigma), init_p_r=repr(params.p_r), n_rays=str(params.n_rays))
    tr.write_model(out(o["out"]), seq)
    if o["trace"]:
        write_trace_csv(out(o["trace"]), seq.trace)
    if o["record"]:
        for ident, mask in best["masks"]:
            write_field(out(Path(o["record"]) / f"{ident}.lsm"), mask)
    print(f"n_star={seq.n_star} of {len(seq.forests)} forests")


def cmd_segment(o, out):
    seq = tr.read_model(o["model"], threads=o["threads"])
    missing = [k for k in ("init_sigma", "init_p_r", "n_rays") if k not in seq.meta]
    if missing:
        raise CLIError(f"model lacks initialization settings: {', '.join(missing)}")
    image = read_field(o["image"])
    if image.dtype == bool:
        raise CLIError("segment expects an image field, got a mask")
    init = ini.initialize(image, _init_params(seq.meta, o["seed_point"]))
    res = tr.segment(seq, image, init, standardize_image=True, n_iter=o["n_iter"])
    write_field(out(o["out"]), res.mask)
    if o["trace"]:
        with open(out(o["trace"]), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "volume"])
            w.writerows(enumerate(res.volumes))
    if res.status != "ok":
        print(f"warning: level set {res.status}; wrote last valid mask", file=sys.stderr)


def cmd_eval(o, out):
    rows = read_manifest(o["manifest"], o["split"])
    scores = []
    results = []
    for r in rows:
        pred = read_field(Path(o["pred_dir"]) / f"{r['id']}.lsm")
        ov = overlap(pred, read_field(r["mask"]))
        scores.append((r["id"], r["category"], ov.jaccard, ov.dice))
        results.append((r["id"], ov.jaccard, r["category"], ov.degenerate))
    write_scores_csv(out(o["out"]), scores)
    summary = report(results)
    if o["report"]:
        write_report_csv(out(o["report"]), summary)
    print(f"mean jaccard {summary.mean:.4f} +/- {summary.std:.4f} over {summary.n}")


def cmd_importance(o, out):
    seq = tr.read_model(o["model"])
    if not seq.importances:
        raise CLIError("model holds no feature importances")
    names = feat.column_names(seq.config.feature_map, seq.config.sigmas)
    if len(names) != seq.n_features:
        names = [f"x{j}" for j in range(seq.n_features)]
    with open(out(o["out"]), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter"] + list(names))
        for i, imp in enumerate(seq.importances):
            w.writerow([i] + [repr(float(x)) for x in imp])


def _slice(a, axis, index):
    if not 0 <= axis <= 2:
        raise CLIError("--axis must be 0, 1 or 2")
    if index is None:
        index = a.shape[axis] // 2
    if not 0 <= index < a.shape[axis]:
        raise CLIError(f"--index {index} outside 0..{a.shape[axis] - 1}")
    return np.take(a, index, axis=axis)


def cmd_slice(o, out):
    f = read_field(o["field"])
    plane = _slice(f.astype(np.float64), o["axis"], o["index"])
    lo, hi = float(plane.min()), float(plane.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    gray = np.round((plane - lo) * scale).astype(np.uint8)
    if o["mask"]:
        m = read_field(o["mask"])
        if m.shape != f.shape:
            raise CLIError("mask and field shapes differ")
        contour = _slice(interface_mask(m) & m, o["axis"], o["index"])
        gray[contour] = 255
    rows, cols = gray.shape
    with open(out(o["out"]), "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def cmd_consolidate(o, out):
    annotations = ann.read_corpus(o["corpus"])
    if not annotations:
        raise CLIError("corpus holds no annotations")
    dims = o["dims"]
    if dims is None:
        pts = np.vstack([a.points() for a in annotations])
        dims = tuple(int(np.ceil(x)) + 2 for x in pts.max(axis=0))
    groups = ann.cluster(annotations, o["slice_thickness"], o["shrink"], o["max_group"])
    root = Path(o["out_dir"])
    spacing = (o["pixel_spacing"], o["pixel_spacing"], o["slice_thickness"])
    summary = out(root / "groups.csv")
    lines = []
    for g, group in enumerate(groups):
        masks = [ann.rasterize(a, dims) for a in group.annotations]
        if o["out_dims"] is not None:
            masks = [ann.resample_isotropic(m.astype(np.float64), spacing, o["out_dims"]) >= 0.5 for m in masks]
        cons = ann.consensus50(masks)
        write_field(out(root / f"group{g:03d}_consensus.lsm"), cons)
        if len(masks) >= 2 and np.any(masks):
            med = ann.jaccard_median(masks)
            write_field(out(root / f"group{g:03d}_median.lsm"), med)
            j = overlap(cons, med).jaccard
        else:
            j = 1.0
        readers = ";".join(a.reader for a in group.annotations)
        lines.append([g, len(group), readers, int(group.over_capacity), repr(j)])
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "size", "readers", "over_capacity", "jaccard_consensus_median"])
        w.writerows(lines)
    flagged = sum(g.over_capacity for g in groups)
    if flagged:
        print(f"warning: {flagged} group(s) exceed {o['max_group']} readers", file=sys.stderr)


COMMANDS = {
    "synth": cmd_synth,
    "init-search": cmd_init_search,
    "train": cmd_train,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "importance": cmd_importance,
    "slice": cmd_slice,
    "consolidate": cmd_consolidate,
}


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    out = Outputs()
    try:
        opts = resolve(ns)
        COMMANDS[ns.command](opts, out)
    except (CLIError, FormatError, ValueError, OSError, KeyError, RuntimeError) as exc:
        out.discard()
        print(f"lsml {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
