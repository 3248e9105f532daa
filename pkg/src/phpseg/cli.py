"""Command-line entry point: ``phpseg <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._parallel import pmap
from .config import CONFIG_ENV, Config
from .errors import ConfigError, DataError
from .exemplars import (
    ExemplarSet,
    ScoreTable,
    build_exemplar_set,
    flatten_activation,
    iqr_bin_select,
    kmeans_exemplars,
    patch_score,
    random_exemplars,
    read_activation,
)
from .forest import RegressionForest, read_features, train
from .homology import PHProfile, patch_php
from .imaging import TileManifest, read_image
from .metrics import bench, confusion, report
from .segmenter import AccurateModel, read_decisions, segment, write_outputs
from .synth import synth_corpus

log = logging.getLogger("phpseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> Config:
    cfg = Config.load(args.config)
    over = {}
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    if getattr(args, "literal_complement", False):
        over["literal_complement"] = True
    if getattr(args, "thresholds", None):
        over["thresholds"] = tuple(int(t) for t in args.thresholds.split(","))
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    fast = {}
    if getattr(args, "c", None) is not None:
        fast["c"] = args.c
    if getattr(args, "k", None) is not None:
        fast["k"] = args.k
    if fast:
        over["fast"] = replace(cfg.fast, **fast)
    return replace(cfg, **over) if over else cfg


def _php_kwargs(cfg: Config) -> dict:
    return {"c_max": cfg.c_max, "literal_complement": cfg.literal_complement}


def _load_manifest(path) -> TileManifest:
    try:
        return TileManifest.read(path)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc


def _features_by_id(path) -> tuple[dict[str, np.ndarray], dict[str, str | None]]:
    try:
        ids, X, labels = read_features(path)
    except OSError as exc:
        raise DataError(f"cannot read feature table {path}: {exc}") from exc
    return dict(zip(ids, X)), dict(zip(ids, labels))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_php(args) -> int:
    cfg = _config(args)
    stains, filtration = cfg.stains(), cfg.filtration
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        m = _load_manifest(args.manifest)
        jobs = [(e.tile_id, m.resolve(e)) for e in m]
    else:
        jobs = [(Path(p).stem, Path(p)) for p in args.tiles]
    if not jobs:
        raise ConfigError("no input tiles given (pass tile paths or --manifest)")

    def one(job):
        tid, path = job
        try:
            rgb = read_image(path, "RGB")
        except (OSError, ValueError) as exc:
            return f"{tid}: cannot read {path}: {exc}"
        patch_php(rgb, filtration, stains, **_php_kwargs(cfg)).to_csv(out / f"{tid}.csv")
        return None

    errors = [e for e in pmap(one, jobs, cfg.workers) if e]
    for e in errors:
        log.error(e)
    print(f"wrote {len(jobs) - len(errors)} profile(s) to {out}; {len(errors)} failed")
    return EXIT_DATA if errors else EXIT_OK


def _activation_scores(m: TileManifest, directory: Path) -> ScoreTable:
    table = ScoreTable()
    for e in m:
        if e.label is None:
            continue
        path = directory / f"{e.tile_id}.actv"
        if not path.exists():
            raise DataError(f"no activation file for tile {e.tile_id!r} ({path})")
        table.add(e.tile_id, e.label, patch_score(flatten_activation(read_activation(path))))
    return table


def cmd_exemplars(args) -> int:
    cfg = _config(args)
    m = _load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    picks = {}
    if args.method == "scores":
        if args.scores:
            table = ScoreTable.read(args.scores)
        elif args.activations:
            table = _activation_scores(m, Path(args.activations))
            table.write(out / "scores.csv")
        else:
            raise ConfigError("method 'scores' needs --scores CSV or --activations DIR")
        for label in ("tumor", "normal"):
            try:
                picks[label] = iqr_bin_select(table, label, args.q)
            except ValueError as exc:
                raise DataError(str(exc)) from exc
    else:
        for label in ("tumor", "normal"):
            ids = m.ids(label)
            if len(ids) < args.q:
                raise DataError(f"class {label!r} has {len(ids)} labeled tiles, fewer than Q={args.q}")
            if args.method == "kmeans":
                patches = pmap(lambda i: m.read_rgb(m[i]), ids, cfg.workers)
                picks[label] = kmeans_exemplars(ids, patches, args.q, cfg.seed)
            else:
                picks[label] = random_exemplars(ids, args.q, cfg.seed)
    ex = build_exemplar_set(
        m,
        picks["tumor"],
        picks["normal"],
        cfg.filtration,
        stains=cfg.stains(),
        method=args.method,
        seed=cfg.seed,
        workers=cfg.workers,
        out_dir=out,
        **_php_kwargs(cfg),
    )
    print(f"exemplar set: {ex.sizes[0]} tumor, {ex.sizes[1]} normal -> {out / 'exemplars.json'}")
    return EXIT_OK


def cmd_train_accurate(args) -> int:
    cfg = _config(args)
    m = _load_manifest(args.manifest)
    feats, feat_labels = _features_by_id(args.features)
    filtration = cfg.filtration
    rows = []
    for e in m:
        label = e.label or feat_labels.get(e.tile_id)
        if label is None:
            continue
        if e.tile_id not in feats:
            raise DataError(f"tile {e.tile_id!r} has no row in {args.features}")
        rows.append((e, label))
    if not rows:
        raise DataError("no labeled tiles to train on")

    def profile(item) -> PHProfile:
        e, _ = item
        if args.php_dir:
            path = Path(args.php_dir) / f"{e.tile_id}.csv"
            try:
                prof = PHProfile.from_csv(path)
            except OSError as exc:
                raise DataError(f"cannot read profile {path}: {exc}") from exc
            if prof.thresholds != filtration.thresholds:
                raise DataError(f"{path}: thresholds differ from the configured filtration")
            return prof
        return patch_php(m.read_rgb(e), filtration, cfg.stains(), **_php_kwargs(cfg))

    profiles = pmap(profile, rows, cfg.workers)
    y = np.array([1.0 if lab == "tumor" else 0.0 for _, lab in rows])
    X1 = np.stack([p.feature_vector() for p in profiles])
    X2 = np.stack([feats[e.tile_id] for e, _ in rows])
    fcfg = cfg.forest if args.seed is None else replace(cfg.forest, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train(X1, y, fcfg, cfg.workers).save(out / "php_forest.json")
    train(X2, y, fcfg, cfg.workers).save(out / "feature_forest.json")
    print(f"trained on {len(rows)} tiles: {out / 'php_forest.json'}, {out / 'feature_forest.json'}")
    return EXIT_OK


def _pipeline_kwargs(args, cfg: Config) -> dict:
    if args.pipeline == "fast":
        if not args.exemplars:
            raise ConfigError("--pipeline fast needs --exemplars")
        ex = ExemplarSet.load(args.exemplars)
        return {"exemplars": ex, "fast": cfg.fast, "filtration": ex.filtration}
    missing = [n for n in ("php_forest", "feature_forest", "features") if not getattr(args, n)]
    if missing:
        raise ConfigError("--pipeline accurate needs " + ", ".join("--" + n.replace("_", "-") for n in missing))
    model = AccurateModel(RegressionForest.load(args.php_forest), RegressionForest.load(args.feature_forest))
    feats, _ = _features_by_id(args.features)
    return {"model": model, "features": feats, "filtration": cfg.filtration}


def cmd_segment(args) -> int:
    cfg = _config(args)
    m = _load_manifest(args.manifest)
    result = segment(
        m,
        args.pipeline,
        stains=cfg.stains(),
        workers=cfg.workers,
        **_pipeline_kwargs(args, cfg),
        **_php_kwargs(cfg),
    )
    paths = write_outputs(args.out, m, result)
    n_t = sum(d.is_tumor for d in result.decisions)
    print(f"{len(result.decisions)} tiles classified ({n_t} tumor); {len(result.failures)} failed")
    for tid, msg in result.failures:
        print(f"  failed {tid}: {msg}", file=sys.stderr)
    print(f"decisions: {paths['decisions']}")
    return EXIT_OK if result.ok else EXIT_DATA


def cmd_eval(args) -> int:
    predicted = read_decisions(args.decisions)
    truth = {e.tile_id: e.label for e in _load_manifest(args.truth) if e.label is not None}
    missing = sorted(set(truth) - set(predicted))
    if missing:
        log.warning("%d labeled tiles have no decision (first: %s)", len(missing), missing[0])
    rep = report(confusion(predicted, truth))
    text = json.dumps(rep, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    m = _load_manifest(args.manifest)
    rep = bench(
        m,
        args.pipeline,
        args.repetitions,
        warmup=args.warmup,
        stains=cfg.stains(),
        **_pipeline_kwargs(args, cfg),
        **_php_kwargs(cfg),
    )
    text = json.dumps(rep, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    lat = rep["latency_ms"]
    print(f"{rep['pipeline']}: median {lat['median']:.2f} ms, mean {lat['mean']:.2f} ms, p95 {lat['p95']:.2f} ms per patch")
    for stage, s in rep["stages_ms"].items():
        print(f"  {stage:<14} median {s['median']:.2f} ms")
    return EXIT_OK


def cmd_synth(args) -> int:
    m = synth_corpus(args.out, args.n, seed=args.seed, size=args.tile_size)
    print(f"wrote {len(m)} tiles, manifest.csv and features.csv to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phpseg", description="Tumor patch classification from persistent homology profiles.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, workers=True):
        sp.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
        sp.add_argument("--thresholds", help="comma-separated filtration thresholds")
        sp.add_argument("--literal-complement", action="store_true", help="count every complement component as beta1")
        if workers:
            sp.add_argument("--workers", type=int, help="worker threads (outputs do not depend on it)")

    def pipeline_models(sp):
        sp.add_argument("--pipeline", choices=("fast", "accurate"), default="fast")
        sp.add_argument("--exemplars", help="exemplar manifest (fast pipeline)")
        sp.add_argument("--php-forest", help="profile forest JSON (accurate pipeline)")
        sp.add_argument("--feature-forest", help="external-feature forest JSON (accurate pipeline)")
        sp.add_argument("--features", help="external feature CSV (accurate pipeline)")
        sp.add_argument("--c", type=float, help="similarity constant")
        sp.add_argument("--k", type=int, help="number of nearest exemplars")

    sp = sub.add_parser("php", help="compute one profile CSV per tile")
    sp.add_argument("tiles", nargs="*")
    sp.add_argument("--manifest")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_php)

    sp = sub.add_parser("exemplars", help="select exemplar tiles and store their profiles")
    sp.add_argument("method", choices=("scores", "kmeans", "random"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--q", type=int, default=128, help="exemplars per class")
    sp.add_argument("--scores", help="score table CSV (patch_id,label,score)")
    sp.add_argument("--activations", help="directory of <tile_id>.actv activation tensors")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_exemplars)

    sp = sub.add_parser("segment", help="classify every tile of a manifest")
    sp.add_argument("--manifest", required=True)
    pipeline_models(sp)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("train-accurate", help="train the profile and external-feature forests")
    sp.add_argument("--manifest", required=True, help="labeled tile manifest")
    sp.add_argument("--features", required=True, help="external feature CSV")
    sp.add_argument("--php-dir", help="directory of precomputed <tile_id>.csv profiles")
    sp.add_argument("--seed", type=int, help="forest seed")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train_accurate)

    sp = sub.add_parser("eval", help="precision/recall/F1/specificity of a decision CSV")
    sp.add_argument("--decisions", required=True)
    sp.add_argument("--truth", required=True, help="labeled tile manifest")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="per-patch latency benchmark")
    sp.add_argument("--manifest", required=True)
    pipeline_models(sp)
    sp.add_argument("--repetitions", type=int, default=3)
    sp.add_argument("--warmup", type=int, default=5)
    sp.add_argument("--out")
    common(sp, workers=False)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("synth", help="generate a labeled synthetic tile corpus")
    sp.add_argument("--n", type=int, default=50, help="tiles per class")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tile-size", type=int, default=256)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"phpseg: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"phpseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"phpseg: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
