"""Command line entry point: ``losprob <subcommand> ...``.

Exit codes: 0 success, 2 input error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import distfit, empirical, envclass, extract, fit, geo, outage, pipeline, presets, synth
from .envclass import EnvClass

log = logging.getLogger("losprob")

EXIT_OK, EXIT_INPUT, EXIT_STAGE = 0, 2, 3


class _InputError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _scene_dirs(paths) -> list[Path]:
    try:
        return pipeline._scene_dirs({"generate": None, "scenes": list(paths)}, Path("."))
    except pipeline.InputError as exc:
        raise _InputError(str(exc)) from exc


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise _InputError(f"input file {p} does not exist")
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_city(a):
    if a.corpus:
        cells = synth.generate_corpus(a.out, a.corpus, a.seed)
        print(f"wrote {len(cells)} cells to {a.out}")
        return
    try:
        spec = synth.SyntheticCitySpec(
            street_pitch=a.pitch, street_width=a.street_width, lots_per_side=a.lots,
            coverage=a.coverage, height_mode=a.height_mode, height_median=a.height,
            height_sigma=a.height_sigma, missing_height_fraction=a.missing_heights, jitter=a.jitter,
            slope=tuple(a.slope), extent=a.extent, bs_height_agl=a.bs_height, bs_id=a.bs_id)
        scene = synth.generate_city(spec, a.seed, a.out)
    except ValueError as exc:
        raise _InputError(str(exc)) from exc
    print(f"wrote {len(scene.buildings)} buildings to {a.out}")


def cmd_extract(a):
    cfg = pipeline.merge_config({"extract": {"radius": a.radius, "spacing": a.spacing,
                                             "ue_height": a.ue_height, "step": a.step}})
    cells = pipeline.stage_extract(_scene_dirs(a.scene), cfg)
    pipeline.atomic_write(a.out, extract.write_los_csv, [c.los for c in cells])
    print(f"{sum(len(c.los) for c in cells)} samples from {len(cells)} cells -> {a.out}")


def cmd_classify(a):
    stats = pipeline.scene_stats(_scene_dirs(a.scene), a.radius)
    records = pipeline.classify_stats(stats, a.threshold)
    pipeline.atomic_write(a.out, envclass.write_cells_csv, records)
    print(f"{sum(r.kept for r in records)}/{len(records)} cells kept -> {a.out}")


def cmd_bin(a):
    cells = extract.read_los_csv(_need(a.los))
    cfg = pipeline.merge_config({"bin": {"bin_width": a.bin_width, "max_radius": a.max_radius}})
    if a.cells:
        records = envclass.read_cells_csv(_need(a.cells))
    else:
        records = [envclass.CellRecord(c.bs_id, envclass.CellStats(), EnvClass.UMA, True) for c in cells]
    if a.pool:
        curves, _ = [], None
        by_id = {c.bs_id: c for c in cells}
        for env in EnvClass:
            ids = [r.bs_id for r in records if r.kept and r.env is env and r.bs_id in by_id]
            if ids:
                curves.append(empirical.pool_cells([by_id[i] for i in ids], env, a.bin_width,
                                                   a.max_radius))
    else:
        curves = pipeline.stage_bin(cells, records, cfg)
    pipeline.atomic_write(a.out, empirical.write_curves_csv, curves)
    print(f"{len(curves)} curves -> {a.out}")


def cmd_fit(a):
    curves = empirical.read_curves_csv(_need(a.curves))
    env_of = {}
    if a.cells:
        env_of = {r.bs_id: r.env.value for r in envclass.read_cells_csv(_need(a.cells))}
    cfg = pipeline.merge_config({"fit": {"metric": a.metric, "n_starts": a.starts,
                                         "nsse_threshold": a.nsse_threshold}})
    fc = pipeline.fit_config(cfg)
    if a.d1d2:
        from dataclasses import replace
        fc = replace(fc, fixed_F=1.0)
    rows = []
    for c in curves:
        try:
            rows.append((env_of.get(c.source, c.source), fit.fit_cell(c, fc)))
        except ValueError as exc:
            log.warning("fit skipped for %s: %s", c.source, exc)
    if not rows:
        raise pipeline.StageError("fit", "no curve could be fitted")
    pipeline.atomic_write(a.out, fit.write_fits_csv, rows)
    n_out = sum(r.is_outlier for _, r in rows)
    print(f"{len(rows)} fits ({n_out} outliers) -> {a.out}")


def cmd_distfit(a):
    rows = fit.read_fits_csv(_need(a.fits))
    cfg = pipeline.merge_config({"distfit": {"min_cells": a.min_cells}})
    models = pipeline.stage_distfit(rows, cfg)
    pipeline.atomic_write(a.out, distfit.write_env_models, models)
    for m in models:
        print(f"{m.env.value:6} n={m.n_cells:4d}  U {m.dist_U.family:11} W {m.dist_W.family:11} "
              f"F {m.dist_F.family}")


def _env_model(a):
    env = EnvClass.parse(a.env)
    if a.models:
        models = distfit.read_env_models(_need(a.models))
        if env not in models:
            raise _InputError(f"{a.models} has no model for {env.value}")
        return models[env]
    return presets.env_model(env)


def cmd_sample(a):
    from .sampling import TripletSampler, write_triplets_csv
    sampler = TripletSampler(_env_model(a), a.seed)
    pipeline.atomic_write(a.out, write_triplets_csv, sampler.sample(a.n))
    print(f"{a.n} triplets -> {a.out}")


def cmd_simulate(a):
    env_model = _env_model(a) if a.model == "ensemble" else None
    try:
        cfg = outage.SimConfig(ue_height=a.ue_height, d_bs1_values=tuple(a.distances),
                               n_param_pairs=a.pairs, n_los_realizations=a.realizations,
                               rng_seed=a.seed)
    except ValueError as exc:
        raise _InputError(str(exc)) from exc
    results = outage.run_model(a.model, a.env, cfg, env_model)
    pipeline.atomic_write(a.out, outage.write_outage_csv, results)
    if a.cdf_out:
        pipeline.atomic_write(a.cdf_out, outage.write_cdf_csv, results)
    for r in results:
        print(f"{a.model:8} {a.env:6} d_bs1={r.d_bs1:6.1f}  mean={r.mean_outage:.5f}  "
              f"var={r.variance:.3e}")


def _override(cfg: dict, item: str):
    key, _, raw = item.partition("=")
    if not _:
        raise _InputError(f"--set expects key=value, got {item!r}")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = val


def cmd_pipeline(a):
    user = {}
    if a.config:
        try:
            user = json.loads(_need(a.config).read_text())
        except json.JSONDecodeError as exc:
            raise _InputError(f"{a.config}: {exc}") from exc
    for item in a.set or []:
        _override(user, item)
    if a.seed is not None:
        user["seed"] = a.seed
    try:
        cfg = pipeline.merge_config(user)
    except pipeline.InputError as exc:
        raise _InputError(str(exc)) from exc
    report = pipeline.run_pipeline(cfg, a.out)
    print(report["summary"], end="")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="losprob", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-city", help="write a synthetic scene (or a corpus of scenes)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", type=int, default=0, metavar="N",
                   help="write N randomised single-cell scenes instead of one city")
    p.add_argument("--coverage", type=float, default=0.3)
    p.add_argument("--pitch", type=float, default=100.0)
    p.add_argument("--street-width", type=float, default=20.0)
    p.add_argument("--lots", type=int, default=2)
    p.add_argument("--height", type=float, default=15.0, help="constant or median height (m)")
    p.add_argument("--height-mode", choices=("constant", "lognormal"), default="constant")
    p.add_argument("--height-sigma", type=float, default=0.0)
    p.add_argument("--missing-heights", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--slope", type=float, nargs=2, default=(0.0, 0.0))
    p.add_argument("--extent", type=float, default=1100.0)
    p.add_argument("--bs-height", type=float, default=25.0)
    p.add_argument("--bs-id", default="bs0")
    p.set_defaults(func=cmd_generate_city)

    p = sub.add_parser("extract", help="trace LOS labels for street samples")
    p.add_argument("--scene", nargs="+", required=True, help="scene or corpus directories")
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=1000.0)
    p.add_argument("--spacing", type=float, default=5.0)
    p.add_argument("--ue-height", type=float, default=0.0)
    p.add_argument("--step", type=float, default=1.0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("classify", help="cell statistics, environment class and reliability flag")
    p.add_argument("--scene", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=1000.0)
    p.add_argument("--threshold", type=float, default=0.90)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("bin", help="distance-binned empirical LOS curves")
    p.add_argument("--los", required=True)
    p.add_argument("--cells", help="cells CSV; unreliable cells are skipped")
    p.add_argument("--out", required=True)
    p.add_argument("--bin-width", type=float, default=5.0)
    p.add_argument("--max-radius", type=float, default=1000.0)
    p.add_argument("--pool", action="store_true", help="one pooled curve per environment")
    p.set_defaults(func=cmd_bin)

    p = sub.add_parser("fit", help="fit (U, W, F) to each curve")
    p.add_argument("--curves", required=True)
    p.add_argument("--cells", help="cells CSV providing the environment of each curve")
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=[m.value for m in fit.Metric], default="msle")
    p.add_argument("--starts", type=int, default=10)
    p.add_argument("--nsse-threshold", type=float, default=0.2)
    p.add_argument("--d1d2", action="store_true", help="fit the two-parameter form (F = 1)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("distfit", help="marginals and correlations per environment")
    p.add_argument("--fits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-cells", type=int, default=10)
    p.set_defaults(func=cmd_distfit)

    p = sub.add_parser("sample", help="draw correlated (U, W, F) triplets")
    p.add_argument("--env", required=True, type=str.lower, choices=("rma", "sma", "uma", "metma"))
    p.add_argument("--models", help="environment-model JSON (default: built-in reference tables)")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("simulate", help="two-BS Monte Carlo outage")
    p.add_argument("--model", choices=outage.MODELS, default="ensemble")
    p.add_argument("--env", type=str.lower, choices=("rma", "sma", "uma", "metma"), default="uma")
    p.add_argument("--models", help="environment-model JSON for the ensemble model")
    p.add_argument("--distances", type=_floats, default=[100.0, 200.0, 300.0, 400.0, 500.0])
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--realizations", type=int, default=1000)
    p.add_argument("--ue-height", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--cdf-out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pipeline", help="run every stage from one config file")
    p.add_argument("--config", help="JSON config; omitted keys take their defaults")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. fit.metric=mse or generate.n_cells=40")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        pipeline.n_workers()
        a.func(a)
    except (_InputError, pipeline.InputError, geo.SceneFormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except pipeline.StageError as exc:
        print(f"stage failure {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # any other failure inside a stage
        print(f"stage failure [{a.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
