"""Stage functions and the end-to-end run: extract, classify, filter, bin, fit, distfit.

Every stage is a plain function over in-memory records; the CLI subcommands
call the same functions, and :func:`run_pipeline` is their composition plus
file output.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import distfit, empirical, envclass, extract, fit, geo, synth
from .envclass import EnvClass

log = logging.getLogger(__name__)

WORKERS_ENV = "LOSPROB_WORKERS"

DEFAULT_CONFIG = {
    "seed": 0,
    "scenes": [],
    "generate": None,  # e.g. {"n_cells": 200}; the corpus is written under the artifact dir
    "extract": {"radius": 1000.0, "spacing": 5.0, "ue_height": 0.0, "step": 1.0,
                "index_cell_size": 50.0},
    "classify": {"reliability_threshold": 0.90},
    "bin": {"bin_width": 5.0, "max_radius": 1000.0},
    "fit": {"metric": "msle", "n_starts": 10, "nsse_threshold": 0.2, "epsilon": 0.05},
    "distfit": {"min_cells": 10},
    "sample": {"n": 0},
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class InputError(ValueError):
    """Bad configuration or missing input files."""


def merge_config(user: dict | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for key, val in (user or {}).items():
        if key not in cfg:
            raise InputError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict) and isinstance(val, dict):
            unknown = set(val) - set(cfg[key])
            if unknown:
                raise InputError(f"unknown keys in {key!r}: {sorted(unknown)}")
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def load_config(path) -> dict:
    try:
        return merge_config(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc


def stage_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Named substream of the top-level seed."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise InputError(f"{WORKERS_ENV} must be an integer") from None


def _map(fn, items, workers=None):
    workers = workers or n_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def atomic_write(path, writer, *args) -> None:
    """Run ``writer(tmp, *args)`` then rename onto ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp, *args)
    os.replace(tmp, path)


def _write_text(path, text):
    Path(path).write_text(text)


def extract_config(cfg) -> extract.ExtractConfig:
    e = cfg["extract"]
    return extract.ExtractConfig(e["radius"], e["spacing"], e["ue_height"], e["step"])


def fit_config(cfg) -> fit.FitConfig:
    f = cfg["fit"]
    return fit.FitConfig(metric=fit.Metric(f["metric"]), epsilon=f["epsilon"],
                         n_starts=int(f["n_starts"]), nsse_threshold=f["nsse_threshold"])


# ---------------------------------------------------------------------------
# stages


@dataclass
class CellData:
    los: extract.CellLosData
    stats: envclass.CellStats


def _scene_cells(args):
    scene_dir, cfg = args
    try:
        scene = geo.load_scene_dir(scene_dir)
    except (OSError, geo.SceneFormatError) as exc:
        raise StageError("extract", f"scene {scene_dir}: {exc}") from exc
    ec = extract_config(cfg)
    index = geo.build_index(scene, cfg["extract"]["index_cell_size"])
    out = []
    for bs in scene.stations:
        los = extract.extract_cell(scene, index, bs, ec)
        out.append(CellData(los, envclass.cell_stats(scene, bs, ec.radius)))
    return out


def _scene_stats(args):
    scene_dir, radius = args
    scene = geo.load_scene_dir(scene_dir)
    return [(bs.id, envclass.cell_stats(scene, bs, radius)) for bs in scene.stations]


def scene_stats(scene_dirs, radius=1000.0):
    """(bs_id, CellStats) for every station; the classify subcommand's input."""
    return [x for chunk in _map(_scene_stats, [(str(d), radius) for d in scene_dirs]) for x in chunk]


def classify_stats(stats, threshold=0.90) -> list[envclass.CellRecord]:
    kept, _ = envclass.filter_reliable([(st, i) for i, st in stats], threshold)
    kept_ids = {i for _, i in kept}
    return [envclass.CellRecord(i, st, envclass.classify(st), i in kept_ids) for i, st in stats]


def stage_extract(scene_dirs, cfg) -> list[CellData]:
    """LOS samples and building statistics for every station of every scene."""
    if not scene_dirs:
        raise StageError("extract", "no input scenes")
    cells = [c for chunk in _map(_scene_cells, [(str(d), cfg) for d in scene_dirs]) for c in chunk]
    ids = [c.los.bs_id for c in cells]
    dup = {i for i in ids if ids.count(i) > 1} if len(set(ids)) != len(ids) else set()
    if dup:
        raise StageError("extract", f"duplicate station ids across scenes: {sorted(dup)[:5]}")
    usable = [c for c in cells if c.los.usable]
    for c in cells:
        if not c.los.usable:
            log.warning("cell %s has no street samples in range; skipped", c.los.bs_id)
    if not usable:
        raise StageError("extract", "no LOS samples extracted from any cell")
    return usable


def stage_classify(cells, cfg) -> list[envclass.CellRecord]:
    return classify_stats([(c.los.bs_id, c.stats) for c in cells],
                          cfg["classify"]["reliability_threshold"])


def stage_bin(los_cells, records, cfg) -> list[empirical.LosCurve]:
    """Per-cell curves of the reliable cells."""
    b = cfg["bin"]
    keep = {r.bs_id for r in records if r.kept}
    return [empirical.bin_samples(c, b["bin_width"], b["max_radius"]) for c in los_cells
            if c.bs_id in keep]


def _fit_one(args):
    curve, fc = args
    try:
        return fit.fit_cell(curve, fc)
    except ValueError as exc:
        log.warning("fit skipped for %s: %s", curve.source, exc)
        return None


def stage_fit(curves, records, cfg) -> list[tuple[str, fit.FitResult]]:
    env_of = {r.bs_id: r.env.value for r in records}
    fc = fit_config(cfg)
    results = _map(_fit_one, [(c, fc) for c in curves])
    rows = [(env_of[c.source], r) for c, r in zip(curves, results) if r is not None]
    if not rows:
        raise StageError("fit", "no cell could be fitted")
    return rows


def stage_average(los_cells, records, cfg):
    """Pooled curve per environment, fitted with the 3-parameter and d1/d2 forms."""
    b = cfg["bin"]
    fc = fit_config(cfg)
    by_id = {c.bs_id: c for c in los_cells}
    curves, rows = [], []
    for env in EnvClass:
        ids = [r.bs_id for r in records if r.kept and r.env is env and r.bs_id in by_id]
        if not ids:
            continue
        curve = empirical.pool_cells([by_id[i] for i in ids], env, b["bin_width"], b["max_radius"])
        if len(curve) < 3:
            continue
        curves.append(curve)
        rows.append((env.value, fit.fit_cell(curve, fc)))
        d1d2 = fit.fit_d1d2(curve, fc)
        rows.append((env.value + ":d1d2", fit.FitResult(d1d2.params, d1d2.objective, d1d2.mse_linear,
                                                        d1d2.nsse, d1d2.is_outlier,
                                                        env.value + ":d1d2")))
    return curves, rows


def stage_distfit(fit_rows, cfg) -> list[distfit.EnvParamModel]:
    min_cells = max(int(cfg["distfit"]["min_cells"]), distfit.MIN_SAMPLES)
    models = []
    for env in EnvClass:
        good = [r for e, r in fit_rows if e == env.value and not r.is_outlier]
        if len(good) < min_cells:
            log.warning("%s: %d non-outlier cells (< %d); no distribution model", env.value,
                        len(good), min_cells)
            continue
        try:
            models.append(distfit.fit_environment(good, env))
        except distfit.DistFitError as exc:
            raise StageError("distfit", f"{env.value}: {exc}") from exc
    return models


# ---------------------------------------------------------------------------
# end to end


def summary_table(records, fit_rows, avg_rows, models) -> str:
    head = (f"{'env':6} {'cells':>5} {'kept':>5} {'fitted':>6} {'outl%':>6}  "
            f"{'avg U':>7} {'avg W':>8} {'avg F':>6}  {'U family':10} {'W family':10} {'F family':8}")
    lines = [head, "-" * len(head)]
    avg = {e: r for e, r in avg_rows}
    mod = {m.env.value: m for m in models}
    for env in EnvClass:
        n = sum(r.env is env for r in records)
        kept = sum(r.env is env and r.kept for r in records)
        fits_e = [r for e, r in fit_rows if e == env.value]
        outl = 100.0 * sum(r.is_outlier for r in fits_e) / len(fits_e) if fits_e else float("nan")
        a = avg.get(env.value)
        au, aw, af = a.params.as_tuple() if a else (float("nan"),) * 3
        m = mod.get(env.value)
        fam = [d.family for d in m.marginals] if m else ["-"] * 3
        lines.append(f"{env.value:6} {n:5d} {kept:5d} {len(fits_e):6d} {outl:6.1f}  "
                     f"{au:7.1f} {aw:8.1f} {af:6.3f}  {fam[0]:10} {fam[1]:10} {fam[2]:8}")
    return "\n".join(lines) + "\n"


def _scene_dirs(cfg, out_dir: Path) -> list[Path]:
    gen = cfg.get("generate")
    if gen:
        gen = dict(gen)
        n = int(gen.pop("n_cells"))
        seed = int(stage_seed(cfg["seed"], "generate").generate_state(1)[0])
        corpus = out_dir / "corpus"
        synth.generate_corpus(corpus, n, seed, **gen)
        return sorted(p for p in corpus.iterdir() if p.is_dir())
    dirs = []
    for entry in cfg["scenes"]:
        p = Path(entry)
        if (p / "corpus.json").exists():
            dirs += [p / c["dir"] for c in json.loads((p / "corpus.json").read_text())["cells"]]
        elif p.is_dir():
            dirs.append(p)
        else:
            raise InputError(f"scene directory {p} does not exist")
    return dirs


def run_pipeline(cfg: dict, out_dir) -> dict:
    """Run every stage, writing artifacts to ``out_dir``; returns a small report."""
    from .sampling import TripletSampler, write_triplets_csv

    cfg = merge_config(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", _write_text, json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    scene_dirs = _scene_dirs(cfg, out)

    cells = stage_extract(scene_dirs, cfg)
    los_cells = [c.los for c in cells]
    atomic_write(out / "los_samples.csv", extract.write_los_csv, los_cells)
    records = stage_classify(cells, cfg)
    atomic_write(out / "cells.csv", envclass.write_cells_csv, records)
    curves = stage_bin(los_cells, records, cfg)
    if not curves:
        raise StageError("bin", "no reliable cells left after filtering")
    atomic_write(out / "curves.csv", empirical.write_curves_csv, curves)
    fit_rows = stage_fit(curves, records, cfg)
    atomic_write(out / "fits.csv", fit.write_fits_csv, fit_rows)
    avg_curves, avg_rows = stage_average(los_cells, records, cfg)
    atomic_write(out / "average_curves.csv", empirical.write_curves_csv, avg_curves)
    atomic_write(out / "average_fits.csv", fit.write_fits_csv, avg_rows)
    models = stage_distfit(fit_rows, cfg)
    atomic_write(out / "env_models.json", distfit.write_env_models, models)
    n_sample = int(cfg["sample"]["n"])
    if n_sample > 0:
        for m in models:
            ss = stage_seed(cfg["seed"], f"sample:{m.env.value}")
            atomic_write(out / f"triplets_{m.env.value}.csv", write_triplets_csv,
                         TripletSampler(m, ss).sample(n_sample))
    table = summary_table(records, fit_rows, avg_rows, models)
    atomic_write(out / "summary.txt", _write_text, table)
    return {"summary": table, "n_cells": len(cells), "models": models}


def checksums(directory) -> dict[str, str]:
    """sha256 of every file under ``directory`` keyed by relative path."""
    root = Path(directory)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}
