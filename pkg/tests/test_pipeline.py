import csv
import json

import numpy as np
import pytest

from losprob import cli
from losprob.distfit import read_env_models
from losprob.fit import read_fits_csv
from losprob.geo import load_scene_dir
from losprob.pipeline import (DEFAULT_CONFIG, InputError, StageError, checksums, merge_config,
                              run_pipeline)
from losprob.synth import SyntheticCitySpec, generate_city, generate_corpus

SMALL = {"extract": {"radius": 400.0}, "bin": {"max_radius": 400.0}}


# ---------------------------------------------------------------------------
# synthetic cities


def test_open_field_city():
    scene = generate_city(SyntheticCitySpec(coverage=0.0))
    assert scene.buildings == ()
    assert len(scene.streets.polylines) > 0


def test_infeasible_coverage():
    with pytest.raises(ValueError, match="infeasible"):
        generate_city(SyntheticCitySpec(street_width=60, coverage=0.5))
    with pytest.raises(ValueError):
        SyntheticCitySpec(coverage=1.0)


def test_city_layout():
    spec = SyntheticCitySpec(street_pitch=100, street_width=20, lots_per_side=2, coverage=0.25,
                             extent=300)
    scene = generate_city(spec)
    assert spec.building_side == pytest.approx(25.0)
    xs = np.array([b.footprint for b in scene.buildings])
    # every building sits inside a block, clear of the 20 m streets on the 100 m grid
    lo = xs.min(axis=1)
    assert np.all(np.mod(lo, 100) >= 10 - 1e-9)
    assert all(b.height == 15.0 for b in scene.buildings)


def test_city_files_byte_identical(tmp_path):
    spec = SyntheticCitySpec(coverage=0.3, height_mode="lognormal", height_sigma=0.4, jitter=0.5,
                             missing_height_fraction=0.2, slope=(0.01, -0.02), extent=400)
    generate_city(spec, 7, tmp_path / "a")
    generate_city(spec, 7, tmp_path / "b")
    generate_city(spec, 8, tmp_path / "c")
    a, b, c = checksums(tmp_path / "a"), checksums(tmp_path / "b"), checksums(tmp_path / "c")
    assert a == b and a != c
    scene = load_scene_dir(tmp_path / "a")
    assert len(scene.buildings) == len(generate_city(spec, 7).buildings)


def test_corpus_listing(tmp_path):
    cells = generate_corpus(tmp_path, 5, seed=3, extent=300)
    doc = json.loads((tmp_path / "corpus.json").read_text())
    assert [c["dir"] for c in doc["cells"]] == [c["dir"] for c in cells]
    assert len({c["template"] for c in cells}) == 4


# ---------------------------------------------------------------------------
# pipeline


def test_config_merge():
    cfg = merge_config({"fit": {"n_starts": 3}})
    assert cfg["fit"]["n_starts"] == 3 and cfg["fit"]["metric"] == "msle"
    assert DEFAULT_CONFIG["fit"]["n_starts"] == 10
    with pytest.raises(InputError):
        merge_config({"fitt": {}})
    with pytest.raises(InputError):
        merge_config({"fit": {"starts": 3}})


def test_empty_input_fails_at_extract(tmp_path):
    with pytest.raises(StageError) as exc:
        run_pipeline({"scenes": []}, tmp_path)
    assert exc.value.stage == "extract"


def test_missing_scene_dir(tmp_path):
    with pytest.raises(InputError):
        run_pipeline({"scenes": [str(tmp_path / "nope")]}, tmp_path / "out")


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = {"generate": {"n_cells": 44, "extent": 500.0}, "sample": {"n": 50}, **SMALL}
    report = run_pipeline(cfg, out)
    return out, cfg, report


def test_pipeline_artifacts(small_run):
    out, cfg, report = small_run
    for name in ("config.json", "los_samples.csv", "cells.csv", "curves.csv", "fits.csv",
                 "average_curves.csv", "average_fits.csv", "env_models.json", "summary.txt"):
        assert (out / name).stat().st_size > 0, name
    assert json.loads((out / "config.json").read_text()) == merge_config(cfg)
    models = read_env_models(out / "env_models.json")
    assert len(models) == len(report["models"]) >= 2
    for env, m in models.items():
        assert (out / f"triplets_{env.value}.csv").exists()
        assert m.n_cells >= 10
    avg = read_fits_csv(out / "average_fits.csv")
    assert any(r.source.endswith(":d1d2") and r.params.F == 1.0 for _, r in avg)
    assert report["summary"] == (out / "summary.txt").read_text()


def test_pipeline_outlier_fraction(small_run):
    out, _, _ = small_run
    rows = read_fits_csv(out / "fits.csv")
    assert rows
    assert np.mean([r.is_outlier for _, r in rows]) <= 0.05
    with open(out / "cells.csv", newline="") as fh:
        kept = [r for r in csv.DictReader(fh) if r["kept_flag"] in ("1", "True")]
    assert len(rows) == len(kept)


def test_pipeline_deterministic(tmp_path):
    cfg = {"generate": {"n_cells": 6, "extent": 400.0}, **SMALL}
    run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b")
    run_pipeline({**cfg, "seed": 1}, tmp_path / "c")
    a = checksums(tmp_path / "a")
    assert a == checksums(tmp_path / "b")
    assert a != checksums(tmp_path / "c")


# ---------------------------------------------------------------------------
# command line


def test_cli_stage_by_stage(tmp_path, capsys):
    d = tmp_path
    assert cli.main(["generate-city", "--out", str(d / "corpus"), "--corpus", "3", "--seed", "2"]) == 0
    assert cli.main(["extract", "--scene", str(d / "corpus"), "--out", str(d / "los.csv"),
                     "--radius", "300"]) == 0
    assert cli.main(["classify", "--scene", str(d / "corpus"), "--out", str(d / "cells.csv"),
                     "--radius", "300"]) == 0
    assert cli.main(["bin", "--los", str(d / "los.csv"), "--cells", str(d / "cells.csv"),
                     "--out", str(d / "curves.csv"), "--max-radius", "300"]) == 0
    assert cli.main(["fit", "--curves", str(d / "curves.csv"), "--cells", str(d / "cells.csv"),
                     "--out", str(d / "fits.csv"), "--starts", "3"]) == 0
    assert len(read_fits_csv(d / "fits.csv")) >= 1
    # too few cells for a model is a warning, not a failure
    assert cli.main(["distfit", "--fits", str(d / "fits.csv"), "--out", str(d / "env.json")]) == 0
    assert cli.main(["sample", "--env", "uma", "--n", "20", "--out", str(d / "t.csv")]) == 0
    assert len((d / "t.csv").read_text().splitlines()) == 21
    assert cli.main(["simulate", "--model", "average", "--env", "uma", "--pairs", "3",
                     "--realizations", "50", "--distances", "100,300", "--out", str(d / "o.csv"),
                     "--cdf-out", str(d / "c.csv")]) == 0
    assert "d_bs1= 300.0" in capsys.readouterr().out


def test_cli_pipeline_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"generate": {"n_cells": 4, "extent": 300.0}}))
    rc = cli.main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "out"), "--seed", "5",
                   "--set", "extract.radius=300", "--set", "bin.max_radius=300"])
    assert rc == 0
    echo = json.loads((tmp_path / "out" / "config.json").read_text())
    assert echo["seed"] == 5 and echo["extract"]["radius"] == 300
    assert "env" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path):
    assert cli.main(["fit", "--curves", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "f.csv")]) == 2
    assert cli.main(["generate-city", "--out", str(tmp_path / "x"), "--coverage", "0.9"]) == 2
    assert cli.main(["pipeline", "--out", str(tmp_path / "p"), "--set", "nonsense=1"]) == 2
    assert cli.main(["pipeline", "--out", str(tmp_path / "p")]) == 3  # no scenes: extract fails
    with pytest.raises(SystemExit):
        cli.main(["simulate", "--model", "magic", "--out", "x"])
