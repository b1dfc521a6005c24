import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from starmaps.cli import main, run_bench, RunConfig
from starmaps.export import read_raster_csv
from starmaps.fields import load_starmap

MAP_ARGS = ["--origin", "49.0,8.4", "--bbox=-200,-200,200,200"]


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["ingest", *MAP_ARGS, "-o", str(d / "map.json")]) == 0
    assert main([
        "field", "--map", str(d / "map.json"), "--relation", "distance:road", "--relation", "over:park",
        "--relation", "distance:pilot", "--resolution", "16", "--n-samples", "20", "--seed", "7",
        "--threshold", "distance:road>30", "-o", str(d / "sm.zip"), "--csv-dir", str(d / "csv"),
        "--geojson", str(d / "cells.geojson"),
    ]) == 0
    return d


def test_ingest_prints_counts(tmp_path, capsys):
    assert main(["ingest", *MAP_ARGS, "-o", str(tmp_path / "m.json")]) == 0
    out = capsys.readouterr().out
    assert "building\t8" in out and "road\t8" in out and "features\t18" in out


def test_field_outputs(workdir):
    sm = load_starmap(workdir / "sm.zip")
    assert {(k[0].value, k[1]) for k in sm.fields} == {("distance", "road"), ("over", "park"), ("distance", "pilot")}
    assert sm.metadata["config"]["seed"] == 7
    values, _ = read_raster_csv(workdir / "csv" / "distance_road_mean.csv")
    assert values.shape == (16, 16)
    p, _ = read_raster_csv(workdir / "csv" / "p_distance_road_gt_30.csv")
    assert np.all((p >= 0) & (p <= 1))
    meta = json.loads((workdir / "csv" / "distance_road_mean.csv.meta.json").read_text())
    assert meta["resolution"] == 16
    with open(workdir / "csv" / "distance_road_mean.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["row", "col", "x", "y", "value"] and len(rows) == 1 + 256


def test_geojson_cells(workdir):
    doc = json.loads((workdir / "cells.geojson").read_text())
    assert doc["type"] == "FeatureCollection" and len(doc["features"]) == 256
    cell = doc["features"][0]
    ring = cell["geometry"]["coordinates"][0]
    assert ring[0] == ring[-1] and len(ring) == 5
    lon, lat = ring[0]
    assert 8.39 < lon < 8.41 and 48.99 < lat < 49.01
    assert "distance_road_mean" in cell["properties"]


def test_field_is_deterministic(tmp_path, monkeypatch, workdir):
    hashes = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        assert main(["field", "--map", str(workdir / "map.json"), "--resolution", "12", "--n-samples", "10",
                     "--seed", "3", "-o", "sm.zip", "--csv-dir", "csv"]) == 0
        hashes.append((sha(d / "sm.zip"), sha(d / "csv" / "distance_road_variance.csv")))
    assert hashes[0] == hashes[1]


def test_query_field_and_point(workdir, tmp_path, capsys, airspace_rules, airspace_fixture):
    prog = tmp_path / "airspace.pl"
    prog.write_text(airspace_rules)
    out_csv = tmp_path / "q.csv"
    assert main(["query", "--starmap", str(workdir / "sm.zip"), "--program", str(prog),
                 "--query", "airspace(X)", "--resolution", "8", "--csv", str(out_csv)]) == 0
    values, _ = read_raster_csv(out_csv)
    assert values.shape == (8, 8) and np.all((values >= 0) & (values <= 1))
    fixture = tmp_path / "fixture.pl"
    fixture.write_text(airspace_fixture)
    capsys.readouterr()
    assert main(["query", "--program", str(fixture), "--query", "airspace(X)", "--at", "0,0"]) == 0
    line = capsys.readouterr().out.strip().split("\t")
    assert float(line[1]) == pytest.approx(0.9957, abs=1e-3)


def test_render(workdir, tmp_path, capsys):
    src = workdir / "csv" / "distance_road_mean.csv"
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    assert main(["render", str(src), "-o", str(a)]) == 0
    assert main(["render", str(src), "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    data = a.read_bytes()
    assert data.startswith(b"P6\n16 16\n255\n") and len(data) == len(b"P6\n16 16\n255\n") + 16 * 16 * 3
    assert "legend" in capsys.readouterr().out


def test_render_constant_raster_is_one_color(tmp_path):
    from starmaps.export import write_raster_csv
    from starmaps.geometry import BBox

    write_raster_csv(tmp_path / "c.csv", np.full((4, 5), 3.0), BBox(0, 0, 1, 1))
    assert main(["render", str(tmp_path / "c.csv"), "-o", str(tmp_path / "c.ppm")]) == 0
    body = (tmp_path / "c.ppm").read_bytes().split(b"255\n", 1)[1]
    assert len(set(body[i:i + 3] for i in range(0, len(body), 3))) == 1


def test_exit_codes(workdir, tmp_path, capsys, airspace_rules):
    # 2: missing or unreadable input
    assert main(["ingest", "--input", str(tmp_path / "nope.osm"), *MAP_ARGS]) == 2
    bad = tmp_path / "bad.osm"
    bad.write_text("<osm><node id='1' lat='49'")
    assert main(["ingest", "--input", str(bad), "--format", "osm_xml", *MAP_ARGS]) == 2
    assert "offset" in capsys.readouterr().err
    # 3: nothing left after mapping
    assert main(["ingest", "--origin", "49.0,8.4", "--bbox=5000,5000,6000,6000"]) == 3
    # 4: field construction / malformed raster
    assert main(["field", "--map", str(workdir / "map.json"), "--relation", "distance:river",
                 "--resolution", "4", "--n-samples", "2"]) == 4
    junk = tmp_path / "junk.csv"
    junk.write_text("a,b\n1,2\n")
    assert main(["render", str(junk), "-o", str(tmp_path / "x.ppm")]) == 4
    # 5: program errors name the problem
    prog = tmp_path / "p.pl"
    prog.write_text(airspace_rules)
    capsys.readouterr()
    assert main(["query", "--starmap", str(workdir / "sm.zip"), "--program", str(prog),
                 "--query", "landing(X)", "--resolution", "4"]) == 5
    assert "landing" in capsys.readouterr().err
    broken = tmp_path / "broken.pl"
    broken.write_text("a(X) :- b(X)")
    assert main(["query", "--program", str(broken), "--query", "a(X)", "--at", "0,0"]) == 5
    assert "1:13" in capsys.readouterr().err
    # 6: missing field
    river = tmp_path / "river.pl"
    river.write_text("wet(X) :- over(X, river).")
    assert main(["query", "--starmap", str(workdir / "sm.zip"), "--program", str(river),
                 "--query", "wet(X)", "--resolution", "4"]) == 6


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "starmaps.cli", "ingest", *MAP_ARGS],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "features\t18" in res.stdout


def test_bench_small(town):
    cfg = RunConfig("bench", n_samples=10, seed=1, seed_points=30, rounds=2, batch=4, candidates=16)
    rows = run_bench(cfg, reference=32, resolutions=(4, 8, 16), repeats=1)
    grid = [r for r in rows if r["method"] == "grid"]
    assert [r["setting"] for r in grid] == ["4x4", "8x8", "16x16"]
    assert [r["relation_samples"] for r in grid] == [16 * 10, 64 * 10, 256 * 10]
    maes = [r["mae"] for r in grid]
    assert maes == sorted(maes, reverse=True)
    gp = [r for r in rows if r["method"] == "gp"]
    assert [r["locations"] for r in gp] == [30, 34, 38]
