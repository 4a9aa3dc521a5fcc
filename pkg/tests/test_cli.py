import csv
import io
import json
import math
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from nova import cli
from nova.entropy import EntropyMap
from nova.errors import InputError
from nova.formats import read_pnm, write_pgm
from oracles import batch_inflection

GOLDEN = Path(__file__).parent / "golden"
SCHEMA = json.loads((Path(cli.__file__).parent / "schemas" / "report.schema.json").read_text())
SMALL = ["--scales", "1,2,3,4,6", "--vocab", "16", "--dim", "16", "--layers", "2", "--heads", "2",
         "--seed", "3", "--t-est", "3"]
TWO_PHASE = "1,2,3,4,5,5.4,5.5,5.55,5.58,5.6"


def run(tmp_path, *argv, sub="out"):
    dest = tmp_path / sub
    return cli.main(list(argv) + ["--out-dir", str(dest)]), dest


def load(path):
    return json.loads(path.read_text())


class TestExitCodes:
    @pytest.mark.parametrize("argv", [
        ["generate", "--alpha", "1.5"],
        ["generate", "--tau", "0"],
        ["generate", "--t-est", "9"],
        ["generate", "--fixed-ratios", "0.1,0.2"],
        ["compare", "--modes", "off,turbo"],
        ["compare", "--modes", "nova"],
        ["heatmap", "--heatmap-scales", "11"],
        ["heatmap", "--heatmap-layers", "0"],
        ["bench", "--repeats", "0"],
    ])
    def test_config_errors(self, tmp_path, argv, capsys):
        code, _ = run(tmp_path, *argv)
        assert code == cli.EXIT_CONFIG
        assert "configuration error" in capsys.readouterr().err

    def test_message_names_field(self, tmp_path, capsys):
        run(tmp_path, "generate", "--alpha", "1.5")
        assert "alpha" in capsys.readouterr().err

    def test_bad_config_file(self, tmp_path):
        bad = tmp_path / "c.json"
        bad.write_text('{"alpha": 0.5, "warp": 1}')
        assert run(tmp_path, "trace", "--config", str(bad))[0] == cli.EXIT_CONFIG
        bad.write_text("[1, 2]")
        assert run(tmp_path, "trace", "--config", str(bad))[0] == cli.EXIT_CONFIG
        bad.write_text("{not json")
        assert run(tmp_path, "trace", "--config", str(bad))[0] == cli.EXIT_CONFIG

    def test_io_error(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code = cli.main(["trace", *SMALL, "--out-dir", str(blocker / "sub")])
        assert code == cli.EXIT_IO

    def test_missing_config_file(self, tmp_path):
        assert run(tmp_path, "trace", "--config", str(tmp_path / "nope.json"))[0] == cli.EXIT_IO

    def test_argparse_usage_is_config_code(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["generate", "--mode", "warp"])
        assert exc.value.code == cli.EXIT_CONFIG

    def test_internal_state(self, tmp_path, monkeypatch):
        from nova.errors import InternalStateError

        def boom(*a, **k):
            raise InternalStateError("forced")
        monkeypatch.setattr(cli, "run_generation", boom)
        assert run(tmp_path, "trace")[0] == cli.EXIT_INTERNAL


class TestGenerate:
    def test_files_and_schema(self, tmp_path):
        code, dest = run(tmp_path, "generate")
        assert code == 0
        assert sorted(p.name for p in dest.iterdir()) == sorted(
            ["report.json", "tokens.json", "feature.ppm", "trace.csv", "trace.json"])
        report = load(dest / "report.json")
        jsonschema.validate(report, SCHEMA)
        c = report["config"]
        assert (c["alpha"], c["tau"], c["lambda"], c["t_est"]) == (0.5, 0.8, 0.1, 5)

    def test_off_has_no_t_star(self, tmp_path):
        _, dest = run(tmp_path, "generate", *SMALL, "--mode", "off")
        report = load(dest / "report.json")
        jsonschema.validate(report, SCHEMA)
        assert "t_star" not in report and "activation_scale" not in report

    def test_schema_rejects_t_star_on_off(self, tmp_path):
        _, dest = run(tmp_path, "generate", *SMALL, "--mode", "off")
        report = load(dest / "report.json")
        report["t_star"] = 3
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(report, SCHEMA)

    def test_pruned_run_schema(self, tmp_path):
        _, dest = run(tmp_path, "generate", "--entropy-override", TWO_PHASE)
        report = load(dest / "report.json")
        jsonschema.validate(report, SCHEMA)
        assert report["t_star"] == 7 and report["activation_scale"] == 8
        assert report["fidelity"]["speedup"] > 1.3

    def test_rerun_byte_identical(self, tmp_path):
        _, a = run(tmp_path, "generate", *SMALL, sub="a")
        _, b = run(tmp_path, "generate", *SMALL, sub="b")
        _, c = run(tmp_path, "generate", *SMALL, sub="a")
        for name in ("report.json", "tokens.json", "feature.ppm", "trace.csv", "trace.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes() == (c / name).read_bytes()

    def test_ppm_shape(self, tmp_path):
        _, dest = run(tmp_path, "generate", *SMALL)
        magic, w, h, data = read_pnm(dest / "feature.ppm")
        assert (magic, w, h, data.size) == ("P6", 6, 6, 108)

    def test_config_file_and_flag_override(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"scales": [1, 2, 3, [4, 5]], "vocab": 16, "dim": 16, "layers": 2,
                                   "heads": 2, "t_est": 2, "alpha": 0.3}))
        _, dest = run(tmp_path, "generate", "--config", str(cfg), "--alpha", "0.4")
        c = load(dest / "report.json")["config"]
        assert c["alpha"] == 0.4 and c["scales"][-1] == [4, 5]


class TestTrace:
    def test_csv_shape_and_growth(self, tmp_path):
        _, dest = run(tmp_path, "trace", "--entropy-override", TWO_PHASE)
        rows = list(csv.reader(io.StringIO((dest / "trace.csv").read_text())))
        assert rows[0] == ["t", "mean", "growth", "smoothed"]
        body = rows[1:]
        assert len(body) == 10 and all(len(r) == 4 for r in body)
        means = [float(r[1]) for r in body]
        for prev, cur in zip(body, body[1:]):
            assert float(cur[2]) == float(cur[1]) - float(prev[1])
        side = load(dest / "trace.json")
        eta, t_star = batch_inflection(means, 5, 0.5)
        assert side["eta"] == eta and side["t_star"] == t_star == 7

    def test_measured_trace_matches_oracle(self, tmp_path):
        _, dest = run(tmp_path, "trace")
        rows = list(csv.reader(io.StringIO((dest / "trace.csv").read_text())))[1:]
        means = [float(r[1]) for r in rows]
        eta, t_star = batch_inflection(means, 5, 0.5)
        side = load(dest / "trace.json")
        assert side["t_star"] == t_star and side["eta"] == pytest.approx(eta, abs=1e-15)


class TestHeatmap:
    def test_dims_every_scale(self, tmp_path):
        _, dest = run(tmp_path, "heatmap")
        meta = load(dest / "heatmaps.json")["maps"]
        assert len(meta) == 10
        for entry in meta:
            magic, w, h, data = read_pnm(dest / entry["file"])
            assert magic == "P5" and (h, w) == (entry["h"], entry["w"]) and data.size == h * w
        sides = [1, 2, 3, 4, 5, 6, 8, 10, 13, 16]
        assert [(m["h"], m["w"]) for m in meta] == [(s, s) for s in sides]

    def test_layer_maps(self, tmp_path):
        _, dest = run(tmp_path, "heatmap", *SMALL, "--heatmap-scales", "2,5", "--heatmap-layers", "all")
        names = sorted(p.name for p in dest.glob("*.pgm"))
        assert names == ["heatmap_t02_j01.pgm", "heatmap_t02_j02.pgm",
                         "heatmap_t05_j01.pgm", "heatmap_t05_j02.pgm"]

    def test_per_map_constant_is_mid_gray(self, tmp_path):
        emap = EntropyMap(3, 2, 3, np.full(6, 1.7))
        meta = write_pgm(emap, tmp_path / "c.pgm", 64, "per-map")
        _, w, h, data = read_pnm(tmp_path / "c.pgm")
        assert (w, h) == (3, 2) and np.all(data == 128)
        assert meta["min"] == meta["max"] == 1.7

    def test_fixed_range_endpoints(self, tmp_path):
        emap = EntropyMap(2, 1, 3, np.array([0.0, math.log(64), math.log(64) / 2]))
        write_pgm(emap, tmp_path / "e.pgm", 64, "fixed")
        assert read_pnm(tmp_path / "e.pgm")[3].tolist() == [0, 255, 128]

    def test_read_rejects_garbage(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n\x00")
        with pytest.raises(InputError):
            read_pnm(tmp_path / "x.pgm")


class TestCompareAndBench:
    def test_row_order(self, tmp_path):
        _, dest = run(tmp_path, "compare", *SMALL, "--modes", "nova,off,fixed")
        rows = load(dest / "compare.json")["rows"]
        assert [r["mode"] for r in rows] == ["nova", "off", "fixed"]
        assert rows[1]["speedup"] == 1.0 and rows[1]["t_star"] is None

    def test_two_rows(self, tmp_path):
        _, dest = run(tmp_path, "compare", *SMALL, "--modes", "off,nova")
        assert len(load(dest / "compare.json")["rows"]) == 2

    def test_bench_off_vs_off(self, tmp_path):
        code, dest = run(tmp_path, "bench", *SMALL, "--mode", "off", "--repeats", "2")
        assert code == 0
        bench = load(dest / "bench.json")
        assert bench["ledger"]["speedup"] == 1.0

    def test_bench_repeats(self, tmp_path):
        _, dest = run(tmp_path, "bench", *SMALL, "--repeats", "5")
        assert [p.name for p in dest.iterdir()] == ["bench.json"]
        w = load(dest / "bench.json")["wall_ms"]
        assert len(w["baseline_runs"]) == len(w["accelerated_runs"]) == 5
        assert w["baseline_median"] == sorted(w["baseline_runs"])[2]

    def test_bench_two_phase(self, tmp_path):
        _, dest = run(tmp_path, "bench", "--entropy-override", TWO_PHASE, "--repeats", "1")
        assert load(dest / "bench.json")["ledger"]["speedup"] > 1.3

    def test_env_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NOVA_OUT_DIR", str(tmp_path / "env"))
        assert cli.main(["trace", *SMALL]) == 0
        assert (tmp_path / "env" / "trace.csv").exists()


def _golden_cases():
    import importlib.util
    path = Path(__file__).parents[1] / "scripts" / "regen_goldens.py"
    spec = importlib.util.spec_from_file_location("regen_goldens", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod.CASES


@pytest.mark.parametrize("name, argv", sorted(_golden_cases().items()))
def test_golden_byte_match(tmp_path, name, argv):
    code, dest = run(tmp_path, *argv)
    assert code == 0
    expected = sorted(p.name for p in (GOLDEN / name).iterdir())
    assert sorted(p.name for p in dest.iterdir()) == expected
    for fname in expected:
        assert (dest / fname).read_bytes() == (GOLDEN / name / fname).read_bytes(), f"{name}/{fname}"
