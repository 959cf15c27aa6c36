"""End-to-end coverage of the command-line workflow.

``main(argv)`` is driven in-process so subcommands reuse the loaded
interpreter; one subprocess check proves the installed console script
resolves.  A module fixture runs the whole pipeline once (generate, train,
evaluate, index, query, figures) and the tests assert on its artifacts.
"""

import io
import json
import subprocess
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from anatomy_cbir import __version__
from anatomy_cbir.cli import main


def run_cli(argv):
    """Invoke the CLI in-process; returns (exit_code, parsed stdout or None)."""
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(argv)
    text = buf.getvalue()
    try:
        return code, json.loads(text)
    except json.JSONDecodeError:
        return code, text


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One pass through every artifact-producing subcommand."""
    base = tmp_path_factory.mktemp("cli")
    data = base / "archive"
    run_dir = base / "run"
    cfg_path = base / "tiny.json"
    cfg_path.write_text(json.dumps(
        {"num_codes": 16, "code_dim": 8, "spade_hidden": 8}))

    out = {}
    out["gen_code"], out["gen"] = run_cli([
        "phantom-gen", "--count", "10", "--seed", "3", "--size", "64",
        "--normal-fraction", "0.4", "--out", str(data)])

    out["train_code"], out["train"] = run_cli([
        "train", "--data", str(data), "--out", str(run_dir),
        "--config", str(cfg_path), "--epochs", "1", "--batch-size", "4",
        "--lr", "1e-4", "--image-size", "64", "--seed", "5"])

    report_path = base / "report.json"
    out["eval_code"], out["eval"] = run_cli([
        "eval", "--checkpoint", out["train"]["checkpoint"],
        "--data", str(data), "--out", str(report_path)])

    index_path = base / "index.zip"
    out["index_code"], out["index"] = run_cli([
        "index-build", "--checkpoint", out["train"]["checkpoint"],
        "--data", str(data), "--out", str(index_path)])

    from anatomy_cbir.slices import load_slices
    slices = load_slices(data)
    out["ids"] = [s.id for s in slices]

    out["query_code"], out["query"] = run_cli([
        "query", "--checkpoint", out["train"]["checkpoint"],
        "--index", str(index_path), "--data", str(data),
        "--id", out["ids"][0], "--k", "3"])

    recon_png = base / "recon.png"
    out["recon_code"], out["recon"] = run_cli([
        "export-figure", "--checkpoint", out["train"]["checkpoint"],
        "--data", str(data), "--kind", "reconstruction",
        "--id", ",".join(out["ids"][:2]), "--out", str(recon_png)])

    query_png = base / "query.png"
    out["qfig_code"], out["qfig"] = run_cli([
        "export-figure", "--checkpoint", out["train"]["checkpoint"],
        "--index", str(index_path), "--data", str(data), "--kind", "query",
        "--id", out["ids"][1], "--k", "3", "--out", str(query_png)])

    out.update(base=base, data=data, report_path=report_path,
               index_path=index_path, recon_png=recon_png,
               query_png=query_png)
    return out


class TestUsageExitCodes:
    def test_no_subcommand(self, capsys):
        assert main([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_missing_required_flag(self, capsys):
        assert main(["phantom-gen", "--count", "3"]) == 2
        assert "--out" in capsys.readouterr().err

    def test_bad_choice_value(self, capsys):
        assert main(["query", "--checkpoint", "c", "--index", "i",
                     "--data", "d", "--metric", "euclidean"]) == 2
        capsys.readouterr()

    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert capsys.readouterr().out.strip() == __version__


class TestRuntimeExitCodes:
    def test_missing_checkpoint(self, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "nope.zip"),
                     "--data", str(tmp_path)])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_volume(self, tmp_path, capsys):
        code = main(["ingest", "--volume", str(tmp_path / "v.nii"),
                     "--out", str(tmp_path / "out")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_query_unknown_id(self, pipeline, capsys):
        code = main(["query", "--checkpoint", pipeline["train"]["checkpoint"],
                     "--index", str(pipeline["index_path"]),
                     "--data", str(pipeline["data"]), "--id", "NOPE"])
        assert code == 1
        assert "unknown slice id" in capsys.readouterr().err

    def test_query_without_any_id(self, pipeline, capsys):
        code = main(["query", "--checkpoint", pipeline["train"]["checkpoint"],
                     "--index", str(pipeline["index_path"]),
                     "--data", str(pipeline["data"])])
        assert code == 1
        assert "--normal-id" in capsys.readouterr().err


class TestPipelineArtifacts:
    def test_phantom_gen(self, pipeline):
        assert pipeline["gen_code"] == 0
        gen = pipeline["gen"]
        assert gen["written"] == 10
        assert gen["abnormal"] + gen["normal"] == 10
        assert Path(gen["dir"]) == pipeline["data"]
        assert len(pipeline["ids"]) == 10

    def test_train(self, pipeline):
        assert pipeline["train_code"] == 0
        tr = pipeline["train"]
        assert tr["epochs"] == 1
        assert tr["diverged"] is False
        assert Path(tr["checkpoint"]).exists()
        assert np.isfinite(tr["final_total"]) and tr["final_total"] > 0

    def test_eval(self, pipeline):
        assert pipeline["eval_code"] == 0
        payload = pipeline["eval"]
        assert payload["n_slices"] == 10
        assert "auc" in payload and "diff_ratio" in payload
        assert "per_slice" not in payload  # only with --per-slice
        on_disk = json.loads(pipeline["report_path"].read_text())
        assert on_disk == payload

    def test_index_build(self, pipeline):
        assert pipeline["index_code"] == 0
        assert pipeline["index"]["entries"] == 10
        assert len(pipeline["index"]["codebook_hash"]) == 16
        from anatomy_cbir.retrieval import load_index
        index = load_index(pipeline["index_path"])
        assert sorted(index.ids) == sorted(pipeline["ids"])

    def test_query(self, pipeline):
        assert pipeline["query_code"] == 0
        q = pipeline["query"]
        assert q["metric"] == "concat"
        assert len(q["items"]) == 3
        assert all(it["slice_id"] in pipeline["ids"] for it in q["items"])
        dists = [it["distance"] for it in q["items"]]
        assert dists == sorted(dists)
        assert dists[0] == 0.0  # the query's own entry is in the archive

    @pytest.mark.parametrize("key", ["recon_png", "query_png"])
    def test_figures_are_real_images(self, pipeline, key):
        assert pipeline[{"recon_png": "recon_code",
                         "query_png": "qfig_code"}[key]] == 0
        path = pipeline[key]
        assert path.exists() and path.stat().st_size > 1000
        with Image.open(path) as img:
            assert img.width > 100 and img.height > 100


class TestIngestRoundTrip:
    def test_raw_volume_to_archive(self, tmp_path):
        rng = np.random.default_rng(4)
        vol = rng.uniform(0.1, 1.0, size=(3, 16, 16)).astype(np.float32)
        raw = tmp_path / "case.raw"
        vol.tofile(raw)
        raw.with_suffix(".json").write_text(json.dumps(
            {"dims": [3, 16, 16], "dtype": "float32"}))
        out_dir = tmp_path / "archive"
        code, report = run_cli(["ingest", "--volume", str(raw),
                                "--format", "raw", "--out", str(out_dir)])
        assert code == 0
        assert report["written"] == 3
        from anatomy_cbir.slices import load_slices
        loaded = load_slices(out_dir)
        assert [s.id for s in loaded] == ["case_0", "case_1", "case_2"]
        assert not any(s.is_abnormal for s in loaded)


class TestTrainFlags:
    def test_time_budget_stops_after_first_epoch(self, pipeline, tmp_path):
        run_dir = tmp_path / "budget_run"
        code, result = run_cli([
            "train", "--data", str(pipeline["data"]), "--out", str(run_dir),
            "--config", str(pipeline["base"] / "tiny.json"),
            "--epochs", "5", "--batch-size", "4", "--lr", "1e-4",
            "--image-size", "64", "--seed", "5", "--no-augment",
            "--time-budget-min", "1e-9"])
        assert code == 0
        assert result["epochs"] == 1
        assert result["diverged"] is False


class TestConsoleScript:
    def test_installed_entry_point(self):
        proc = subprocess.run(["anatomy-cbir", "--version"],
                              capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0
        assert proc.stdout.strip() == __version__
