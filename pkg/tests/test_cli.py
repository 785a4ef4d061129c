import json
import re
import shutil

import pytest
import yaml

from medk2n.cli import main

TINY = {
    "model": {"image_size": 16, "dim": 8, "mem_slots": 4, "cmim_dim": 8},
    "optim": {"epochs": 2, "batch_size": 4, "accumulation": 1},
    "data": {"val_fraction": 0.5, "augment": False},
    "CURRICULUM": {"ratios": [0.5, 0.0, 0.0, 0.5]},
}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset and two tiny trained runs shared by the flow tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["gen-data", "--seed", "1", "--cases", "8", "--size", "16", "--out", str(root / "data")]) == 0
    for abl in ("B5", "B0"):
        assert main(["train", "--config", str(cfg), "--ablation", abl, "--data", str(root / "data" / "manifest.json"),
                     "--out", str(root / f"run_{abl}"), "--quiet"]) == 0
    return root


def test_gen_data_is_reproducible(tmp_path, capsys):
    hashes = []
    for name in ("a", "b"):
        code, out, _ = run(["gen-data", "--seed", 5, "--cases", 3, "--size", 16, "--out", tmp_path / name], capsys)
        assert code == 0
        hashes.append(re.search(r"content hash (\w+)", out).group(1))
    assert hashes[0] == hashes[1]
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_gen_data_rejects_zero_cases(tmp_path, capsys):
    code, _, err = run(["gen-data", "--cases", 0, "--out", tmp_path / "x"], capsys)
    assert code != 0 and "--cases" in err
    assert not (tmp_path / "x").exists()


def test_train_writes_run_directory(workspace):
    run_dir = workspace / "run_B5"
    info = json.loads((run_dir / "run.json").read_text())
    assert info["ablation"] == "B5" and info["n_train"] == 4 and info["n_val"] == 4
    assert info["stage_boundaries"] == [1, 1, 1, 2]
    snap = yaml.safe_load((run_dir / "config.yaml").read_text())
    assert snap["curriculum"]["ratios"] == [0.5, 0.0, 0.0, 0.5]
    log = [json.loads(l) for l in (run_dir / "train_log.jsonl").read_text().splitlines()]
    assert "identity_pretrain" in log[0]
    assert {l["stage"] for l in log[1:]} == {"easy", "expert"}
    assert (run_dir / "checkpoints" / "final.mk2n").exists()


def test_curriculum_ratio_flag_overrides_config(workspace, tmp_path, capsys):
    code, _, _ = run(["train", "--config", workspace / "tiny.yaml", "--curriculum-ratios", "0.5,0.5,0,0",
                      "--data", workspace / "data" / "manifest.json", "--out", tmp_path / "r", "--quiet"], capsys)
    assert code == 0
    info = json.loads((tmp_path / "r" / "run.json").read_text())
    assert info["stage_boundaries"] == [1, 2, 2, 2]


def test_bad_ratios_are_a_usage_error(workspace, tmp_path, capsys):
    code, _, err = run(["train", "--config", workspace / "tiny.yaml", "--curriculum-ratios", "0.5,0.5,0.5,0",
                        "--out", tmp_path / "r"], capsys)
    assert code == 2 and "ratios" in err


def test_eval_and_report(workspace, tmp_path, capsys):
    code, out, _ = run(["eval", "--checkpoint", workspace / "run_B5", "--data", workspace / "data" / "manifest.json",
                        "--mask", "1000", "--mask", "1110", "--targets", "T2f", "--out", tmp_path / "ev"], capsys)
    assert code == 0
    assert "PSNR" in out.splitlines()[0]
    rows = (tmp_path / "ev" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 8
    code, out2, _ = run(["report", tmp_path / "ev", "--out", tmp_path / "rep"], capsys)
    assert code == 0 and out2 == out
    assert (tmp_path / "rep" / "table.txt").read_text() == (tmp_path / "ev" / "table.txt").read_text()


def test_eval_compare_emits_wilcoxon(workspace, tmp_path, capsys):
    code, out, _ = run(["eval", "--checkpoint", workspace / "run_B5", "--compare", workspace / "run_B0",
                        "--data", workspace / "data" / "manifest.json", "--mask", "0110", "--targets", "T2f",
                        "--out", tmp_path / "cmp"], capsys)
    assert code == 0
    assert "p(PSNR)" in out
    doc = json.loads((tmp_path / "cmp" / "summary.json").read_text())
    assert doc["comparison"][0]["psnr_p"] is not None
    assert (tmp_path / "cmp" / "metrics_compare.csv").exists()


def test_eval_rejects_unknown_target(workspace, tmp_path, capsys):
    code, _, err = run(["eval", "--checkpoint", workspace / "run_B5", "--data", workspace / "data" / "manifest.json",
                        "--targets", "PD", "--out", tmp_path / "ev"], capsys)
    assert code == 2 and "PD" in err


def test_missing_checkpoint_is_io_error(tmp_path, capsys):
    code, _, _ = run(["eval", "--checkpoint", tmp_path / "nope.mk2n", "--out", tmp_path / "ev"], capsys)
    assert code == 3


def _synth(workspace, out, capsys, extra=()):
    d = workspace / "data" / "images"
    return run(["synth", "--checkpoint", workspace / "run_B5", "--input", f"T1n={d / 'case0000_T1n.png'}",
                "--input", f"T1c={d / 'case0000_T1c.png'}", "--input", f"T2w={d / 'case0000_T2w.png'}",
                "--targets", "T2f", "--out", out, *extra], capsys)


def test_synth_three_inputs_two_decisions(workspace, tmp_path, capsys):
    code, _, _ = _synth(workspace, tmp_path / "s", capsys, ["--sheet"])
    assert code == 0
    side = json.loads((tmp_path / "s" / "synth.json").read_text())
    assert side["key_frame"] == "T1n"
    fusion = side["targets"]["T2f"]["fusion"]
    assert [f["source"] for f in fusion] == ["T1c", "T2w"]
    assert len(side["targets"]["T2f"]["quality_scores"]) == 3
    assert (tmp_path / "s" / "T2f.png").exists() and (tmp_path / "s" / "sheet.png").exists()


def test_synth_rerun_is_byte_identical(workspace, tmp_path, capsys):
    for name in ("a", "b"):
        assert _synth(workspace, tmp_path / name, capsys)[0] == 0
    for f in ("T2f.png", "synth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_target_outside_schema(workspace, tmp_path, capsys):
    d = workspace / "data" / "images"
    code, _, err = run(["synth", "--checkpoint", workspace / "run_B5", "--input", f"T1n={d / 'case0000_T1n.png'}",
                        "--targets", "PD", "--out", tmp_path / "s"], capsys)
    assert code == 2 and "PD" in err
    assert not (tmp_path / "s").exists()


def test_synth_target_also_input(workspace, tmp_path, capsys):
    d = workspace / "data" / "images"
    code, _, err = run(["synth", "--checkpoint", workspace / "run_B5", "--input", f"T1n={d / 'case0000_T1n.png'}",
                        "--targets", "T1n", "--out", tmp_path / "s"], capsys)
    assert code == 2
