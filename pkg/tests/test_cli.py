import hashlib
import json
import os

from mftune.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_config(tmp_path, obj, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj), encoding="utf-8")
    return str(p)


def synth_data(counts=(12, 10), kinds=("copy", "add2digit")):
    return {"synth": {"kinds": list(kinds), "counts": list(counts), "seed": 3}, "val_fraction": 0.25, "split_seed": 1}


TINY = {
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "seq_len": 64},
    "train": {"mode": "mft", "loss": "token_balanced", "tokenization": "pack",
              "seq_len": 64, "micro_batch": 2, "global_batch": 4, "max_epochs": 2, "seed": 0},
    "data": synth_data(),
}


def test_missing_config_is_schema_error(capsys):
    code, _out, err = run_cli(capsys, "train")
    assert code == 2
    assert json.loads(err)["kind"] == "schema"


def test_unknown_keys_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, {**TINY, "typo_key": 1})
    code, _out, err = run_cli(capsys, "train", "--config", cfg, "--out-dir", str(tmp_path / "run"))
    assert code == 2
    assert "typo_key" in json.loads(err)["error"]


def test_bad_loss_kind_rejected(tmp_path, capsys):
    bad = {**TINY, "train": {**TINY["train"], "loss": "nope"}}
    cfg = write_config(tmp_path, bad)
    code, _, err = run_cli(capsys, "train", "--config", cfg)
    assert code == 2


def test_missing_file_is_runtime_error(tmp_path, capsys):
    cfg = write_config(tmp_path, {**TINY, "data": {"jsonl": str(tmp_path / "nope.jsonl")}})
    code, _, err = run_cli(capsys, "train", "--config", cfg)
    assert code == 1
    assert "error" in json.loads(err)


def test_gradcheck_prints_per_op_lines(capsys):
    code, out, _ = run_cli(capsys, "gradcheck")
    assert code == 0
    lines = [l for l in out.strip().splitlines() if "max_rel_err" in l]
    assert len(lines) >= 25
    assert all("PASS" in l for l in lines)
    assert any(l.startswith("matmul") for l in lines)
    assert any(l.startswith("loss_token_balanced") for l in lines)


def test_pack_stats_json_and_csv(tmp_path, capsys):
    cfg = write_config(tmp_path, {"data": synth_data(), "pack": {"mode": "pack", "seq_len": 64, "micro_batch": 2}})
    out_dir = str(tmp_path / "out")
    code, out, _ = run_cli(capsys, "pack-stats", "--config", cfg, "--out-dir", out_dir)
    assert code == 0
    report = json.loads(out)
    assert set(report) == {"mode", "seq_len", "windows", "total_slots", "padding_slots", "ratio"}
    assert report["mode"] == "pack"
    assert 0 <= report["ratio"] <= 1
    csv_path = os.path.join(out_dir, "window_fill.csv")
    assert os.path.exists(csv_path)
    with open(csv_path) as f:
        header = f.readline().strip().split(",")
    assert header == ["window", "width", "used", "segments"]


def test_datagen_mock_writes_jsonl(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        {"datagen": {
            "seeds": ["trees", "hashing"],
            "templates": ["exercises about {seed}"],
            "provider": {"type": "mock", "seed": 4, "items_per_list": 2},
            "k_per_prompt": 2,
            "task_id": 0,
            "task_name": "exercises",
            "output": str(tmp_path / "gen.jsonl"),
        }},
    )
    code, out, _ = run_cli(capsys, "datagen", "--config", cfg, "--out-dir", str(tmp_path))
    assert code == 0
    info = json.loads(out)
    assert info["n_samples"] == 4
    from mftune.dataset import load_jsonl

    manifest = load_jsonl(str(tmp_path / "gen.jsonl"))
    assert len(manifest.samples) == 4


def test_train_then_eval_roundtrip(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY)
    run_dir = str(tmp_path / "run")
    code, out, _ = run_cli(capsys, "train", "--config", cfg, "--out-dir", run_dir)
    assert code == 0
    summary = json.loads(out)
    assert summary["epochs"] == 2
    ckpt = os.path.join(run_dir, "checkpoint_chosen.bin")
    assert os.path.exists(ckpt)

    eval_cfg = write_config(
        tmp_path,
        {"eval": {"checkpoint": ckpt, "task": 0, "max_samples": 5}, "data": TINY["data"]},
        name="eval.json",
    )
    code, out, _ = run_cli(capsys, "eval", "--config", eval_cfg)
    assert code == 0
    result = json.loads(out)
    assert set(result) == {"task", "exact_match"}
    assert 0.0 <= result["exact_match"] <= 1.0


def _hash_file(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_compare_is_deterministic_and_reports(tmp_path, capsys):
    exp = {
        **TINY,
        "experiment": {"seeds": [0], "eval_max_samples": 4,
                       "held_out": {"kind": "held_out_dedup", "count": 4, "seed": 9}},
    }
    cfg = write_config(tmp_path, exp)
    out1 = str(tmp_path / "cmp1")
    out2 = str(tmp_path / "cmp2")
    code, table_out, _ = run_cli(capsys, "compare", "--config", cfg, "--out-dir", out1)
    assert code == 0
    table = json.loads(table_out)
    assert set(table["arms"]) == {"sft_single[copy]", "sft_single[add2digit]", "sft_mixed", "mft"}
    assert table["smallest_task"] == 1
    assert table["arms"]["mft"]["median_held_out_accuracy"] is not None
    assert os.path.exists(os.path.join(out1, "report.md"))

    code, _, _ = run_cli(capsys, "compare", "--config", cfg, "--out-dir", out2)
    assert code == 0
    for arm_dir in ("mft_seed0", "sft_mixed_seed0"):
        assert _hash_file(os.path.join(out1, arm_dir, "epochs.csv")) == _hash_file(
            os.path.join(out2, arm_dir, "epochs.csv")
        )
    assert _hash_file(os.path.join(out1, "report.md")) == _hash_file(os.path.join(out2, "report.md"))


def test_compare_seeds_flag_expands(tmp_path, capsys):
    exp = {**TINY, "experiment": {"eval_max_samples": 2}}
    exp["data"] = synth_data(counts=(8, 8))
    exp["train"] = {**TINY["train"], "max_epochs": 1}
    cfg = write_config(tmp_path, exp)
    code, out, _ = run_cli(capsys, "compare", "--config", cfg, "--out-dir", str(tmp_path / "c"), "--seeds", "2")
    assert code == 0
    assert json.loads(out)["seeds"] == [0, 1]
