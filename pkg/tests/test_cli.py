import json

import numpy as np
import pytest

from vqode4d import io
from vqode4d.cli import main
from vqode4d.pipeline import output_times

TINY = {
    "phantom": {"n_subjects": 20, "volume_dim": 16},
    "stage1": {"input_dim": 16, "base_channels": 4, "M": 16, "embed_dim": 4, "steps": 6, "max_volumes": 4},
    "stage2": {"hidden_channels": 4, "epochs": 2},
}


def call(argv):
    return main([str(a) for a in argv])


def run(capsys, *argv):
    code = call(argv)
    captured = capsys.readouterr()
    return code, captured.out.strip(), captured.err.strip()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert call(["phantom", "--config", cfg, "--out", root / "data"]) == 0
    manifest = root / "data" / "manifest.json"
    assert call(["train-stage1", "--config", cfg, "--manifest", manifest, "--out", root / "s1"]) == 0
    assert call(["train-stage2", "--config", cfg, "--manifest", manifest, "--checkpoint", root / "s1" / "stage1.fft",
                 "--out", root / "s2"]) == 0
    return {"root": root, "cfg": cfg, "manifest": manifest, "ckpt1": root / "s1" / "stage1.fft",
            "ckpt2": root / "s2" / "stage2.fft"}


def first_subject(work):
    m = io.read_manifest(work["manifest"])
    return m.subjects[0]


def test_phantom_writes_manifest_and_cohort(work):
    m = io.read_manifest(work["manifest"])
    assert len(m.subjects) == 20
    vol, mask = m.load_scan(m.subjects[0].scans[0])
    assert vol.shape == (16, 16, 16) and 0 < mask.mean() < 1
    rows = io.read_csv(work["root"] / "data" / "cohort.csv")
    assert list(rows[0]) == ["subject_id", "duration", "event", "age", "sex", "smoking"]


def test_stage1_log_columns(work):
    rows = io.read_csv(work["root"] / "s1" / "stage1_log.csv")
    assert len(rows) == 6 and list(rows[0])[:2] == ["step", "l_rec"]


def test_stage2_checkpoint_carries_stage1_bit_exactly(work):
    a = io.load_tensors(work["ckpt1"])
    b = io.load_tensors(work["ckpt2"])
    for k, v in a.items():
        assert b[k].tobytes() == v.tobytes()
    assert any(k.startswith("temporal.") for k in b)
    summary = json.loads((work["root"] / "s2" / "stage2_summary.json").read_text())
    scans = sum(len(s.scans) for s in io.read_manifest(work["manifest"]).subjects)
    assert summary["scans_encoded"] == scans


def test_checkpoint_round_trip_is_bit_exact(work, tmp_path):
    a = io.load_tensors(work["ckpt2"])
    io.save_tensors(tmp_path / "copy.fft", a)
    assert (tmp_path / "copy.fft").read_bytes() == work["ckpt2"].read_bytes()


def test_generate_grid_and_self_evaluation(work, capsys):
    s = first_subject(work)
    t0, t1 = s.scans[0].time_years, s.scans[1].time_years
    out = work["root"] / "gen"
    code, _, err = run(capsys, "generate", "--config", work["cfg"], "--manifest", work["manifest"], "--checkpoint",
                       work["ckpt2"], "--subject", s.id, "--times", t0, t1, "--interval", 0.5, "--duration", 5.5,
                       "--out", out)
    assert code == 0, err
    meta = json.loads((out / "generation.json").read_text())
    assert len(meta["outputs"]) == 12

    # evaluating the truth against itself: a "generated" dir that holds the real scans
    mirror = work["root"] / "mirror"
    mirror.mkdir()
    m = io.read_manifest(work["manifest"])
    names = []
    for sc in s.scans:
        vol, _ = m.load_scan(sc)
        name = f"pred_t{sc.time_years:.2f}.vol"
        io.write_volume(mirror / name, vol)
        names.append(name)
    (mirror / "generation.json").write_text(json.dumps({"subject_id": s.id, "input_times": [t0, t1],
                                                        "grid": [], "outputs": names}))
    code, _, err = run(capsys, "evaluate", "--config", work["cfg"], "--manifest", work["manifest"],
                       "--generated", mirror, "--out", work["root"] / "eval")
    assert code == 0, err
    rows = io.read_csv(work["root"] / "eval" / "metrics.csv")
    assert all(float(r["mse"]) == 0.0 and float(r["ssim"]) == pytest.approx(1.0, abs=1e-6) for r in rows)


def test_output_time_counts():
    assert len(output_times(0.0, 2.0, 0.5, 5.5)) == 12
    assert len(output_times(0.0, 1.0, 1.0, 1.0)) == 2
    with pytest.raises(ValueError):
        output_times(0.0, 2.0, 0.5, 1.5)


def test_generate_duration_before_second_scan_fails(work, capsys):
    s = first_subject(work)
    code, out, err = run(capsys, "generate", "--config", work["cfg"], "--manifest", work["manifest"],
                         "--checkpoint", work["ckpt2"], "--subject", s.id, "--times", s.scans[0].time_years,
                         s.scans[2].time_years, "--interval", 0.5, "--duration", 1.0, "--out",
                         work["root"] / "bad")
    assert code == 1 and out == ""
    assert err.startswith("vqode4d: error: ValueError: duration") and "\n" not in err


def test_generate_needs_stage2_tensors(work, capsys):
    s = first_subject(work)
    code, _, err = run(capsys, "generate", "--config", work["cfg"], "--manifest", work["manifest"], "--checkpoint",
                       work["ckpt1"], "--subject", s.id, "--times", 0, s.scans[1].time_years, "--out",
                       work["root"] / "bad")
    assert code == 1 and "CheckpointError" in err


def test_unknown_checkpoint_tensor_is_named(work, capsys, tmp_path):
    tensors = io.load_tensors(work["ckpt1"])
    tensors["mystery.weight"] = np.zeros(2, np.float32)
    io.save_tensors(tmp_path / "odd.fft", tensors)
    code, _, err = run(capsys, "visualize-codes", "--config", work["cfg"], "--checkpoint", tmp_path / "odd.fft",
                       "--out", tmp_path)
    assert code == 1 and "mystery.weight" in err


def test_visualize_codes(work, capsys, tmp_path):
    code, out, _ = run(capsys, "visualize-codes", "--config", work["cfg"], "--checkpoint", work["ckpt1"],
                       "--out", tmp_path)
    assert code == 0 and out.endswith("codes.pgm")
    sheet = io.read_pgm(tmp_path / "codes.pgm")
    assert sheet.shape == (2 * 17 - 1, 8 * 17 - 1)
    assert len(io.read_csv(tmp_path / "codebook.csv")) == 16


def test_survival_outputs(work, capsys, tmp_path):
    code, _, err = run(capsys, "survival", "--config", work["cfg"], "--manifest", work["manifest"],
                       "--checkpoint", work["ckpt2"], "--out", tmp_path)
    assert code == 0, err
    rows = io.read_csv(tmp_path / "survival_cindex.csv")
    assert [r["metric"] for r in rows][0] == "c_index_real"
    assert all(0 <= float(r["value"]) <= 1 for r in rows)


def test_survival_without_events_fails(work, capsys, tmp_path):
    doc = json.loads(work["manifest"].read_text())
    for s in doc["subjects"]:
        s["survival"]["event"] = False
    bad = work["root"] / "data" / "no_events.json"
    bad.write_text(json.dumps(doc))
    code, _, err = run(capsys, "survival", "--config", work["cfg"], "--manifest", bad, "--checkpoint", work["ckpt2"],
                       "--out", tmp_path)
    assert code == 1 and "no observed events" in err


def test_reruns_are_byte_identical(work, tmp_path):
    for d in ("a", "b"):
        assert call(["phantom", "--config", work["cfg"], "--out", tmp_path / d / "data"]) == 0
        assert call(["train-stage1", "--config", work["cfg"], "--manifest", tmp_path / d / "data" / "manifest.json",
                     "--out", tmp_path / d]) == 0
    for name in ("data/cohort.csv", "stage1_log.csv", "stage1.fft"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_the_cohort(work, tmp_path):
    assert call(["phantom", "--config", work["cfg"], "--seed", "3", "--out", tmp_path]) == 0
    assert (tmp_path / "cohort.csv").read_bytes() != (work["root"] / "data" / "cohort.csv").read_bytes()


@pytest.mark.parametrize("argv,kind", [
    (["frobnicate"], "UsageError"),
    (["train-stage1"], "UsageError"),
    (["phantom", "--threads", "0"], "ConfigError"),
])
def test_usage_and_config_errors(argv, kind, capsys, tmp_path):
    code, _, err = run(capsys, *argv, "--out", tmp_path) if argv[0] == "phantom" else run(capsys, *argv)
    assert code in (1, 2)
    assert err.startswith(f"vqode4d: error: {kind}: ") and "\n" not in err


def test_bad_config_key_exit_code(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"stage1": {"M": "many"}}))
    code, _, err = run(capsys, "phantom", "--config", tmp_path / "c.json", "--out", tmp_path)
    assert code == 1 and "stage1.M" in err


def test_truncated_checkpoint_reports_offset(work, capsys, tmp_path):
    raw = work["ckpt1"].read_bytes()
    (tmp_path / "cut.fft").write_bytes(raw[: len(raw) // 2])
    code, _, err = run(capsys, "visualize-codes", "--config", work["cfg"], "--checkpoint", tmp_path / "cut.fft",
                       "--out", tmp_path)
    assert code == 1 and "FormatError" in err and "at byte" in err
