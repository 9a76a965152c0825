import json
import subprocess
import sys

import numpy as np
import pytest

from cxreg import io
from cxreg.cli import JobConfig, main
from cxreg.grid import warp_image, warp_mask_hard
from cxreg.metrics import MetricsReport, full_report, neg_jacobian_fraction
from cxreg.phantom import phantom_pair
from cxreg.registration import RegistrationConfig, register_multistage

FAST = ["--iters1", "30", "--iters2", "10"]


@pytest.fixture(scope="module")
def pair_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pair")
    assert main(["phantom", "--seed", "1", "--size", "128", "--out", str(out)]) == 0
    return out


def test_phantom_outputs(pair_dir):
    names = {p.name for p in pair_dir.iterdir()}
    for stem in ("moving", "fixed"):
        assert {f"{stem}.png", f"{stem}_ribs.png", f"{stem}_lungs.png", f"{stem}_ribcage.png"} <= names
    assert {"gt_field.dfld", "phantom.json"} <= names
    pair = phantom_pair(1, 128)
    assert np.array_equal(io.read_image(pair_dir / "moving.png"), io.quantize(pair.moving.image))
    assert np.array_equal(io.read_mask(pair_dir / "fixed_ribs.png"), pair.fixed.ribs)
    assert np.array_equal(io.read_field(pair_dir / "gt_field.dfld"), io.quantize_field(pair.gt_field))


def test_register_identity_exits_zero(pair_dir, tmp_path):
    img = str(pair_dir / "moving.png")
    assert main(["register", img, img, "--out", str(tmp_path), *FAST]) == 0
    field = io.read_field(tmp_path / "field.dfld")
    assert neg_jacobian_fraction(field) <= 1e-6
    trace = io.read_report(tmp_path / "trace.json")
    assert trace["stage1_len"] == 31 and len(trace["loss_trace"]) == 42
    assert trace["job"]["registration"]["iters_stage1"] == 30


def test_pipeline_matches_in_process(pair_dir, tmp_path):
    p = lambda name: str(pair_dir / name)
    reg = tmp_path / "reg"
    assert main(["register", p("moving.png"), p("fixed.png"), "--mode", "ribpairs",
                 "--moving-mask", p("moving_ribs.png"), "--fixed-mask", p("fixed_ribs.png"),
                 "--out", str(reg), *FAST]) == 0
    assert main(["metrics", "--fixed", p("fixed.png"), "--field", str(reg / "field.dfld"),
                 "--warped", str(reg / "warped.png"),
                 "--moving-ribs", p("moving_ribs.png"), "--fixed-ribs", p("fixed_ribs.png"),
                 "--moving-lungs", p("moving_lungs.png"), "--fixed-lungs", p("fixed_lungs.png"),
                 "--out", str(tmp_path)]) == 0
    on_disk = MetricsReport.from_dict(io.read_report(tmp_path / "metrics.json"))

    pair = phantom_pair(1, 128)
    m, f = io.quantize(pair.moving.image), io.quantize(pair.fixed.image)
    cfg = RegistrationConfig(mode="ribpairs", iters_stage1=30, iters_stage2=10)
    res = register_multistage(m, f, pair.moving.ribs, pair.fixed.ribs, cfg)
    field = io.quantize_field(res.field_native)
    mv, fx = pair.moving, pair.fixed
    in_proc = full_report(io.quantize(res.warped), f, field,
                          warp_mask_hard(mv.ribs, field), fx.ribs,
                          warp_mask_hard(mv.lungs, field), fx.lungs,
                          provenance=on_disk.provenance)
    assert on_disk == in_proc


def test_outputs_are_byte_identical(pair_dir, tmp_path):
    p = lambda name: str(pair_dir / name)
    out = tmp_path / "run"
    names = ("field.dfld", "warped.png", "trace.json", "diff.png", "diff.json", "diff_signed.png")
    runs = []
    for _ in range(2):
        assert main(["register", p("moving.png"), p("fixed.png"), "--out", str(out), *FAST]) == 0
        assert main(["diff", "--fixed", p("fixed.png"), "--warped", str(out / "warped.png"),
                     "--ribcage", p("fixed_ribcage.png"), "--signed16", "--out", str(out)]) == 0
        runs.append({n: (out / n).read_bytes() for n in names})
        for n in names:
            (out / n).unlink()
    assert runs[0] == runs[1]


def test_diff_from_moving_and_field(pair_dir, tmp_path):
    p = lambda name: str(pair_dir / name)
    assert main(["diff", "--fixed", p("fixed.png"), "--moving", p("moving.png"),
                 "--field", p("gt_field.dfld"), "--ribcage", p("fixed_ribcage.png"),
                 "--margin", "10", "--out", str(tmp_path)]) == 0
    meta = io.read_report(tmp_path / "diff.json")
    assert meta["margin"] == 10 and meta["vmax"] > 0
    assert main(["diff", "--fixed", p("fixed.png"), "--ribcage", p("fixed_ribcage.png"),
                 "--out", str(tmp_path)]) == 2


def test_qc_batch(tmp_path):
    masks = tmp_path / "masks"
    masks.mkdir()
    good = phantom_pair(0, 256).moving.ribs
    bad = good.copy()
    bad[200:216, 110:130] = 4  # a third sizable (320 px) component for pair 4
    io.write_mask(masks / "good.png", good)
    io.write_mask(masks / "bad.png", bad)
    out = tmp_path / "qc"
    assert main(["qc", str(masks), "--workers", "2", "--out", str(out)]) == 0
    triage = io.read_report(out / "triage.json")
    assert triage["n_files"] == 2 and triage["n_failing"] == 1
    (entry,) = triage["failing"]
    assert entry["file"].endswith("bad.png") and entry["first_failing_label"] == 4
    assert entry["failed_rules"] == ["q1"]
    assert io.read_report(out / "good.qc.json")["passed"]


def test_stats_command(tmp_path):
    rng = np.random.default_rng(0)
    base = rng.uniform(0.5, 0.7, 12)
    for name, shift in (("a", 0.1), ("b", 0.0)):
        reps = [MetricsReport(0.0, 1.0, 0.0, dcr=v).to_dict() for v in base + shift + rng.uniform(0, 0.01, 12)]
        io.write_report(tmp_path / f"{name}.json", reps)
    assert main(["stats", f"a={tmp_path / 'a.json'}", f"b={tmp_path / 'b.json'}",
                 "--out", str(tmp_path)]) == 0
    summary = io.read_report(tmp_path / "stats.json")
    assert summary["pairs"][0]["significant"] and summary["n_subjects"] == 12
    assert main(["stats", "nonsense", "--out", str(tmp_path)]) == 2


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CXREG_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["phantom", "--size", "64", "--deformation", "translation"]) == 0
    assert (tmp_path / "env" / "gt_field.dfld").exists()


def test_job_config_text_round_trip():
    job = JobConfig("register", {"moving": "m.png"}, "out",
                    registration=RegistrationConfig(mode="lung").to_dict(), options={"bits": 16})
    assert JobConfig.from_text(job.to_text()) == job


def test_error_exit_codes(tmp_path):
    cmd = [sys.executable, "-m", "cxreg.cli", "register", str(tmp_path / "missing.png"),
           str(tmp_path / "missing.png"), "--out", str(tmp_path)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.startswith("cxreg:error:2:FileNotFoundError:")
    bad = tmp_path / "bad.dfld"
    bad.write_bytes(b"nope")
    assert main(["metrics", "--fixed", str(bad), "--field", str(bad), "--out", str(tmp_path)]) == 2


def test_numeric_failure_exit_code(monkeypatch, tmp_path):
    import cxreg.cli as cli

    def boom(*a, **k):
        raise FloatingPointError("loss is not finite")

    monkeypatch.setattr(cli, "register_multistage", boom)
    img = tmp_path / "i.png"
    io.write_image(img, np.random.default_rng(0).random((16, 16)))
    assert main(["register", str(img), str(img), "--out", str(tmp_path)]) == 3
