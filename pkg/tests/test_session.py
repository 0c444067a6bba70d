import json
import shutil

import pytest
import torch

from tcvedit.align import AlignTransform
from tcvedit.cli import main
from tcvedit.imaging import load_frames, save_frames
from tcvedit.session import ConfigError, Session, SessionConfig, StageError, load_frame_stack, run_session

from helpers import tiny_config


def test_config_round_trip(tmp_path):
    cfg = SessionConfig.from_dict(tiny_config(tmp_path))
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert SessionConfig.load(path) == cfg


@pytest.mark.parametrize("change", [{"colour": 1}, {"schema_version": 2}, {"phase2": {"lambda_r": -1.0}},
                                    {"phase1": {"epochz": 3}}, {"edit": {"kind": "sideways"}},
                                    {"edit": {"direction": "telepathy"}}, {"generator": {"resolution": 12}},
                                    {"frames": None, "scene": None}])
def test_invalid_configs_rejected(tmp_path, change):
    with pytest.raises(ConfigError):
        SessionConfig.from_dict(tiny_config(tmp_path, **change))


def test_zero_epochs_pass_through(tmp_path):
    cfg = SessionConfig.from_dict(tiny_config(tmp_path, phase1={"epochs": 0}, phase2={"epochs": 0}))
    rep = run_session(cfg)
    s = Session(cfg)
    assert torch.equal(load_frame_stack(s.stage_dir("unalign")), load_frame_stack(s.stage_dir("edit")))
    assert rep.similarity_to_direct == 0.0
    assert rep.mean_warping_error == rep.extra["direct_warping_error"]


def test_rerun_is_bit_identical(tmp_path):
    cfg = SessionConfig.from_dict(tiny_config(tmp_path / "run"))
    run_session(cfg)
    first = (tmp_path / "run/eval/report.json").read_bytes()
    frames = (tmp_path / "run/unalign/frames.tcvi").read_bytes()
    shutil.rmtree(tmp_path / "run")
    run_session(cfg)
    assert (tmp_path / "run/eval/report.json").read_bytes() == first
    assert (tmp_path / "run/unalign/frames.tcvi").read_bytes() == frames


def test_resume_regenerates_downstream(tmp_path):
    cfg = SessionConfig.from_dict(tiny_config(tmp_path))
    s = Session(cfg)
    s.run()
    kept = (tmp_path / "invert/stage.json").read_text()
    phase2 = (tmp_path / "phase2/frames.tcvi").read_bytes()
    report = (tmp_path / "eval/report.json").read_bytes()
    s.invalidate("phase2")
    assert not s.done("eval")
    s.run()
    assert (tmp_path / "invert/stage.json").read_text() == kept
    assert (tmp_path / "phase2/frames.tcvi").read_bytes() == phase2
    assert (tmp_path / "eval/report.json").read_bytes() == report


def test_config_change_reruns_only_affected_stages(tmp_path):
    base = tiny_config(tmp_path)
    Session(SessionConfig.from_dict(base)).run()
    kept = (tmp_path / "phase1/stage.json").read_text()
    s = Session(SessionConfig.from_dict({**base, "phase2": {"epochs": 0}}))
    assert s.done("phase1") and not s.done("phase2")
    rep = s.run()
    assert (tmp_path / "phase1/stage.json").read_text() == kept
    assert torch.equal(load_frame_stack(tmp_path / "phase2"), load_frame_stack(tmp_path / "phase1"))
    assert rep.config["phase2"] == {"epochs": 0}


def test_report_echoes_config(tmp_path):
    cfg = SessionConfig.from_dict(tiny_config(tmp_path))
    rep = run_session(cfg)
    assert SessionConfig.from_dict(rep.config) == cfg
    assert rep.seed == cfg.seed
    assert len(rep.inversion_psnr) == 4
    for stage in ("invert", "phase1", "eval"):
        assert json.loads((tmp_path / stage / "stage.json").read_text())["wall_time_s"] >= 0


def test_stage_error_names_stage(tmp_path):
    frames = tmp_path / "frames"
    save_frames(frames, torch.rand(3, 3, 12, 12))
    cfg = SessionConfig.from_dict(tiny_config(tmp_path / "run", frames=str(frames)))
    with pytest.raises(StageError, match="align"):
        run_session(cfg)


def test_alignment_round_trip(tmp_path):
    # 20x20 originals, aligned by shifting a 16x16 window
    original = torch.rand(4, 3, 20, 20, generator=torch.Generator().manual_seed(0))
    save_frames(tmp_path / "frames", original)
    m = torch.tensor([[1.0, 0.0, -2.0], [0.0, 1.0, -2.0]], dtype=torch.float64).expand(4, 2, 3)
    AlignTransform(m, (16, 16)).save(tmp_path / "align.json")
    cfg = SessionConfig.from_dict(tiny_config(tmp_path / "run", frames=str(tmp_path / "frames"),
                                              align_transform=str(tmp_path / "align.json"),
                                              phase1={"epochs": 0}, phase2={"epochs": 0}))
    run_session(cfg)
    original = load_frames(tmp_path / "frames")
    aligned = load_frame_stack(tmp_path / "run/align")
    assert torch.allclose(aligned, original[:, :, 2:18, 2:18], atol=1e-6)
    out = load_frame_stack(tmp_path / "run/unalign")
    assert out.shape == original.shape
    # outside the aligned square the original is kept
    assert torch.equal(out[:, :, :, :2], original[:, :, :, :2])


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 7}))
    assert main(["run", "--config", str(bad)]) == 2

    good = tmp_path / "good.json"
    good.write_text(json.dumps(tiny_config(tmp_path / "ok")))
    assert main(["run", "--config", str(good), "--log-level", "WARNING"]) == 0
    assert main(["slice", "--config", str(good), "--y", "8", "--output", str(tmp_path / "s.png")]) == 0
    assert (tmp_path / "s.png").exists()
    assert main(["slice", "--config", str(good), "--y", "99"]) == 3

    strict = tmp_path / "strict.json"
    strict.write_text(json.dumps(tiny_config(tmp_path / "strict", inversion={"warm_steps": 1, "latent_steps": 1,
                                                                             "finetune_steps": 0,
                                                                             "psnr_threshold": 99.0})))
    assert main(["invert", "--config", str(strict)]) == 4
    assert (tmp_path / "strict/invert/psnr.csv").read_text().startswith("frame,psnr_db")

    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps(tiny_config(tmp_path / "m", frames=str(tmp_path / "nowhere"))))
    assert main(["run", "--config", str(missing)]) == 3


def test_cli_overrides(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps(tiny_config(tmp_path / "a")))
    assert main(["optimize", "--config", str(good), "--phase1-only", "--seed", "5", "--out", str(tmp_path / "b")]) == 0
    cfg = SessionConfig.load(tmp_path / "b/config.json")
    assert cfg.seed == 5 and cfg.phase2["epochs"] == 0
    assert torch.equal(load_frame_stack(tmp_path / "b/phase2"), load_frame_stack(tmp_path / "b/phase1"))
    assert main(["optimize", "--config", str(good), "--mode", "out", "--phase2-only",
                 "--out", str(tmp_path / "c")]) == 0
    cfg = SessionConfig.load(tmp_path / "c/config.json")
    assert cfg.mode == "out_of_domain" and cfg.phase1["epochs"] == 0
