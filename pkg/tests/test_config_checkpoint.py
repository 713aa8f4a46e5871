import numpy as np
import pytest
import torch

from icedit.checkpoint import (Checkpoint, CheckpointError, decode, encode, load_denoiser, read, save_denoiser)
from icedit.cli import export_image, import_image
from icedit.config import ConfigError, RunConfig, load_config
from icedit.denoiser import Arch, build_model


def test_unknown_keys_and_sections_rejected(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[teacher]\nstepz = 3\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("[teachr]\nsteps = 3\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("[teacher]\nsteps = three\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(profile="huge")


def test_overrides_and_inline_comments(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[edit]\ncfg_schedule = 0, 1, 2, 3  # per step\n[cycle]\nlr = 2e-5\n")
    cfg = load_config(p)
    assert cfg.edit.cfg_schedule == (0.0, 1.0, 2.0, 3.0)
    assert cfg.cycle.lr == 2e-5


def test_schedule_length_validated(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[edit]\ncfg_schedule = 0, 1\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_paper_profile_values():
    cfg = load_config(profile="paper")
    assert cfg.cycle.lr == 1e-6 and cfg.cycle.iterations == 6000 and cfg.cycle.batch == 16
    assert cfg.cycle.lambda_f == 1.5 and cfg.cycle.lambda_rec == 1.0
    assert cfg.edit.cfg_schedule == (0.0, 7.0, 11.0, 19.0)
    assert cfg.edit.w_self == 20000.0 and cfg.edit.w_feat == 0.5
    assert (cfg.edit.r_lower, cfg.edit.r_upper) == (0.0, 1.0)


def test_config_text_round_trip(tmp_path):
    cfg = load_config(profile="paper")
    p = tmp_path / "c.ini"
    p.write_text(cfg.to_text())
    again = load_config(p, profile="toy")
    assert again.to_dict() == cfg.to_dict()


def test_fingerprints_track_dependencies():
    a, b = RunConfig(), RunConfig()
    b.edit.w_self = 1.0
    assert a.fingerprint("icd", 0) == b.fingerprint("icd", 0)
    assert a.config_hash() != b.config_hash()
    b.teacher.lr = 1.0
    assert a.fingerprint("icd", 0) != b.fingerprint("icd", 0)
    assert a.fingerprint("data", 0) == b.fingerprint("data", 0)
    assert a.fingerprint("data", 0) != a.fingerprint("data", 1)
    with pytest.raises(ConfigError):
        a.fingerprint("nope", 0)


def test_checkpoint_bit_exact_round_trip(tmp_path):
    m = build_model(Arch(), "forward", 3, adapter_rank=4)
    path = tmp_path / "m.iccm"
    save_denoiser(m, path, "fp", 42)
    blob = path.read_bytes()
    back = load_denoiser(path, "fp")
    assert back.role == "forward" and back.adapter_rank() == 4
    for (k, v), (k2, v2) in zip(m.state_dict().items(), back.state_dict().items()):
        assert k == k2 and v.numpy().tobytes() == v2.numpy().tobytes()
    save_denoiser(back, tmp_path / "m2.iccm", "fp", 42)
    assert (tmp_path / "m2.iccm").read_bytes() == blob


def test_checkpoint_format_details():
    ck = Checkpoint("x", {"a": 1}, {"w": torch.arange(6, dtype=torch.float32).reshape(2, 3),
                                    "n": torch.tensor(7)}, "abc", 2**40)
    blob = encode(ck)
    assert blob[:4] == b"ICCM"
    back = decode(blob)
    assert back.seed == 2**40 and back.fingerprint == "abc" and back.descriptor == {"a": 1}
    assert torch.equal(back.tensors["w"], ck.tensors["w"]) and back.tensors["n"].item() == 7
    with pytest.raises(CheckpointError):
        decode(blob[:-1])
    with pytest.raises(CheckpointError):
        decode(blob + b"\0")
    with pytest.raises(CheckpointError):
        decode(b"XXXX" + blob[4:])


def test_fingerprint_mismatch_and_missing(tmp_path):
    m = build_model(Arch(), "teacher", 0)
    save_denoiser(m, tmp_path / "t.iccm", "aaa", 0)
    with pytest.raises(CheckpointError):
        read(tmp_path / "t.iccm", "bbb")
    with pytest.raises(CheckpointError):
        read(tmp_path / "none.iccm")


def test_loaded_models_are_frozen(tmp_path):
    save_denoiser(build_model(Arch(), "backward", 0), tmp_path / "b.iccm", "f", 0)
    assert not any(p.requires_grad for p in load_denoiser(tmp_path / "b.iccm").parameters())


def test_pgm_examples(tmp_path):
    img = torch.tensor([[[0.0, -1.0, 1.0, 0.5]]])
    export_image(img, tmp_path / "a.pgm")
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n4 1\n255\n")
    assert list(data[-4:]) == [128, 0, 255, 191]
    with pytest.raises(ValueError):
        export_image(torch.tensor([[1.5]]), tmp_path / "b.pgm")
    with pytest.raises(ValueError):
        export_image(torch.tensor([[float("nan")]]), tmp_path / "b.pgm")


def test_pgm_round_trip(tmp_path):
    x = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(0)) * 2 - 1
    export_image(x, tmp_path / "x.pgm")
    back = import_image(tmp_path / "x.pgm")
    assert back.shape == (1, 16, 16)
    assert (back - x).abs().max().item() <= 1 / 255 + 1e-7
    export_image(back, tmp_path / "y.pgm")
    assert (tmp_path / "y.pgm").read_bytes() == (tmp_path / "x.pgm").read_bytes()
    assert np.array_equal(import_image(tmp_path / "y.pgm").numpy(), back.numpy())
