import dataclasses

import pytest
import torch

from ttabridge.checkpoint import (
    CheckpointError,
    file_hash,
    load_container,
    module_tensors,
    optimizer_tensors,
    restore_module,
    restore_optimizer,
    save_container,
)
from ttabridge.config import ConfigError, RunConfig, desk_preset, env_overrides, load_config


@pytest.mark.parametrize("make", [RunConfig, desk_preset])
def test_config_text_round_trip(tmp_path, make):
    cfg = make()
    cfg.save(tmp_path / "c.cfg")
    back = load_config(tmp_path / "c.cfg")
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_config_overrides_and_comments(tmp_path):
    (tmp_path / "c.cfg").write_text(
        "# comment\nconfig_version = 1\npreset = \"desk\"\nguidance = 3\ndenoiser.channel_multipliers = [1, 2]\n"
    )
    cfg = load_config(tmp_path / "c.cfg", environ={})
    assert cfg.preset == "desk" and cfg.guidance == 3.0 and isinstance(cfg.guidance, float)
    assert cfg.denoiser.channel_multipliers == (1, 2)
    cfg = load_config(tmp_path / "c.cfg", environ={"TTAB_GUIDANCE": "0.5", "TTAB_MEL__N_MELS": "40"})
    assert cfg.guidance == 0.5 and cfg.mel.n_mels == 40
    cfg = load_config(tmp_path / "c.cfg", overrides={"guidance": 2.0}, environ={"TTAB_GUIDANCE": "0.5"})
    assert cfg.guidance == 2.0


def test_env_overrides_parsing():
    assert env_overrides({"TTAB_TRAIN__LR": "0.01", "OTHER": "1", "TTAB_MANIFEST": "m.jsonl"}) == {
        "train.lr": 0.01, "manifest": "m.jsonl"}


@pytest.mark.parametrize("text,match", [
    ("guidance = 1\n", "config_version"),
    ("config_version = 2\n", "config_version"),
    ("config_version = 1\nnot_a_key = 1\n", "unknown"),
    ("config_version = 1\nmel.nope = 1\n", "unknown"),
    ("config_version = 1\nguidance\n", "line 2"),
    ("config_version = 1\nguidance = abc\n", "JSON"),
    ("config_version = 1\npreset = \"huge\"\n", "preset"),
])
def test_config_errors(tmp_path, text, match):
    (tmp_path / "c.cfg").write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(tmp_path / "c.cfg", environ={})


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.cfg")


def test_config_validate():
    desk_preset().validate()
    RunConfig().validate()
    with pytest.raises(ConfigError, match="guidance"):
        dataclasses.replace(desk_preset(), guidance=-1.0).validate()
    with pytest.raises(ConfigError, match="inference_steps"):
        dataclasses.replace(desk_preset(), inference_steps=5000).validate()
    with pytest.raises(ConfigError, match="input_shape"):
        load_config(preset="desk", overrides={"mel.n_mels": 40}, environ={}).validate()
    with pytest.raises(ConfigError, match="manifest"):
        dataclasses.replace(desk_preset(), manifest="/no/such.jsonl").validate()


def test_container_round_trip(tmp_path):
    tensors = {
        "a": torch.randn(3, 4),
        "b": torch.arange(5, dtype=torch.int64),
        "c": torch.randn(2, dtype=torch.float64),
        "d": torch.tensor(7.0),
    }
    digest = save_container(tmp_path / "x.ckpt", {"kind": "test", "n": [1, 2]}, tensors)
    assert digest == file_hash(tmp_path / "x.ckpt")
    meta, back = load_container(tmp_path / "x.ckpt")
    assert meta == {"kind": "test", "n": [1, 2]}
    for key, value in tensors.items():
        assert back[key].dtype == value.dtype and torch.equal(back[key], value)


def test_container_rejects_bad_files(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_container(tmp_path / "bad.ckpt")
    save_container(tmp_path / "x.ckpt", {}, {})
    raw = bytearray((tmp_path / "x.ckpt").read_bytes())
    raw[4] = 9
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_container(tmp_path / "v.ckpt")


def test_module_and_optimizer_state_round_trip(tmp_path):
    torch.manual_seed(0)
    net = torch.nn.Linear(4, 3)
    opt = torch.optim.AdamW(net.parameters(), lr=1e-2)
    for _ in range(3):
        opt.zero_grad()
        net(torch.randn(8, 4)).pow(2).mean().backward()
        opt.step()
    groups, otensors = optimizer_tensors(opt)
    save_container(tmp_path / "s.ckpt", {"groups": groups}, {**module_tensors(net, "model"), **otensors})
    meta, tensors = load_container(tmp_path / "s.ckpt")
    net2 = torch.nn.Linear(4, 3)
    opt2 = torch.optim.AdamW(net2.parameters(), lr=1.0)
    restore_module(net2, tensors, "model")
    restore_optimizer(opt2, meta["groups"], tensors)
    x = torch.randn(8, 4)
    for n, o in ((net, opt), (net2, opt2)):
        o.zero_grad()
        n(x).pow(2).mean().backward()
        o.step()
    assert all(torch.equal(a, b) for a, b in zip(net.parameters(), net2.parameters()))
