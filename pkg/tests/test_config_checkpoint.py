import json

import numpy as np
import pytest
import torch

from gazefield.checkpoint import (FORMAT_VERSION, CheckpointData, load_checkpoint, save_checkpoint)
from gazefield.compositor import ModelConfig
from gazefield.config import TrainConfig, from_dict, load_config
from gazefield.errors import CheckpointError, ConfigError
from gazefield.synth import SyntheticSubject
from gazefield.training import build_state, load_state, save_state


def test_config_defaults_and_flags():
    c = TrainConfig()
    assert c.learning_rate == 1e-4 and c.rays_per_step == 1024 and c.steps_per_epoch == 500
    assert c.model.two_stream and c.model.rotation
    v = TrainConfig(two_stream=False, rotation=False, perceptual=False)
    assert not v.model.two_stream and not v.model.rotation
    w = v.effective_weights()
    assert w.lambda_p == 0.0 and w.lambda_f == 1.0 and w.lambda_d == 1.0


def test_config_digest_and_overrides():
    a = TrainConfig()
    assert a.digest() == TrainConfig(dataset="/somewhere/else").digest()
    b = a.with_overrides(seed=3)
    assert b.seed == 3 and b.digest() != a.digest()
    with pytest.raises(ConfigError):
        a.with_overrides(nonsense=1)


def test_config_files(tmp_path):
    d = {"steps": 20, "seed": 4, "model": {"width": 32}, "weights": {"lambda_p": 0.5}}
    (tmp_path / "c.json").write_text(json.dumps(d))
    (tmp_path / "c.yaml").write_text("steps: 20\nseed: 4\nmodel:\n  width: 32\nweights:\n  lambda_p: 0.5\n")
    a, b = load_config(tmp_path / "c.json"), load_config(tmp_path / "c.yaml")
    assert a == b and a.model.width == 32 and a.weights.lambda_p == 0.5
    assert from_dict(a.to_dict()) == a


@pytest.mark.parametrize("text,suffix", [
    ('{"stepz": 3}', ".json"),
    ('{"model": {"depthh": 3}}', ".json"),
    ('{"learning_rate": -1}', ".json"),
    ("steps: [unclosed", ".yaml"),
    ("steps = 3", ".toml"),
    ('{"weights": {"w_sh": -1}}', ".json"),
])
def test_config_errors(tmp_path, text, suffix):
    p = tmp_path / f"bad{suffix}"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_checkpoint_roundtrip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    data = CheckpointData({"kind": "test", "b": [1, 2], "a": {"x": 1.5}},
                          {"w": rng.standard_normal((3, 4)).astype(np.float32),
                           "a/b": rng.standard_normal(5).astype(np.float32),
                           "scalar": np.array(2.0, dtype=np.float32)})
    save_checkpoint(tmp_path / "a.gznf", data)
    loaded = load_checkpoint(tmp_path / "a.gznf")
    assert loaded.header == data.header
    for k, v in data.tensors.items():
        assert np.array_equal(loaded.tensors[k], v) and loaded.tensors[k].shape == v.shape
    save_checkpoint(tmp_path / "b.gznf", loaded)
    assert (tmp_path / "a.gznf").read_bytes() == (tmp_path / "b.gznf").read_bytes()
    raw = (tmp_path / "a.gznf").read_bytes()
    assert raw[:4] == b"GZNF" and int.from_bytes(raw[4:8], "little") == FORMAT_VERSION


def test_checkpoint_version_and_corruption(tmp_path):
    data = CheckpointData({"kind": "test"}, {"w": np.ones(3, np.float32)})
    save_checkpoint(tmp_path / "v2.gznf", data, version=2)
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(tmp_path / "v2.gznf")
    assert "2" in str(e.value) and str(FORMAT_VERSION) in str(e.value)
    save_checkpoint(tmp_path / "ok.gznf", data)
    raw = (tmp_path / "ok.gznf").read_bytes()
    (tmp_path / "trunc.gznf").write_bytes(raw[:-3])
    (tmp_path / "trail.gznf").write_bytes(raw + b"\0")
    (tmp_path / "magic.gznf").write_bytes(b"XXXX" + raw[4:])
    for name in ("trunc", "trail", "magic", "absent"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / f"{name}.gznf")


def test_model_state_roundtrip(tmp_path):
    cfg = TrainConfig(model=ModelConfig(width=16, depth=2, skip=1, decoder_width=16))
    state = build_state(cfg, {0: SyntheticSubject.random(0), 5: SyntheticSubject.random(5)})
    # give Adam some state
    loss = sum((p ** 2).sum() for p in state.system.parameters())
    loss.backward()
    state.optimizer.step()
    state.step = 7
    save_state(state, tmp_path / "a.gznf")
    back = load_state(tmp_path / "a.gznf")
    assert back.step == 7 and back.config == cfg and back.system.subject_ids == [0, 5]
    for (n1, t1), (n2, t2) in zip(state.system.state_dict().items(), back.system.state_dict().items()):
        assert n1 == n2 and torch.equal(t1, t2)
    save_state(back, tmp_path / "b.gznf")
    assert (tmp_path / "a.gznf").read_bytes() == (tmp_path / "b.gznf").read_bytes()
