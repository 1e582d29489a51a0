import json

import pytest

from dape.config import DEFAULTS, RunConfig, apply_override
from dape.errors import ConfigError, ValidationError


def test_defaults_resolve():
    cfg = RunConfig.load()
    st = cfg.stage_configs()
    assert (st["stage1"].steps, st["stage1"].learning_rate) == (400, 5e-5)
    assert (st["stage2"].steps, st["stage2"].learning_rate) == (70, 1e-5)
    assert st["stage2"].seed == st["stage1"].seed + 1
    assert cfg.placement.indices == {5}
    assert cfg.sampler.num_steps == 50 and cfg.sampler.guidance_scale == 7.5
    assert cfg.backbone.seed == cfg.seed == 0


def test_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "peft": {"placement": "1-7"}}))
    cfg = RunConfig.load(path, ["sampler.num_steps=10", "trainer.stage1.steps=5", "metrics.flow=zero"])
    assert cfg.seed == 3 and cfg.backbone.seed == 3
    assert cfg.placement.indices == set(range(1, 8))
    assert cfg.sampler.num_steps == 10 and cfg.stage_configs()["stage1"].steps == 5
    assert cfg.data["metrics"]["flow"] == "zero"
    assert RunConfig.load(path).hash != cfg.hash
    assert RunConfig.load(path, ["sampler.num_steps=10", "trainer.stage1.steps=5", "metrics.flow=zero"]).hash == cfg.hash


def test_write(tmp_path):
    cfg = RunConfig.load()
    cfg.write(tmp_path)
    assert json.loads((tmp_path / "config.json").read_text()) == DEFAULTS
    assert (tmp_path / "config.hash").read_text().strip() == cfg.hash


@pytest.mark.parametrize("overrides", [["nope=1"], ["sampler.nope=1"], ["sampler"], ["sampler.num_steps=-1"],
                                       ["peft.placement=9"], ["trainer.mode=triple"], ["backbone.groups=5"],
                                       ["metrics.clip_frame_pairs=some"], ["trainer.stage1.learning_rate=0"]])
def test_invalid(overrides):
    with pytest.raises((ConfigError, ValidationError)) as err:
        RunConfig.load(None, overrides)
    assert err.value.exit_code == 2


def test_bad_file(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")
    (tmp_path / "sec.json").write_text(json.dumps({"sampler": 3}))
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "sec.json")


def test_override_value_parsing():
    d = {"a": {"b": 1, "c": "x"}}
    apply_override(d, "a.b=2.5")
    apply_override(d, "a.c=hello world")
    assert d == {"a": {"b": 2.5, "c": "hello world"}}
