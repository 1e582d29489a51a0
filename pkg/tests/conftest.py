import numpy as np
import pytest
import torch

from dape.backbone import BackboneConfig, VideoClip, build_unet


def tiny_config(**kw):
    """Small backbone that still has every block and norm site."""
    base = dict(image_channels=1, reduction=2, base_width=8, groups=4, heads=2, cond_dim=16, max_tokens=4)
    base.update(kw)
    return BackboneConfig(**base)


def random_clip(frames=3, size=8, channels=1, seed=0, id="rand"):
    rng = np.random.default_rng(seed)
    return VideoClip(rng.random((frames, size, size, channels)).astype(np.float32), id=id)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_unet(tiny_cfg)


@pytest.fixture
def tiny_model64(tiny_cfg):
    return build_unet(tiny_cfg, dtype=torch.float64)


# acceptance verdicts, filled by test_acceptance.py and echoed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
