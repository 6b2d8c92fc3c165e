import numpy as np
import pytest
import skimage.data
import torch

from texsr.images import ImageBuffer
from texsr.networks import ModelBundle, NetConfig
from texsr.synthetic import toy_hr_images
from texsr.trainer import TrainConfig, train_full


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TrainConfig(stage1_steps=4, stage2_steps=4, batch_size=2, revive_every=2, log_every=2,
                       weights={"adv_warmup": 2})


@pytest.fixture(scope="session")
def toy_data():
    return toy_hr_images(4, 64, seed=0)


@pytest.fixture(scope="session")
def tiny_run(tiny_cfg, toy_data):
    """A few-step two-stage run: (bundle, stage-1 checkpoint, stage-2 checkpoint)."""
    return train_full(toy_data, tiny_cfg)


@pytest.fixture(scope="session")
def natural_hr():
    """Four 160x160 crops from bundled photographs: 100 patches of 32x32."""
    sources = [skimage.data.astronaut()[40:200, 160:320], skimage.data.coffee()[100:260, 200:360],
               skimage.data.chelsea()[60:220, 120:280], skimage.data.rocket()[200:360, 300:460]]
    return [ImageBuffer(s.astype(np.float64) / 255.0) for s in sources]


@pytest.fixture
def fresh_bundle():
    return ModelBundle(NetConfig(), seed=0)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the boolean."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
