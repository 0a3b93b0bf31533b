import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vip2clip.backbone import BackboneConfig, build_backbone
from vip2clip.data import SynthConfig, generate
from vip2clip.vip_prompt import init_prompt_state

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# acceptance criteria register "PASS/FAIL" lines here; printed in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TOY = BackboneConfig(grid_h=8, grid_w=8, visual_dim=32, text_embed_dim=16, joint_dim=16, n_layers=2, seed=5)


@pytest.fixture(scope="session")
def toy_bb():
    return build_backbone(TOY)


@pytest.fixture(scope="session")
def toy_bb64(toy_bb):
    return toy_bb.astype(np.float64)


@pytest.fixture
def toy_state(toy_bb):
    return init_prompt_state(toy_bb, rng=np.random.default_rng(11))


@pytest.fixture(scope="session")
def toy_samples():
    cfg = SynthConfig(size=32, area_min=16, area_max=120, counts=(("train", 8), ("test", 8)), seed=3)
    return generate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
