import numpy as np
import pytest
import torch

from posediff.network import ModelConfig, PoseTextureUNet
from posediff.schedule import make_linear_schedule


def tiny_config(**overrides) -> ModelConfig:
    kw = dict(
        image_height=16,
        image_width=12,
        base_width=8,
        channel_multipliers=(1, 2),
        num_res_blocks=1,
        tdb_resolutions=((16, 12), (8, 6)),
        time_embed_dim=16,
        norm_groups=4,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def randomize_zero_inits(model: torch.nn.Module, scale: float = 0.1, seed: int = 0):
    """Give zero-initialised projections nonzero weights so conditioning paths are live."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if torch.all(p == 0):
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return randomize_zero_inits(PoseTextureUNet(tiny_config())).eval()


@pytest.fixture
def small_schedule():
    return make_linear_schedule(20, 1e-3, 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
