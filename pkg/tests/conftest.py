import sys

import numpy as np
import pytest
import torch

from objnovelty.encoder import VisionTransformer, set_determinism


@pytest.fixture(autouse=True)
def _seed():
    set_determinism(0)
    yield


@pytest.fixture
def tiny_vit():
    """2-block, 32-d ViT on 32x32 inputs (4x4 patch grid)."""
    torch.manual_seed(0)
    return VisionTransformer(img_size=32, patch_size=8, embed_dim=32, depth=2, num_heads=2, arch_id="tiny")


@pytest.fixture
def deep_vit():
    torch.manual_seed(1)
    return VisionTransformer(img_size=32, patch_size=8, embed_dim=32, depth=4, num_heads=4, arch_id="tiny4")


@pytest.fixture
def images():
    g = torch.Generator().manual_seed(0)
    return torch.randn(4, 3, 32, 32, generator=g)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        status, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
