import numpy as np
import pytest
import torch

from contseg.arch import ArchConfig, build_model
from contseg.synthdata import DomainShift, TaskSpec, generate_task

TINY_VIT = ArchConfig(
    variant="vit-v2", levels=3, base_channels=4, vit_depth=1, vit_heads=2, vit_dim=8, patch_size=4
)
TINY_UNET = ArchConfig(variant="plain-unet", levels=2, base_channels=2)


@pytest.fixture
def tiny_vit():
    return build_model(TINY_VIT, (8, 8), seed=0)


@pytest.fixture(scope="session")
def tiny_tasks():
    specs = [
        TaskSpec("a", 4, (8, 8, 8), DomainShift(), seed=1),
        TaskSpec("b", 4, (8, 8, 8), DomainShift(noise_sigma=0.05, fg_intensity=0.3), seed=2),
    ]
    return [generate_task(s) for s in specs]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, collected by test_acceptance."""
    import re
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(results, key=lambda e: (int(re.match(r"\d+", e["id"]).group()), e["id"])):
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {entry['id']}: {entry['title']} -- {entry['detail']}")
