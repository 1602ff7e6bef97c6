import pytest
import torch

from skelmotion.denoiser import Denoiser, DenoiserConfig
from skelmotion.skeleton import build_topology, load_skeleton, plan_from_groups, validate_pooling_plan
from skelmotion.vae import SkeletonVAE, VAEConfig


@pytest.fixture(scope="session")
def skeleton():
    return load_skeleton()


@pytest.fixture(scope="session")
def topo(skeleton):
    return skeleton[0]


@pytest.fixture(scope="session")
def plan(skeleton):
    return skeleton[1]


@pytest.fixture
def chain3():
    return build_topology([
        {"name": "root", "parent": None},
        {"name": "mid", "parent": "root"},
        {"name": "end", "parent": "mid"},
    ])


@pytest.fixture(scope="session")
def tiny_vae(topo, plan):
    torch.manual_seed(0)
    vae = SkeletonVAE(topo, plan, VAEConfig(latent_dim=8, hidden_dim=8))
    vae.eval()
    return vae


def tiny_denoiser_config(**overrides):
    base = dict(latent_dim=8, width=32, layers=2, heads=2, ffn_dim=64, text_dim=16)
    base.update(overrides)
    return DenoiserConfig(**base)


@pytest.fixture(scope="session")
def tiny_denoiser():
    torch.manual_seed(0)
    model = Denoiser(tiny_denoiser_config())
    model.eval()
    return model


ACCEPTANCE_LINES: list[str] = []


def report(n: int, name: str, ok: bool, detail: str = "") -> bool:
    """Record one acceptance verdict; the lines are echoed in the terminal summary."""
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
