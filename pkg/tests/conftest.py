import math

import numpy as np
import pytest

from nfdetect.flow import FlowConfig, init_params, train, TrainOptions
from nfdetect.noise import NoiseSpec, sample_noise

# lines appended by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_params(dim, seed=0, k_steps=4, spread=0.3, scale_clamp=3.0):
    """Flow parameters with every array perturbed away from its identity init."""
    cfg = FlowConfig(dim=dim, k_steps=k_steps, scale_clamp=scale_clamp)
    params = init_params(cfg, seed)
    gen = np.random.default_rng(seed + 1000)
    for name, node in params.nodes.items():
        shape = node.value.shape
        if name.endswith("actnorm.scale"):
            node.value = gen.uniform(0.6, 1.6, shape) * gen.choice([-1.0, 1.0], shape)
        elif name.endswith("conv.weight"):
            node.value = node.value @ np.diag(gen.uniform(0.7, 1.4, 2))
        elif name == "latent.logvar":
            node.value = gen.normal(0.0, 0.3, shape)
        else:
            node.value = node.value + gen.normal(0.0, spread, shape)
    params.actnorm_ready = [True] * k_steps
    return params


def identity_params(dim, k_steps=4, logvar=0.0):
    """Identity flow with an isotropic latent: log-likelihood is Gaussian in w."""
    params = init_params(FlowConfig(dim=dim, k_steps=k_steps), 0)
    for k in range(k_steps):
        params[f"step{k}.conv.weight"].value = np.eye(2)
    params["latent.logvar"].value = np.full((dim, 2), float(logvar))
    params.actnorm_ready = [True] * k_steps
    return params


@pytest.fixture(scope="session")
def unit_gaussian_flow():
    """4-dim flow trained at desk scale on N(0, I) real components."""
    data = sample_noise(NoiseSpec("gaussian", sigma=1.0), 120_000, 4, seed=11)
    return train(FlowConfig(dim=4), data, TrainOptions(epochs=10, seed=0))


GAUSS_ENTROPY_PER_DIM = 0.5 * math.log(2 * math.pi * math.e)
