import numpy as np
import pytest

from multicurve.affine import FactorState, ModelParams


def make_params(kappa=0.5, b1=0.5, sigma1=0.01, psi1=0.005, factor3=(0.01, 0.4, 0.05, 0.01)):
    return ModelParams.build(
        (0.01, b1, sigma1, psi1),
        (0.02, 0.3, 0.05, 0.03),
        factor3,
        kappa=kappa,
    )


def deterministic_params(kappa=0.5, sigma=1e-12):
    """All volatilities negligible: factor paths follow their drift ODE."""
    return ModelParams.build(
        (0.01, 0.5, sigma, 0.005),
        (0.02, 0.3, sigma, 0.03),
        (0.01, 0.4, sigma, 0.01),
        kappa=kappa,
    )


def deterministic_path(spec, t):
    e = np.exp(-spec.b * t)
    return e * spec.psi0 + spec.a / spec.b * (1.0 - e)


def deterministic_integral(spec, t):
    """Integral of the drift-ODE solution from 0 to t."""
    m = spec.a / spec.b
    return m * t + (spec.psi0 - m) * (1.0 - np.exp(-spec.b * t)) / spec.b


@pytest.fixture
def params():
    return make_params()


@pytest.fixture
def state(params):
    return params.initial_state()


@pytest.fixture
def random_states():
    rng = np.random.default_rng(2024)
    return [
        FactorState(0.0, rng.uniform(-0.02, 0.03), rng.uniform(0.0, 0.06), rng.uniform(0.0, 0.03))
        for _ in range(20)
    ]
