"""FRA fair rates, the adjustment-factor decomposition and Fourier caplet pricing.

All prices are per unit notional unless a contract carries a notional.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .affine import (
    Curve,
    FactorState,
    ModelParams,
    bond_coeff_curve,
    bond_price,
    bond_ratio_coeffs,
    factor_transform,
)
from .errors import InvalidConfig, QuadratureNotConverged, RiccatiExplosion, StripViolation

__all__ = [
    "FraContract",
    "CapletContract",
    "FraDecomposition",
    "QuadratureConfig",
    "CapletResult",
    "nu_single_curve",
    "fair_rate_single",
    "adjustment_factor",
    "correlation_exponential",
    "nu_bar",
    "fair_rate_risky",
    "fair_rate_risky_from_adjustment",
    "fra_decomposition",
    "fra_price",
    "forward_mgf",
    "mgf_ratio",
    "caplet_fourier",
    "caplet_price",
]

NuBarMethod = Literal["decomposition", "direct"]


@dataclass(frozen=True)
class FraContract:
    """Pay fixed ``K`` against the spot LIBOR fixed at ``T`` for ``[T, T+Delta]``."""

    T: float
    Delta: float
    K: float
    N: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise InvalidConfig(f"FRA reset time must be > 0, got {self.T}")
        if not self.Delta > 0:
            raise InvalidConfig(f"FRA tenor must be > 0, got {self.Delta}")
        if not self.N > 0:
            raise InvalidConfig(f"FRA notional must be > 0, got {self.N}")


@dataclass(frozen=True)
class CapletContract:
    T: float
    Delta: float
    K: float

    def __post_init__(self):
        if not self.T > 0:
            raise InvalidConfig(f"caplet reset time must be > 0, got {self.T}")
        if not self.Delta > 0:
            raise InvalidConfig(f"caplet tenor must be > 0, got {self.Delta}")

    @property
    def Ktilde(self) -> float:
        return 1.0 + self.Delta * self.K


@dataclass(frozen=True)
class FraDecomposition:
    """Single-curve quantities, the two adjustment factors and the risky result."""

    nu_single: float
    adjustment: float
    corr_exponential: float
    nu_bar: float
    K_single: float
    K_risky: float

    def as_dict(self) -> dict:
        return {
            "nu_single": self.nu_single,
            "adjustment": self.adjustment,
            "corr_exponential": self.corr_exponential,
            "nu_bar": self.nu_bar,
            "K_single": self.K_single,
            "K_risky": self.K_risky,
        }


class QuadScheme(str, enum.Enum):
    GAUSS_LEGENDRE = "gauss_legendre"
    SIMPSON = "simpson"


@dataclass(frozen=True)
class QuadratureConfig:
    """Fourier inversion settings.

    ``v_max=None`` selects the truncation adaptively: the smallest probe
    frequency beyond which the integrand modulus stays below
    ``decay * |integrand(0)|``, capped at ``v_cap``.  With ``adapt_R`` the
    damping is lowered towards 1 when the MGF is not finite at ``R``.
    """

    R: float = 1.5
    v_max: float | None = None
    n_points: int = 1024
    scheme: QuadScheme = QuadScheme.GAUSS_LEGENDRE
    adapt_R: bool = True
    decay: float = 1e-12
    v_cap: float = 1e5
    tol: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "scheme", QuadScheme(self.scheme))
        if not self.R > 1:
            raise InvalidConfig(f"damping R must be > 1, got {self.R}")
        if self.v_max is not None and not self.v_max > 0:
            raise InvalidConfig("v_max must be > 0")
        if self.n_points < 16:
            raise InvalidConfig("n_points must be >= 16")
        if not self.v_cap > 0 or not self.tol > 0:
            raise InvalidConfig("v_cap and tol must be > 0")


# ---------------------------------------------------------------------------
# FRAs


def _check_horizon(state: FactorState, T: float, Delta: float):
    if state.t > T:
        raise ValueError(f"state time {state.t} is after reset {T}")
    if not Delta >= 0:
        raise ValueError(f"Delta must be non-negative, got {Delta}")


def nu_single_curve(state: FactorState, T: float, Delta: float, params: ModelParams) -> float:
    """``p(t,T) / p(t,T+Delta)``."""
    _check_horizon(state, T, Delta)
    return bond_price(Curve.RISK_FREE, state, T, params) / bond_price(
        Curve.RISK_FREE, state, T + Delta, params
    )


def fair_rate_single(state: FactorState, T: float, Delta: float, params: ModelParams) -> float:
    return (nu_single_curve(state, T, Delta, params) - 1.0) / Delta


def _expect_exp_terminal(index: int, coeff: float, state: FactorState, T: float,
                         params: ModelParams) -> float:
    """``E[exp(-coeff * psi_T) | F_t]`` for one factor."""
    alpha, beta = factor_transform(index, 0.0, coeff, state.t, T, params)
    psi = state.psi[index - 1]
    return math.exp((alpha - beta * psi).real)


def adjustment_factor(state: FactorState, T: float, Delta: float, params: ModelParams) -> float:
    """``E[p(T,T+Delta) / pbar(T,T+Delta) | F_t]`` from single-factor transforms."""
    _check_horizon(state, T, Delta)
    Atilde, B1tilde, B3bar = bond_ratio_coeffs(T, Delta, params)
    spread_part = _expect_exp_terminal(3, -B3bar, state, T, params)
    corr_part = _expect_exp_terminal(1, params.kappa * B1tilde, state, T, params)
    return math.exp(-Atilde) * spread_part * corr_part


def correlation_exponential(t: float, T: float, Delta: float, params: ModelParams) -> float:
    """Closed-form factor driven by the factor shared between rate and spread."""
    if t > T:
        raise ValueError(f"require t <= T, got t={t}, T={T}")
    f1 = params.factor1
    b = f1.b
    expo = (
        params.kappa * f1.sigma**2 / (2.0 * b**3)
        * (-math.expm1(-b * Delta))
        * math.expm1(-b * (T - t)) ** 2
    )
    return math.exp(expo)


def _nu_bar_direct(state: FactorState, T: float, Delta: float, params: ModelParams) -> float:
    Atilde, B1tilde, B3bar = bond_ratio_coeffs(T, Delta, params)
    spread_part = _expect_exp_terminal(3, -B3bar, state, T, params)
    a1, b1 = factor_transform(1, -1.0, params.kappa * B1tilde, state.t, T, params)
    a2, b2 = factor_transform(2, 1.0, 0.0, state.t, T, params)
    log_F = (a1 - b1 * state.psi1 + a2 - b2 * state.psi2).real
    p_end = bond_price(Curve.RISK_FREE, state, T + Delta, params)
    return math.exp(-Atilde + log_F) * spread_part / p_end


def nu_bar(state: FactorState, T: float, Delta: float, params: ModelParams,
           method: NuBarMethod = "decomposition") -> float:
    """Forward-measure expectation of ``1 / pbar(T, T+Delta)``.

    ``"decomposition"`` multiplies the single-curve ratio by the two
    adjustment factors; ``"direct"`` evaluates the measure-changed
    expectation as one product of affine transforms.
    """
    _check_horizon(state, T, Delta)
    if method == "decomposition":
        return (
            nu_single_curve(state, T, Delta, params)
            * adjustment_factor(state, T, Delta, params)
            * correlation_exponential(state.t, T, Delta, params)
        )
    if method == "direct":
        return _nu_bar_direct(state, T, Delta, params)
    raise ValueError(f"unknown method {method!r}")


def fair_rate_risky(state: FactorState, T: float, Delta: float, params: ModelParams,
                    method: NuBarMethod = "direct") -> float:
    """Fixed rate making the two-curve FRA worth zero."""
    return (nu_bar(state, T, Delta, params, method) - 1.0) / Delta


def fair_rate_risky_from_adjustment(state: FactorState, T: float, Delta: float,
                                    params: ModelParams) -> float:
    """Risky fair rate rebuilt from the single-curve rate and both adjustments."""
    K = fair_rate_single(state, T, Delta, params)
    Ad = adjustment_factor(state, T, Delta, params)
    corr = correlation_exponential(state.t, T, Delta, params)
    return (K + 1.0 / Delta) * Ad * corr - 1.0 / Delta


def fra_decomposition(state: FactorState, T: float, Delta: float,
                      params: ModelParams) -> FraDecomposition:
    nu = nu_single_curve(state, T, Delta, params)
    Ad = adjustment_factor(state, T, Delta, params)
    corr = correlation_exponential(state.t, T, Delta, params)
    nb = nu * Ad * corr
    return FraDecomposition(nu, Ad, corr, nb, (nu - 1.0) / Delta, (nb - 1.0) / Delta)


def fra_price(state: FactorState, contract: FraContract, params: ModelParams) -> float:
    """Value at ``state.t`` of receiving LIBOR and paying ``K`` (times notional)."""
    T, D = contract.T, contract.Delta
    nb = nu_bar(state, T, D, params)
    p_end = bond_price(Curve.RISK_FREE, state, T + D, params)
    return contract.N * p_end * (nb - (1.0 + D * contract.K))


# ---------------------------------------------------------------------------
# Forward MGF and caplets


def forward_mgf(z, T: float, Delta: float, params: ModelParams, initial_state: FactorState,
                curve: Curve | str = Curve.RISKY):
    """MGF of ``X = -log pbar(T, T+Delta)`` under the ``T+Delta`` forward measure.

    Evaluated under the risk-neutral measure as
    ``E[exp(-int r) p(T,T+Delta) exp(zX)] / p(t,T+Delta)``, which is one
    exponential-affine transform per factor.  ``z`` may be an array.  With
    ``curve="risk_free"`` the log of the risk-free bond replaces ``X``.
    """
    if initial_state.t != 0.0:
        raise ValueError(f"the forward MGF is defined from time 0, got t={initial_state.t}")
    _check_horizon(initial_state, T, Delta)
    zs = np.asarray(z, dtype=np.complex128)
    flat = np.atleast_1d(zs).ravel()
    A, B1, B2, _ = (x[0] for x in bond_coeff_curve(Curve.RISK_FREE, [Delta], params))
    Ax, B1x, B2x, B3x = (x[0] for x in bond_coeff_curve(Curve(curve), [Delta], params))
    terminals = (B1 - flat * B1x, B2 - flat * B2x, -flat * B3x)
    log_m = A - flat * Ax
    for i, (q, w) in enumerate(zip((-1.0, 1.0, 0.0), terminals), start=1):
        if i == 3 and B3x == 0.0:
            continue
        alpha, beta = factor_transform(i, q, w, initial_state.t, T, params)
        log_m = log_m + alpha - beta * initial_state.psi[i - 1]
    p_end = bond_price(Curve.RISK_FREE, initial_state, T + Delta, params)
    out = np.exp(log_m) / p_end
    return complex(out[0]) if zs.ndim == 0 else out.reshape(zs.shape)


def mgf_ratio(z, T: float, Delta: float, params: ModelParams, initial_state: FactorState):
    """Diagnostic: risky-bond MGF over the risk-free-bond MGF at ``z``."""
    return forward_mgf(z, T, Delta, params, initial_state) / forward_mgf(
        z, T, Delta, params, initial_state, curve=Curve.RISK_FREE
    )


@dataclass(frozen=True)
class CapletResult:
    price: float
    R: float
    v_max: float
    n_points: int
    method: str

    def as_dict(self) -> dict:
        return {"price": self.price, "R": self.R, "v_max": self.v_max,
                "n_points": self.n_points, "method": self.method}


def _mgf_finite(R: float, contract: CapletContract, params, state) -> bool:
    try:
        val = forward_mgf(R, contract.T, contract.Delta, params, state)
    except RiccatiExplosion:
        return False
    return bool(np.isfinite(val))


def _select_R(contract, params, state, quad: QuadratureConfig) -> float:
    R = quad.R
    if _mgf_finite(R, contract, params, state):
        return R
    if not quad.adapt_R:
        raise StripViolation(f"forward MGF is not finite at R={R}")
    while True:
        R = 0.5 * (1.0 + R)
        if R - 1.0 < 1e-3:
            raise StripViolation("no admissible damping parameter above 1 + 1e-3")
        if _mgf_finite(R, contract, params, state):
            return R


def _integrand(v, contract, params, state, R):
    z = R + 1j * np.asarray(v, dtype=float)
    m = forward_mgf(z, contract.T, contract.Delta, params, state)
    return np.exp((1.0 - z) * math.log(contract.Ktilde)) * m / (z * (z - 1.0))


def _truncation(contract, params, state, R, quad: QuadratureConfig, tail_tol: float):
    """Truncation point and the end of the oscillation-resolving region.

    Returns ``(v_max, v_osc)``: the integrand modulus stays below
    ``decay * |integrand(0)|`` beyond ``v_max``; beyond ``v_osc`` the whole
    remaining envelope integrates to less than ``tail_tol``.
    """
    probes = np.geomspace(1.0, quad.v_cap, 64)
    mods = np.abs(_integrand(np.concatenate([[0.0], probes]), contract, params, state, R))
    if quad.v_max is not None:
        v_max = quad.v_max
    else:
        above = np.nonzero(mods[1:] >= quad.decay * mods[0])[0]
        v_max = float(probes[0]) if above.size == 0 else float(probes[min(above[-1] + 1, 63)])
    # envelope tail integral from each probe onwards (trapezoid, generous)
    env = mods[1:]
    seg = 0.5 * (env[1:] + env[:-1]) * np.diff(probes)
    tail = np.append(np.cumsum(seg[::-1])[::-1], 0.0) + env * probes
    ok = np.nonzero(tail < tail_tol)[0]
    v_osc = float(probes[ok[0]]) if ok.size else quad.v_cap
    return v_max, min(v_osc, v_max)


def _nodes(v_max: float, n: int, scheme: QuadScheme, R: float,
           h_max: float = math.inf, v_osc: float = 0.0):
    """Quadrature nodes on ``[0, v_max]`` graded towards the origin.

    The kernel ``1/(z(z-1))`` varies on the scale ``R - 1`` near ``v = 0``
    and on the scale ``v`` further out, so panels grow geometrically.  Below
    ``v_osc`` no panel is wider than ``h_max``, which keeps the strike
    oscillation ``Ktilde^{-iv}`` resolved.
    """
    v0 = min(0.25 * (R - 1.0), 0.5 * v_max)
    if scheme is QuadScheme.GAUSS_LEGENDRE:
        per_panel = 16
        panels = max(2, n // per_panel)
        edges = np.concatenate([[0.0], np.geomspace(v0, v_max, panels)])
        if math.isfinite(h_max) and v_osc > 0:
            pieces = [edges[:1]]
            for lo, hi in zip(edges[:-1], edges[1:]):
                k = int(math.ceil((hi - lo) / h_max)) if lo < v_osc else 1
                pieces.append(np.linspace(lo, hi, k + 1)[1:])
            edges = np.concatenate(pieces)
        x, w = np.polynomial.legendre.leggauss(per_panel)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        return (mid[:, None] + half[:, None] * x[None, :]).ravel(), (half[:, None] * w[None, :]).ravel()
    # composite Simpson in the log-graded variable v = v0 * (exp(u) - 1)
    span = math.log1p(v_max / v0)
    m = n
    if math.isfinite(h_max) and v_osc > 0:
        # the v-step is about (v + v0) du; keep it under h_max / 8 up to v_osc
        m = max(m, int(math.ceil(8.0 * span * (v_osc + v0) / h_max)))
    m += m % 2
    u = np.linspace(0.0, span, m + 1)
    h = u[1] - u[0]
    weights = np.full(m + 1, 2.0)
    weights[1::2] = 4.0
    weights[0] = weights[-1] = 1.0
    return v0 * np.expm1(u), weights * h / 3.0 * v0 * np.exp(u)


def caplet_fourier(contract: CapletContract, params: ModelParams, initial_state: FactorState,
                   quad: QuadratureConfig | None = None) -> CapletResult:
    """Caplet price per unit notional with the inversion diagnostics.

    Strikes with ``1 + Delta K <= 0`` are always exercised and are priced by
    parity with the FRA leg instead of the Fourier integral.
    """
    quad = quad or QuadratureConfig()
    T, D = contract.T, contract.Delta
    _check_horizon(initial_state, T, D)
    p_end = bond_price(Curve.RISK_FREE, initial_state, T + D, params)
    if contract.Ktilde <= 0.0:
        nb = nu_bar(initial_state, T, D, params)
        return CapletResult(p_end * (nb - contract.Ktilde), float("nan"), 0.0, 0, "parity")

    R = _select_R(contract, params, initial_state, quad)
    scale = p_end / math.pi
    v_max, v_osc = _truncation(contract, params, initial_state, R, quad, 0.1 * quad.tol / scale)
    # phase of Ktilde^{-iv} M(R+iv) advances at about |log Ktilde - E X| per unit v;
    # one period per 16-point panel keeps that resolved
    omega = abs(math.log(contract.Ktilde) - math.log(nu_bar(initial_state, T, D, params)))
    h_max = 2.0 * math.pi / max(omega, 1e-12)

    def integrate(n):
        nodes, weights = _nodes(v_max, n, quad.scheme, R, h_max, v_osc)
        vals = _integrand(nodes, contract, params, initial_state, R).real
        return scale * math.fsum(weights * vals), nodes.size

    coarse, _ = integrate(quad.n_points)
    fine, n_used = integrate(2 * quad.n_points)
    if abs(fine - coarse) > quad.tol:
        raise QuadratureNotConverged(
            f"caplet integral moved by {abs(fine - coarse):.3e} when doubling nodes"
        )
    return CapletResult(max(fine, 0.0), R, v_max, n_used, "fourier")


def caplet_price(contract: CapletContract, params: ModelParams, initial_state: FactorState,
                 quad: QuadratureConfig | None = None) -> float:
    return caplet_fourier(contract, params, initial_state, quad).price
