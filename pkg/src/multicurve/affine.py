"""Three-factor affine model: parameters, Riccati solver and bond coefficients.

The short rate and the short-rate spread are driven by three independent
factors under the risk-neutral measure::

    r_t = psi2_t - psi1_t
    s_t = kappa * psi1_t + psi3_t

    d psi1 = (a1 - b1 psi1) dt + sigma1 dW1                (Gaussian)
    d psi_i = (a_i - b_i psi_i) dt + sigma_i sqrt(psi_i) dW_i, i = 2, 3

Every expectation of the form

    E[ exp(-int_t^T q . psi_u du - w . psi_T) | F_t ]

is exponential-affine, ``exp(alpha - beta . psi_t)``, and factorises over the
three factors.  Each factor's ``(alpha, beta)`` pair solves a scalar Riccati
ODE which is integrated here in time-to-maturity ``tau = T - t``::

    dbeta/dtau  = q - b beta - [sqrt] sigma^2/2 beta^2,   beta(0) = w
    dalpha/dtau = -a beta + [gauss] sigma^2/2 beta^2,    alpha(0) = 0

The same integrator serves real and complex terminal data.
"""

from __future__ import annotations

import contextlib
import contextvars
import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from .errors import InvalidParams, NonFinite, RiccatiExplosion

__all__ = [
    "FactorKind",
    "FactorSpec",
    "ModelParams",
    "FactorState",
    "AffineTransformResult",
    "BondCoeffs",
    "Curve",
    "validate_params",
    "solve_riccati",
    "factor_transform",
    "riskfree_bond_coeffs",
    "risky_bond_coeffs",
    "bond_coeff_curve",
    "bond_price",
    "bond_ratio_coeffs",
    "bond_ratio",
    "EXPLOSION_BOUND",
    "KAPPA_BOUND",
    "fixed_resolution",
]

#: |beta| above this value is treated as a finite-time blow-up.
EXPLOSION_BOUND = 1e8
#: validation accepts kappa in [-KAPPA_BOUND, KAPPA_BOUND]
KAPPA_BOUND = 5.0

_ATOL = 1e-12
_RTOL = 1e-12
_MIN_STEPS = 16
_MAX_STEPS = 1 << 22


class FactorKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    SQUARE_ROOT = "square_root"


class Curve(str, enum.Enum):
    RISK_FREE = "risk_free"
    RISKY = "risky"


@dataclass(frozen=True)
class FactorSpec:
    """Coefficients of one factor: drift ``a - b psi``, volatility ``sigma``."""

    kind: FactorKind
    a: float
    b: float
    sigma: float
    psi0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FactorKind(self.kind))

    @property
    def mean_level(self) -> float:
        return self.a / self.b


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set: three factor specs plus the correlation constant."""

    factor1: FactorSpec
    factor2: FactorSpec
    factor3: FactorSpec
    kappa: float = 0.0

    @property
    def factors(self) -> tuple[FactorSpec, FactorSpec, FactorSpec]:
        return (self.factor1, self.factor2, self.factor3)

    def initial_state(self) -> "FactorState":
        return FactorState(0.0, self.factor1.psi0, self.factor2.psi0, self.factor3.psi0)

    def with_kappa(self, kappa: float) -> "ModelParams":
        return replace(self, kappa=float(kappa))

    @classmethod
    def build(
        cls,
        factor1: Sequence[float],
        factor2: Sequence[float],
        factor3: Sequence[float],
        kappa: float = 0.0,
    ) -> "ModelParams":
        """Build from ``(a, b, sigma, psi0)`` tuples, factor kinds implied."""
        return cls(
            FactorSpec(FactorKind.GAUSSIAN, *map(float, factor1)),
            FactorSpec(FactorKind.SQUARE_ROOT, *map(float, factor2)),
            FactorSpec(FactorKind.SQUARE_ROOT, *map(float, factor3)),
            float(kappa),
        )

    def to_dict(self) -> dict:
        out = {}
        for i, f in enumerate(self.factors, start=1):
            out[f"factor{i}"] = {"a": f.a, "b": f.b, "sigma": f.sigma, "psi0": f.psi0}
        out["kappa"] = self.kappa
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        expected = {"factor1", "factor2", "factor3", "kappa"}
        unknown = set(data) - expected
        if unknown:
            raise InvalidParams("schema", f"unknown model keys {sorted(unknown)}")
        missing = expected - set(data)
        if missing:
            raise InvalidParams("schema", f"missing model keys {sorted(missing)}")
        blocks = []
        for i in (1, 2, 3):
            block = data[f"factor{i}"]
            keys = {"a", "b", "sigma", "psi0"}
            if set(block) != keys:
                raise InvalidParams(
                    "schema", f"factor{i} must have exactly the keys {sorted(keys)}"
                )
            blocks.append(tuple(block[k] for k in ("a", "b", "sigma", "psi0")))
        return cls.build(*blocks, kappa=data["kappa"])


@dataclass(frozen=True)
class FactorState:
    """Markov state of the model at time ``t``."""

    t: float
    psi1: float
    psi2: float
    psi3: float

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"state time must be >= 0, got {self.t}")
        if self.psi2 < 0 or self.psi3 < 0:
            raise ValueError("square-root factors must be non-negative")

    @property
    def psi(self) -> np.ndarray:
        return np.array([self.psi1, self.psi2, self.psi3])

    @property
    def short_rate(self) -> float:
        return self.psi2 - self.psi1

    def spread(self, kappa: float) -> float:
        return kappa * self.psi1 + self.psi3


@dataclass(frozen=True)
class AffineTransformResult:
    """``E[.|F_t] = exp(alpha - beta1 psi1 - beta2 psi2 - beta3 psi3)``."""

    alpha: complex
    beta1: complex
    beta2: complex
    beta3: complex

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta1, self.beta2, self.beta3])

    def log_value(self, state: FactorState | Sequence[float]) -> complex:
        psi = state.psi if isinstance(state, FactorState) else np.asarray(state)
        return self.alpha - self.beta1 * psi[0] - self.beta2 * psi[1] - self.beta3 * psi[2]

    def value(self, state: FactorState | Sequence[float]) -> complex:
        return np.exp(self.log_value(state))


@dataclass(frozen=True)
class BondCoeffs:
    """Exponential-affine bond coefficients for one ``(t, T)`` pair.

    ``price = exp(A - B1 psi1 - B2 psi2 - B3 psi3)``; ``B3`` is identically
    zero for the risk-free curve.
    """

    curve: Curve
    A: float
    B1: float
    B2: float
    B3: float = 0.0

    def log_price(self, psi1, psi2, psi3=0.0):
        return self.A - self.B1 * psi1 - self.B2 * psi2 - self.B3 * psi3

    def price(self, state: FactorState) -> float:
        return math.exp(self.log_price(state.psi1, state.psi2, state.psi3))


def validate_params(params: ModelParams) -> ModelParams:
    """Check positivity, Feller and kind constraints; return ``params`` unchanged."""
    kinds = (FactorKind.GAUSSIAN, FactorKind.SQUARE_ROOT, FactorKind.SQUARE_ROOT)
    for i, (spec, kind) in enumerate(zip(params.factors, kinds), start=1):
        if spec.kind is not kind:
            raise InvalidParams("kind", f"factor {i} must be {kind.value}, got {spec.kind.value}")
        for name in ("a", "b", "sigma", "psi0"):
            if not math.isfinite(getattr(spec, name)):
                raise InvalidParams("finiteness", f"factor {i} {name} is not finite")
        for name in ("a", "b", "sigma"):
            if not getattr(spec, name) > 0:
                raise InvalidParams(
                    "positivity", f"factor {i} requires {name} > 0, got {getattr(spec, name)}"
                )
        if kind is FactorKind.SQUARE_ROOT:
            if spec.a < 0.5 * spec.sigma**2:
                raise InvalidParams(
                    "feller",
                    f"factor {i} requires a >= sigma^2/2 ({spec.a} < {0.5 * spec.sigma**2})",
                )
            if spec.psi0 < 0:
                raise InvalidParams("positivity", f"factor {i} requires psi0 >= 0")
    if not math.isfinite(params.kappa) or abs(params.kappa) > KAPPA_BOUND:
        raise InvalidParams("kappa", f"kappa must lie in [-{KAPPA_BOUND}, {KAPPA_BOUND}]")
    return params


# ---------------------------------------------------------------------------
# Riccati integration kernel

_FIXED_RESOLUTION: contextvars.ContextVar[int | None] = contextvars.ContextVar(
    "fixed_resolution", default=None
)


@contextlib.contextmanager
def fixed_resolution(steps_per_year: int):
    """Evaluate every transform in the block with a parameter-independent step.

    The default step-doubling picks its step count from the data, which makes
    results piecewise smooth in the parameters.  Optimisers that difference
    the objective want a smooth map instead; inside this block each solve
    uses RK4 with ``steps_per_year`` steps per unit horizon plus one
    Richardson extrapolation.
    """
    if steps_per_year < 1:
        raise ValueError("steps_per_year must be >= 1")
    token = _FIXED_RESOLUTION.set(int(steps_per_year))
    try:
        yield
    finally:
        _FIXED_RESOLUTION.reset(token)


@njit(cache=True)
def _rhs(alpha, beta, q, b, cq, a, ca):
    bb = beta * beta
    return -a * beta + ca * bb, q - b * beta - cq * bb


@njit(cache=True)
def _rk4_pass(w, q, b, cq, a, ca, taus, n_total, bound, out_a, out_b):
    """Classical RK4 over the sorted horizons ``taus``.

    Returns the tau at which |beta| crossed ``bound`` (or went non-finite),
    or -1.0 when the pass completed.
    """
    tau_max = taus[taus.shape[0] - 1]
    alpha = 0.0 + 0.0j
    beta = w
    tau = 0.0
    for k in range(taus.shape[0]):
        seg = taus[k] - tau
        if seg > 0.0:
            n = int(math.ceil(n_total * seg / tau_max))
            if n < 1:
                n = 1
            h = seg / n
            for _ in range(n):
                k1a, k1b = _rhs(alpha, beta, q, b, cq, a, ca)
                k2a, k2b = _rhs(alpha + 0.5 * h * k1a, beta + 0.5 * h * k1b, q, b, cq, a, ca)
                k3a, k3b = _rhs(alpha + 0.5 * h * k2a, beta + 0.5 * h * k2b, q, b, cq, a, ca)
                k4a, k4b = _rhs(alpha + h * k3a, beta + h * k3b, q, b, cq, a, ca)
                alpha = alpha + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
                beta = beta + h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)
                tau += h
                mag = abs(beta)
                if not (mag <= bound) or not (abs(alpha) < 1e300):
                    return tau
            tau = taus[k]
        out_a[k] = alpha
        out_b[k] = beta
    return -1.0


@njit(cache=True)
def _integrate_nodes(ws, q, b, cq, a, ca, taus, fixed_steps, extrapolate, atol, rtol, bound,
                     max_steps):
    """Integrate every terminal value in ``ws`` with per-node step doubling.

    ``fixed_steps > 0`` skips the refinement: one pass with that many steps,
    or with ``extrapolate`` the Richardson combination of ``fixed_steps`` and
    ``2 * fixed_steps``.

    status[j]: 0 converged, 1 exploded (blow_tau[j] set), 2 not converged.
    """
    m = ws.shape[0]
    k = taus.shape[0]
    alphas = np.zeros((m, k), dtype=np.complex128)
    betas = np.zeros((m, k), dtype=np.complex128)
    status = np.zeros(m, dtype=np.int64)
    blow_tau = np.full(m, -1.0)
    tau_max = taus[k - 1]
    if tau_max <= 0.0:
        for j in range(m):
            for i in range(k):
                betas[j, i] = ws[j]
        return alphas, betas, status, blow_tau

    a_lo = np.empty(k, dtype=np.complex128)
    b_lo = np.empty(k, dtype=np.complex128)
    a_hi = np.empty(k, dtype=np.complex128)
    b_hi = np.empty(k, dtype=np.complex128)
    base = max(16, int(math.ceil(32.0 * tau_max)))

    for j in range(m):
        if fixed_steps > 0:
            t_blow = _rk4_pass(ws[j], q, b, cq, a, ca, taus, fixed_steps, bound, a_hi, b_hi)
            if extrapolate and t_blow < 0.0:
                a_lo[:] = a_hi
                b_lo[:] = b_hi
                t_blow = _rk4_pass(ws[j], q, b, cq, a, ca, taus, 2 * fixed_steps, bound, a_hi, b_hi)
                for i in range(k):
                    a_hi[i] += (a_hi[i] - a_lo[i]) / 15.0
                    b_hi[i] += (b_hi[i] - b_lo[i]) / 15.0
            if t_blow >= 0.0:
                status[j] = 1
                blow_tau[j] = t_blow
            else:
                alphas[j, :] = a_hi
                betas[j, :] = b_hi
            continue

        n = base
        lo_blow = _rk4_pass(ws[j], q, b, cq, a, ca, taus, n, bound, a_lo, b_lo)
        done = False
        while not done:
            hi_blow = _rk4_pass(ws[j], q, b, cq, a, ca, taus, 2 * n, bound, a_hi, b_hi)
            if hi_blow >= 0.0 and lo_blow >= 0.0:
                status[j] = 1
                blow_tau[j] = hi_blow
                done = True
            elif hi_blow < 0.0 and lo_blow < 0.0:
                err_ok = True
                for i in range(k):
                    ea = abs(a_hi[i] - a_lo[i]) / 15.0
                    eb = abs(b_hi[i] - b_lo[i]) / 15.0
                    if ea > atol + rtol * abs(a_hi[i]) or eb > atol + rtol * abs(b_hi[i]):
                        err_ok = False
                        break
                if err_ok:
                    for i in range(k):
                        # Richardson extrapolation of the fourth-order pair
                        alphas[j, i] = a_hi[i] + (a_hi[i] - a_lo[i]) / 15.0
                        betas[j, i] = b_hi[i] + (b_hi[i] - b_lo[i]) / 15.0
                    done = True
            if not done:
                n *= 2
                if 2 * n > max_steps:
                    if hi_blow >= 0.0:
                        status[j] = 1
                        blow_tau[j] = hi_blow
                    else:
                        status[j] = 2
                    done = True
                else:
                    lo_blow = hi_blow
                    for i in range(k):
                        a_lo[i] = a_hi[i]
                        b_lo[i] = b_hi[i]
    return alphas, betas, status, blow_tau


def _factor_constants(spec: FactorSpec) -> tuple[float, float]:
    half_var = 0.5 * spec.sigma**2
    if spec.kind is FactorKind.GAUSSIAN:
        return 0.0, half_var
    return half_var, 0.0


def _transform_grid(
    index: int,
    q: float,
    terminal,
    taus,
    params: ModelParams,
    *,
    n_steps: int | None = None,
    t_end: float | None = None,
):
    """Factor ``index`` (1-based) transform for many terminal values and horizons.

    Returns complex arrays ``alpha, beta`` of shape ``(len(terminal), len(taus))``.
    ``t_end`` is the maturity used to convert a blow-up tau into calendar time.
    """
    spec = params.factors[index - 1]
    ws = np.atleast_1d(np.asarray(terminal, dtype=np.complex128)).ravel()
    taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
    if np.any(taus < 0) or np.any(np.diff(taus) < 0):
        raise ValueError("horizons must be non-negative and sorted")
    cq, ca = _factor_constants(spec)
    extrapolate = False
    if n_steps is None:
        per_year = _FIXED_RESOLUTION.get()
        if per_year:
            n_steps = max(_MIN_STEPS, int(math.ceil(per_year * taus[-1])))
            extrapolate = True
    alphas, betas, status, blow = _integrate_nodes(
        ws, float(q), spec.b, cq, spec.a, ca, taus,
        int(n_steps or 0), extrapolate, _ATOL, _RTOL, EXPLOSION_BOUND, _MAX_STEPS,
    )
    if np.any(status == 1):
        j = int(np.argmax(status == 1))
        horizon = taus[-1] if t_end is None else t_end
        raise RiccatiExplosion(index, float(horizon - blow[j]))
    if np.any(status == 2):
        raise NonFinite(f"Riccati solver for factor {index} did not converge")
    return alphas, betas


def _check_times(t: float, T: float) -> float:
    if not (math.isfinite(t) and math.isfinite(T)):
        raise ValueError("times must be finite")
    if t > T:
        raise ValueError(f"require t <= T, got t={t}, T={T}")
    return T - t


def factor_transform(factor_index: int, q_weight: float, terminal_coeff, t: float, T: float,
                     params: ModelParams):
    """Single-factor transform ``E[exp(-q int psi du - w psi_T)|F_t] = exp(alpha - beta psi_t)``.

    ``terminal_coeff`` may be a scalar or an array (real or complex); the
    result has the same shape.
    """
    if factor_index not in (1, 2, 3):
        raise ValueError("factor_index must be 1, 2 or 3")
    tau = _check_times(t, T)
    arr = np.asarray(terminal_coeff)
    alphas, betas = _transform_grid(factor_index, q_weight, arr, [tau], params, t_end=T)
    alpha = alphas[:, 0].reshape(arr.shape)
    beta = betas[:, 0].reshape(arr.shape)
    if arr.ndim == 0:
        return complex(alpha), complex(beta)
    return alpha, beta


def solve_riccati(q_weight: Sequence[float], terminal: Sequence[complex], t: float, T: float,
                  params: ModelParams, *, n_steps: int | None = None) -> AffineTransformResult:
    """Three-factor exponential-affine transform.

    Computes ``E[exp(-int_t^T q.psi du - w.psi_T) | F_t]`` as
    ``exp(alpha - beta.psi_t)``.  ``n_steps`` forces a fixed RK4 step count
    (no refinement); by default the step is halved until the coefficients
    settle to 1e-12.
    """
    if len(q_weight) != 3 or len(terminal) != 3:
        raise ValueError("q_weight and terminal must have three entries")
    tau = _check_times(t, T)
    alpha = 0.0
    betas = []
    for i in range(3):
        al, be = _transform_grid(i + 1, q_weight[i], [terminal[i]], [tau], params,
                                 n_steps=n_steps, t_end=T)
        alpha = alpha + al[0, 0]
        betas.append(be[0, 0])
    if not all(np.isfinite(x) for x in (alpha, *betas)):
        raise NonFinite("non-finite transform coefficients")
    return AffineTransformResult(complex(alpha), *(complex(x) for x in betas))


_DISCOUNT_WEIGHTS = {
    Curve.RISK_FREE: lambda kappa: (-1.0, 1.0, 0.0),
    Curve.RISKY: lambda kappa: (kappa - 1.0, 1.0, 1.0),
}


def bond_coeff_curve(curve: Curve | str, taus, params: ModelParams):
    """Bond coefficients ``(A, B1, B2, B3)`` for many times-to-maturity at once.

    Returns four float arrays of the same length as ``taus`` (which must be
    sorted).  The model is time homogeneous, so ``B(t, T)`` depends on
    ``T - t`` only.
    """
    curve = Curve(curve)
    q = _DISCOUNT_WEIGHTS[curve](params.kappa)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    A = np.zeros(taus.shape)
    Bs = []
    for i in range(3):
        if q[i] == 0.0:
            Bs.append(np.zeros(taus.shape))
            continue
        al, be = _transform_grid(i + 1, q[i], [0.0], taus, params)
        A += al[0].real
        Bs.append(be[0].real.copy())
    return A, Bs[0], Bs[1], Bs[2]


def _bond_coeffs(curve: Curve, t: float, T: float, params: ModelParams) -> BondCoeffs:
    tau = _check_times(t, T)
    if tau == 0.0:
        return BondCoeffs(curve, 0.0, 0.0, 0.0, 0.0)
    A, B1, B2, B3 = bond_coeff_curve(curve, [tau], params)
    return BondCoeffs(curve, float(A[0]), float(B1[0]), float(B2[0]), float(B3[0]))


def riskfree_bond_coeffs(t: float, T: float, params: ModelParams) -> BondCoeffs:
    """``p(t,T) = exp(A - B1 psi1 - B2 psi2)``."""
    return _bond_coeffs(Curve.RISK_FREE, t, T, params)


def risky_bond_coeffs(t: float, T: float, params: ModelParams) -> BondCoeffs:
    """``pbar(t,T) = exp(Abar - B1bar psi1 - B2bar psi2 - B3bar psi3)``."""
    return _bond_coeffs(Curve.RISKY, t, T, params)


def bond_price(curve: Curve | str, state: FactorState, T: float, params: ModelParams) -> float:
    """Risk-free or risky zero-coupon bond price at ``state``."""
    curve = Curve(curve)
    coeffs = _bond_coeffs(curve, state.t, T, params)
    price = coeffs.price(state)
    if not (math.isfinite(price) and price > 0):
        raise NonFinite(f"bond price {price} is not a positive finite number")
    return price


@dataclass(frozen=True)
class RatioCoeffs:
    """``p(T,T+D)/pbar(T,T+D) = exp(-Atilde - kappa B1tilde psi1_T + B3bar psi3_T)``."""

    Atilde: float
    B1tilde: float
    B3bar: float
    kappa: float = field(default=0.0)

    def __iter__(self):
        return iter((self.Atilde, self.B1tilde, self.B3bar))

    def log_ratio(self, psi1, psi3):
        return -self.Atilde - self.kappa * self.B1tilde * psi1 + self.B3bar * psi3


def bond_ratio_coeffs(T: float, Delta: float, params: ModelParams) -> RatioCoeffs:
    """Coefficients of the risk-free / risky bond ratio over ``[T, T + Delta]``.

    Unpacks as ``(Atilde, B1tilde, B3bar)``.
    """
    if not Delta >= 0:
        raise ValueError(f"Delta must be non-negative, got {Delta}")
    if T < 0:
        raise ValueError("T must be non-negative")
    rf = riskfree_bond_coeffs(T, T + Delta, params)
    rk = risky_bond_coeffs(T, T + Delta, params)
    return RatioCoeffs(rk.A - rf.A, rf.B1, rk.B3, params.kappa)


def bond_ratio(state: FactorState, Delta: float, params: ModelParams) -> float:
    """``p(t,t+Delta) / pbar(t,t+Delta)`` evaluated at ``state``."""
    coeffs = bond_ratio_coeffs(state.t, Delta, params)
    return math.exp(coeffs.log_ratio(state.psi1, state.psi3))
