"""Synthetic quotes and two-stage least-squares calibration.

Stage one fits the rate factors (1 and 2) to risk-free zero-coupon prices.
Stage two keeps them fixed and fits the spread factor and ``kappa`` to the
risky FRA rates; the single-curve rates then follow from the stage-one
curve.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from .affine import (
    Curve,
    FactorKind,
    FactorSpec,
    ModelParams,
    bond_coeff_curve,
    bond_ratio_coeffs,
    fixed_resolution,
    validate_params,
)
from .errors import ConfigError, InsufficientData, MulticurveError, NotConverged
from .pricing import (
    adjustment_factor,
    correlation_exponential,
    factor_transform,
    fair_rate_risky,
    fair_rate_single,
)

log = logging.getLogger(__name__)

__all__ = [
    "QuoteSet",
    "StageResult",
    "CalibrationResult",
    "DEFAULT_PILLARS",
    "generate_quotes",
    "objective",
    "calibrate_riskfree",
    "calibrate_spread",
    "calibrate",
    "reprice_errors",
    "refine_joint",
    "kappa_identifiable",
    "adjustment_report",
]

DEFAULT_PILLARS = (0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0)

# box constraints per factor field
_BOUNDS = {
    "a": (1e-6, 1.0),
    "b": (1e-3, 5.0),
    "sigma": (1e-5, 1.0),
    "psi0_gauss": (-1.0, 1.0),
    "psi0_sqrt": (0.0, 1.0),
    "kappa": (-5.0, 5.0),
}


@dataclass(frozen=True)
class QuoteSet:
    """Zero-coupon prices ``(T, p)`` and FRA rate pairs ``(T, Delta, K, Kbar)``."""

    zcb_quotes: tuple[tuple[float, float], ...]
    fra_pairs: tuple[tuple[float, float, float, float], ...]
    noise_sd: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        zcb = tuple((float(T), float(p)) for T, p in self.zcb_quotes)
        fra = tuple(tuple(float(x) for x in row) for row in self.fra_pairs)
        object.__setattr__(self, "zcb_quotes", zcb)
        object.__setattr__(self, "fra_pairs", fra)
        mats = [T for T, _ in zcb]
        if any(b <= a for a, b in zip(mats, mats[1:])):
            raise ConfigError("zero-coupon maturities must be strictly increasing")
        if any(T <= 0 for T in mats):
            raise ConfigError("zero-coupon maturities must be positive")
        if any(not 0 < p <= 1.5 for _, p in zcb):
            raise ConfigError("zero-coupon prices must lie in (0, 1.5]")
        if any(len(row) != 4 or row[1] <= 0 or row[0] <= 0 for row in fra):
            raise ConfigError("FRA quotes need T > 0 and Delta > 0")

    @property
    def maturities(self) -> np.ndarray:
        return np.array([T for T, _ in self.zcb_quotes])

    @property
    def log_prices(self) -> np.ndarray:
        return np.log([p for _, p in self.zcb_quotes])

    def to_dict(self) -> dict:
        return {
            "zcb_quotes": [{"T": T, "price": p} for T, p in self.zcb_quotes],
            "fra_pairs": [
                {"T": T, "Delta": D, "K": K, "Kbar": Kb} for T, D, K, Kb in self.fra_pairs
            ],
            "noise_sd": self.noise_sd,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuoteSet":
        allowed = {"zcb_quotes", "fra_pairs", "noise_sd", "seed"}
        if set(data) - allowed:
            raise ConfigError(f"unknown quote keys {sorted(set(data) - allowed)}")
        try:
            zcb = [(q["T"], q["price"]) for q in data["zcb_quotes"]]
            fra = [(q["T"], q["Delta"], q["K"], q["Kbar"]) for q in data["fra_pairs"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed quote document: {exc}") from exc
        return cls(zcb, fra, float(data.get("noise_sd", 0.0)), data.get("seed"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["[zcb]"])
        w.writerow(["T", "price"])
        for T, p in self.zcb_quotes:
            w.writerow([_fmt(T), _fmt(p)])
        w.writerow(["[fra]"])
        w.writerow(["T", "Delta", "K", "Kbar"])
        for row in self.fra_pairs:
            w.writerow([_fmt(x) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "QuoteSet":
        zcb, fra, section = [], [], None
        for row in csv.reader(io.StringIO(text)):
            if not row or not row[0].strip():
                continue
            head = row[0].strip()
            if head in ("[zcb]", "[fra]"):
                section = head
                continue
            if head in ("T",):
                continue
            try:
                vals = [float(x) for x in row]
            except ValueError as exc:
                raise ConfigError(f"bad quote row {row}") from exc
            if section == "[zcb]" and len(vals) == 2:
                zcb.append(tuple(vals))
            elif section == "[fra]" and len(vals) == 4:
                fra.append(tuple(vals))
            else:
                raise ConfigError(f"quote row {row} outside a valid section")
        return cls(zcb, fra)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def generate_quotes(params_true: ModelParams, maturities: Sequence[float], tenors: Sequence[float],
                    noise_sd: float = 0.0, seed: int = 0,
                    zcb_maturities: Sequence[float] | None = None) -> QuoteSet:
    """Model-implied quotes, optionally with Gaussian noise on rates.

    Zero-coupon quotes cover ``zcb_maturities`` (default: the standard
    pillars plus every FRA start and end date); noise is added to the zero
    rate ``-log(p)/T`` and the price is rebuilt from the noisy rate.
    """
    validate_params(params_true)
    if noise_sd < 0:
        raise ConfigError("noise_sd must be >= 0")
    state = params_true.initial_state()
    if zcb_maturities is None:
        dates = set(DEFAULT_PILLARS) | {float(T) for T in maturities}
        dates |= {float(T) + float(D) for T in maturities for D in tenors}
        zcb_maturities = sorted(dates)
    zcb_maturities = np.asarray(sorted(zcb_maturities), dtype=float)
    A, B1, B2, _ = bond_coeff_curve(Curve.RISK_FREE, zcb_maturities, params_true)
    zero_rates = -(A - B1 * state.psi1 - B2 * state.psi2) / zcb_maturities

    rng = np.random.default_rng(seed)
    if noise_sd > 0:
        zero_rates = zero_rates + noise_sd * rng.standard_normal(zero_rates.size)
    zcb = [(T, math.exp(-y * T)) for T, y in zip(zcb_maturities, zero_rates)]

    fra = []
    for T in maturities:
        for D in tenors:
            K = fair_rate_single(state, T, D, params_true)
            Kbar = fair_rate_risky(state, T, D, params_true)
            if noise_sd > 0:
                K += noise_sd * rng.standard_normal()
                Kbar += noise_sd * rng.standard_normal()
            fra.append((T, D, K, Kbar))
    return QuoteSet(zcb, fra, float(noise_sd), int(seed))


# ---------------------------------------------------------------------------
# parameter vectors


def _factor_bounds(kind: FactorKind):
    psi = _BOUNDS["psi0_gauss"] if kind is FactorKind.GAUSSIAN else _BOUNDS["psi0_sqrt"]
    return [_BOUNDS["a"], _BOUNDS["b"], _BOUNDS["sigma"], psi]


def _project_factor(x, kind: FactorKind) -> FactorSpec:
    lo, hi = zip(*_factor_bounds(kind))
    a, b, sigma, psi0 = np.clip(x, lo, hi)
    if kind is FactorKind.SQUARE_ROOT and a < 0.5 * sigma**2:
        a = 0.5 * sigma**2
    return FactorSpec(kind, float(a), float(b), float(sigma), float(psi0))


def _factor_vec(spec: FactorSpec) -> list[float]:
    return [spec.a, spec.b, spec.sigma, spec.psi0]


def _riskfree_from_vec(x, base: ModelParams) -> ModelParams:
    return ModelParams(
        _project_factor(x[:4], FactorKind.GAUSSIAN),
        _project_factor(x[4:8], FactorKind.SQUARE_ROOT),
        base.factor3,
        base.kappa,
    )


def _spread_from_vec(x, base: ModelParams) -> ModelParams:
    kappa = float(np.clip(x[4], *_BOUNDS["kappa"]))
    return ModelParams(base.factor1, base.factor2, _project_factor(x[:4], FactorKind.SQUARE_ROOT), kappa)


# ---------------------------------------------------------------------------
# residuals


def _zcb_residuals(params: ModelParams, quotes: QuoteSet) -> np.ndarray:
    taus = quotes.maturities
    A, B1, B2, _ = bond_coeff_curve(Curve.RISK_FREE, taus, params)
    f1, f2 = params.factor1, params.factor2
    return (A - B1 * f1.psi0 - B2 * f2.psi0) - quotes.log_prices


def _risky_rates(params: ModelParams, pairs) -> np.ndarray:
    """Risky fair rates at time 0 for ``(T, Delta)`` pairs, sharing Riccati work."""
    state = params.initial_state()
    T_all = sorted({T for T, D in pairs} | {T + D for T, D in pairs})
    A, B1, B2, _ = bond_coeff_curve(Curve.RISK_FREE, T_all, params)
    log_p = dict(zip(T_all, A - B1 * state.psi1 - B2 * state.psi2))
    ratio = {D: bond_ratio_coeffs(0.0, D, params) for D in {D for _, D in pairs}}
    out = []
    for T, D in pairs:
        Atilde, B1tilde, B3bar = ratio[D]
        a3, b3 = factor_transform(3, 0.0, -B3bar, 0.0, T, params)
        a1, b1 = factor_transform(1, 0.0, params.kappa * B1tilde, 0.0, T, params)
        log_ad = -Atilde + (a3 - b3 * state.psi3).real + (a1 - b1 * state.psi1).real
        nu = math.exp(log_p[T] - log_p[T + D])
        nb = nu * math.exp(log_ad) * correlation_exponential(0.0, T, D, params)
        out.append((nb - 1.0) / D)
    return np.array(out)


def _fra_residuals(params: ModelParams, quotes: QuoteSet, which: str = "both") -> np.ndarray:
    pairs = [(T, D) for T, D, _, _ in quotes.fra_pairs]
    parts = []
    if which in ("single", "both"):
        state = params.initial_state()
        K = np.array([fair_rate_single(state, T, D, params) for T, D in pairs])
        parts.append(K - np.array([row[2] for row in quotes.fra_pairs]))
    if which in ("risky", "both"):
        parts.append(_risky_rates(params, pairs) - np.array([row[3] for row in quotes.fra_pairs]))
    return np.concatenate(parts) if parts else np.zeros(0)


def objective(params: ModelParams, quotes: QuoteSet,
              weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
    """Weighted sum of squared residuals: zcb log-prices, single and risky FRA rates.

    Pricing failures (explosions, invalid parameters) give ``inf``.
    """
    try:
        validate_params(params)
        r_zcb = _zcb_residuals(params, quotes) if quotes.zcb_quotes else np.zeros(0)
        if quotes.fra_pairs:
            n = len(quotes.fra_pairs)
            r_fra = _fra_residuals(params, quotes, "both")
            r_k, r_kbar = r_fra[:n], r_fra[n:]
        else:
            r_k = r_kbar = np.zeros(0)
    except (MulticurveError, ValueError, OverflowError):
        return math.inf
    total = (weights[0] * np.sum(r_zcb**2) + weights[1] * np.sum(r_k**2)
             + weights[2] * np.sum(r_kbar**2))
    return float(total) if np.isfinite(total) else math.inf


# ---------------------------------------------------------------------------
# optimisation driver


@dataclass
class StageResult:
    params: ModelParams
    objective_value: float
    residual_norm: float
    n_iterations: int
    n_evaluations: int
    converged: bool
    history: list[float] = field(default_factory=list)
    #: set by the spread stage only
    kappa_identifiable: bool | None = None

    def diagnostics(self, name: str) -> dict:
        out = {
            "stage": name,
            "objective_value": self.objective_value,
            "residual_norm": self.residual_norm,
            "n_iterations": self.n_iterations,
            "n_evaluations": self.n_evaluations,
            "converged": self.converged,
        }
        if self.kappa_identifiable is not None:
            out["kappa_identifiable"] = self.kappa_identifiable
        return out


_PENALTY = 1e6
# steps per unit horizon while optimising; keeps residuals smooth in the parameters
_RESOLUTION = 128
# Levenberg-Marquardt restarts and the residual size at which they stop early
_LM_ROUNDS = 3
_LM_TARGET = 1e-10


def _fit(residual_fn, to_params, x0, bounds, *, seed: int, n_starts: int,
         max_iter: int, polish: bool) -> StageResult:
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def safe_residuals(x):
        try:
            with fixed_resolution(_RESOLUTION):
                r = residual_fn(to_params(x))
        except (MulticurveError, ValueError, OverflowError):
            return None
        return r if np.all(np.isfinite(r)) else None

    def scalar(x):
        r = safe_residuals(x)
        return math.inf if r is None else float(np.dot(r, r))

    x0 = np.clip(np.asarray(x0, dtype=float), lo, hi)
    r0 = safe_residuals(x0)
    n_res = len(residual_fn(to_params(x0))) if r0 is None else r0.size

    def vector(x):
        r = safe_residuals(x)
        return np.full(n_res, _PENALTY) if r is None else r

    f0 = scalar(x0)
    if f0 < 1e-26:
        return StageResult(to_params(x0), f0, math.sqrt(f0), 0, 1, True, [f0])

    rng = np.random.default_rng(seed)
    starts = [x0]
    for _ in range(n_starts - 1):
        jitter = x0 * np.exp(0.1 * rng.standard_normal(x0.size)) + 1e-4 * rng.standard_normal(x0.size)
        starts.append(np.clip(jitter, lo, hi))

    best: StageResult | None = None
    for start in starts:
        history: list[float] = []
        evals = 0

        def counted(x):
            nonlocal evals
            evals += 1
            return scalar(x)

        if max_iter == 0:
            x, f, iters, converged = start, scalar(start), 0, False
        else:
            res = minimize(
                counted, start, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                callback=lambda xk: history.append(scalar(xk)),
                options={"maxiter": max_iter, "maxfev": 4 * max_iter,
                         "xatol": 1e-12, "fatol": 1e-28, "adaptive": True},
            )
            x, f = res.x, float(res.fun)
            iters = int(res.nit)
            converged = bool(res.success)
        if polish and math.isfinite(f):
            # Levenberg-Marquardt copes with the near-flat valleys far better than
            # the bounded trust-region solver; the parameter maps already project
            # onto the box, so it can run unbounded.
            xs = np.clip(x, lo, hi)
            if n_res >= xs.size:
                # a fresh start resets the damping, which has usually grown large
                # by the time the evaluation budget runs out in a curved valley
                nfev = 0
                for _ in range(_LM_ROUNDS):
                    ls = least_squares(vector, xs, method="lm",
                                       x_scale=np.maximum(np.abs(xs), 1e-6), diff_step=1e-6,
                                       ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=400 * xs.size)
                    nfev += int(ls.nfev)
                    xs = ls.x
                    if ls.status > 0 or np.max(np.abs(ls.fun)) < _LM_TARGET:
                        break
                ls.nfev = nfev
            else:
                ls = least_squares(vector, xs, bounds=(lo, hi), method="trf", x_scale="jac",
                                   ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=200 * xs.size)
            ls.x = np.clip(ls.x, lo, hi)
            f_ls = scalar(ls.x)
            evals += int(ls.nfev)
            if f_ls <= f:
                x, f = ls.x, f_ls
                history.append(f)
                converged = converged or ls.status > 0 or math.sqrt(f_ls) < _LM_TARGET
                iters += int(ls.nfev)
        stage = StageResult(to_params(x), f, math.sqrt(f) if math.isfinite(f) else math.inf,
                            iters, evals, converged, history)
        log.debug("start finished: objective %.3e after %d evaluations", f, evals)
        if best is None or stage.objective_value < best.objective_value:
            best = stage
    assert best is not None
    if not math.isfinite(best.objective_value):
        raise NotConverged("no start produced a finite objective")
    return best


def calibrate_riskfree(quotes: QuoteSet, initial_guess: ModelParams, *, seed: int = 0,
                       n_starts: int = 3, max_iter: int = 1500, polish: bool = True) -> StageResult:
    """Fit ``(a, b, sigma, psi0)`` of factors 1 and 2 to zero-coupon log-prices."""
    if len(quotes.zcb_quotes) < 6:
        raise InsufficientData(f"need >= 6 zero-coupon quotes, got {len(quotes.zcb_quotes)}")
    bounds = _factor_bounds(FactorKind.GAUSSIAN) + _factor_bounds(FactorKind.SQUARE_ROOT)
    x0 = _factor_vec(initial_guess.factor1) + _factor_vec(initial_guess.factor2)
    return _fit(
        lambda p: _zcb_residuals(p, quotes),
        lambda x: _riskfree_from_vec(x, initial_guess),
        x0, bounds, seed=seed, n_starts=n_starts, max_iter=max_iter, polish=polish,
    )


def calibrate_spread(quotes: QuoteSet, riskfree_params: ModelParams, initial_guess: ModelParams,
                     *, seed: int = 0, n_starts: int = 3, max_iter: int = 1000,
                     polish: bool = True) -> StageResult:
    """Fit factor 3 and ``kappa`` to the risky FRA rates, rate factors held fixed."""
    if len(quotes.fra_pairs) < 5:
        raise InsufficientData(f"need >= 5 FRA pairs, got {len(quotes.fra_pairs)}")
    base = ModelParams(riskfree_params.factor1, riskfree_params.factor2,
                       initial_guess.factor3, initial_guess.kappa)
    bounds = _factor_bounds(FactorKind.SQUARE_ROOT) + [_BOUNDS["kappa"]]
    x0 = _factor_vec(initial_guess.factor3) + [initial_guess.kappa]
    stage = _fit(
        lambda p: _fra_residuals(p, quotes, "risky"),
        lambda x: _spread_from_vec(x, base),
        x0, bounds, seed=seed, n_starts=n_starts, max_iter=max_iter, polish=polish,
    )
    stage.kappa_identifiable = kappa_identifiable(quotes)
    if not stage.kappa_identifiable:
        log.warning("all FRA quotes share one reset date: kappa and the spread level are confounded")
    return stage


def kappa_identifiable(quotes: QuoteSet) -> bool:
    """False when every FRA quote has the same reset date.

    The correlation exponential then enters as one constant per tenor and
    trades off against the factor-3 level.
    """
    return len({row[0] for row in quotes.fra_pairs}) > 1


@dataclass
class CalibrationResult:
    params_hat: ModelParams
    objective_value: float
    stage_diagnostics: list[dict]
    converged: bool
    kappa_identifiable: bool
    max_zcb_error: float
    max_fra_error: float
    adjustment_report: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params_hat": self.params_hat.to_dict(),
            "objective_value": self.objective_value,
            "stage_diagnostics": self.stage_diagnostics,
            "converged": self.converged,
            "kappa_identifiable": self.kappa_identifiable,
            "max_zcb_log_price_error": self.max_zcb_error,
            "max_fra_rate_error": self.max_fra_error,
            "adjustment_report": self.adjustment_report,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def reprice_errors(params: ModelParams, quotes: QuoteSet) -> tuple[float, float]:
    """Largest absolute zcb log-price error and largest absolute FRA rate error."""
    zcb = np.max(np.abs(_zcb_residuals(params, quotes))) if quotes.zcb_quotes else 0.0
    fra = np.max(np.abs(_fra_residuals(params, quotes, "both"))) if quotes.fra_pairs else 0.0
    return float(zcb), float(fra)


def adjustment_report(params: ModelParams, quotes: QuoteSet) -> list[dict]:
    """Observed risky/single ratio per quote next to its model split.

    ``(Kbar + 1/Delta) / (K + 1/Delta)`` is what the quotes imply for the
    product of the adjustment factor and the correlation exponential; the
    model columns show how the fitted parameters split it.  Diagnostic only.
    """
    state = params.initial_state()
    rows = []
    for T, D, K, Kbar in quotes.fra_pairs:
        rows.append({
            "T": T,
            "Delta": D,
            "observed_ratio": (Kbar + 1.0 / D) / (K + 1.0 / D),
            "adjustment": adjustment_factor(state, T, D, params),
            "corr_exponential": correlation_exponential(0.0, T, D, params),
        })
    return rows


def _joint_vec(params: ModelParams) -> list[float]:
    return (_factor_vec(params.factor1) + _factor_vec(params.factor2)
            + _factor_vec(params.factor3) + [params.kappa])


def _joint_from_vec(x) -> ModelParams:
    return ModelParams(
        _project_factor(x[:4], FactorKind.GAUSSIAN),
        _project_factor(x[4:8], FactorKind.SQUARE_ROOT),
        _project_factor(x[8:12], FactorKind.SQUARE_ROOT),
        float(np.clip(x[12], *_BOUNDS["kappa"])),
    )


def refine_joint(quotes: QuoteSet, start: ModelParams) -> StageResult:
    """Least-squares polish of all parameters on zcb log-prices and both FRA rates.

    The rate-factor fit leaves near-flat directions (the curve pins combinations
    of levels and initial values, not each one), which the spread stage
    cannot undo; this final pass lets both blocks move together.
    """
    bounds = (_factor_bounds(FactorKind.GAUSSIAN) + _factor_bounds(FactorKind.SQUARE_ROOT)
              + _factor_bounds(FactorKind.SQUARE_ROOT) + [_BOUNDS["kappa"]])

    def residuals(p):
        return np.concatenate([_zcb_residuals(p, quotes), _fra_residuals(p, quotes, "both")])

    return _fit(residuals, _joint_from_vec, _joint_vec(start), bounds,
                seed=0, n_starts=1, max_iter=0, polish=True)


def calibrate(quotes: QuoteSet, initial_guess: ModelParams, *, seed: int = 0,
              n_starts: int = 3, refine: bool = True) -> CalibrationResult:
    """Run both stages (plus the joint polish); flag single-reset-date quote sets."""
    stage1 = calibrate_riskfree(quotes, initial_guess, seed=seed, n_starts=n_starts)
    stage2 = calibrate_spread(quotes, stage1.params, initial_guess, seed=seed, n_starts=n_starts)
    stages = [stage1.diagnostics("riskfree"), stage2.diagnostics("spread")]
    params_hat = stage2.params
    if refine:
        stage3 = refine_joint(quotes, params_hat)
        stages.append(stage3.diagnostics("joint"))
        params_hat = stage3.params
    params_hat = validate_params(params_hat)
    zcb_err, fra_err = reprice_errors(params_hat, quotes)
    return CalibrationResult(
        params_hat,
        objective(params_hat, quotes),
        stages,
        stage3.converged if refine else stage1.converged and stage2.converged,
        bool(stage2.kappa_identifiable),
        zcb_err,
        fra_err,
        adjustment_report(params_hat, quotes),
    )
