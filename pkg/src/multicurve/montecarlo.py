"""Seeded Monte Carlo simulation of the three factors and pricing oracles.

Paths are generated in fixed-size chunks; each chunk draws from its own
``SeedSequence`` child (and one grandchild per factor), so an estimate
depends only on ``(seed, config, params)`` and never on how many workers
processed the chunks or in which order.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .affine import (
    Curve,
    FactorKind,
    ModelParams,
    bond_coeff_curve,
    bond_price,
    bond_ratio_coeffs,
    validate_params,
)
from .errors import InvalidConfig
from .pricing import CapletContract, FraContract

__all__ = [
    "SimScheme",
    "SimConfig",
    "PathSet",
    "McEstimate",
    "FraLegsEstimate",
    "time_grid",
    "simulate",
    "mc_bond_price",
    "mc_adjustment_factor",
    "mc_fra_legs",
    "mc_caplet",
    "mc_caplets",
]


class SimScheme(str, enum.Enum):
    EXACT = "exact"
    EULER = "euler"


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``scheme="exact"`` samples Ornstein-Uhlenbeck and noncentral chi-square
    transitions; ``"euler"`` is full-truncation Euler.  ``chunk_size`` is
    part of the reproducibility contract: changing it changes the draws.
    """

    n_paths: int = 100_000
    n_steps_per_year: int = 64
    seed: int = 0
    scheme: SimScheme = SimScheme.EXACT
    chunk_size: int = 1 << 15
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scheme", SimScheme(self.scheme))
        if int(self.n_paths) < 1:
            raise InvalidConfig("n_paths must be >= 1")
        if int(self.n_steps_per_year) < 4:
            raise InvalidConfig("n_steps_per_year must be >= 4")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        if int(self.chunk_size) < 1 or int(self.n_jobs) < 1:
            raise InvalidConfig("chunk_size and n_jobs must be >= 1")


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_paths: int

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "McEstimate":
        n = samples.size
        mean = float(np.mean(samples))
        se = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(mean, se, n)

    def z_score(self, value: float) -> float:
        diff = self.mean - value
        if self.std_error == 0.0:
            return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
        return diff / self.std_error

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "n_paths": self.n_paths}


@dataclass(frozen=True)
class FraLegsEstimate:
    nu_bar: McEstimate
    value: McEstimate


@dataclass(frozen=True)
class PathSet:
    """Simulated factor values, arrays of shape ``(n_paths, len(times))``."""

    times: np.ndarray
    psi1: np.ndarray
    psi2: np.ndarray
    psi3: np.ndarray
    seed: int
    scheme: SimScheme

    def factor(self, index: int) -> np.ndarray:
        return (self.psi1, self.psi2, self.psi3)[index - 1]

    def to_csv(self, target) -> None:
        """One block per factor: a ``times`` row, then one row per path.

        ``target`` is a path or an open text stream; numbers carry 17
        significant digits.
        """
        if isinstance(target, (str, os.PathLike)):
            with open(target, "w", newline="") as fh:
                self.to_csv(fh)
            return
        w = csv.writer(target, lineterminator="\n")
        w.writerow(["# seed", self.seed, "scheme", self.scheme.value])
        for i in (1, 2, 3):
            w.writerow([f"factor{i}", *(format(float(t), ".17g") for t in self.times)])
            for row in self.factor(i):
                w.writerow(["", *(format(float(x), ".17g") for x in row)])


def time_grid(horizon: float, n_steps_per_year: int, checkpoints: Sequence[float] = ()) -> np.ndarray:
    """Uniform-per-segment grid on ``[0, horizon]`` containing every checkpoint exactly."""
    if not horizon > 0:
        raise InvalidConfig(f"horizon must be > 0, got {horizon}")
    knots = sorted({0.0, float(horizon), *(float(c) for c in checkpoints)})
    if knots[0] < 0 or knots[-1] > horizon:
        raise InvalidConfig("checkpoints must lie in [0, horizon]")
    pieces = [np.array([0.0])]
    for lo, hi in zip(knots[:-1], knots[1:]):
        n = max(1, math.ceil((hi - lo) * n_steps_per_year - 1e-9))
        seg = np.linspace(lo, hi, n + 1)[1:]
        seg[-1] = hi
        pieces.append(seg)
    return np.concatenate(pieces)


# ---------------------------------------------------------------------------
# transition kernels


def _ou_step(x, spec, dt, rng, scheme):
    if scheme is SimScheme.EXACT:
        e = math.exp(-spec.b * dt)
        sd = spec.sigma * math.sqrt(-math.expm1(-2.0 * spec.b * dt) / (2.0 * spec.b))
        return x * e + spec.mean_level * (1.0 - e) + sd * rng.standard_normal(x.shape)
    return x + (spec.a - spec.b * x) * dt + spec.sigma * math.sqrt(dt) * rng.standard_normal(x.shape)


def _sqrt_step(x, spec, dt, rng, scheme):
    """Returns the new internal state; callers observe ``max(state, 0)``."""
    if scheme is SimScheme.EXACT:
        e = math.exp(-spec.b * dt)
        c = spec.sigma**2 * (-math.expm1(-spec.b * dt)) / (4.0 * spec.b)
        df = 4.0 * spec.a / spec.sigma**2
        return c * rng.noncentral_chisquare(df, x * e / c)
    xp = np.maximum(x, 0.0)
    return (
        x + (spec.a - spec.b * xp) * dt
        + spec.sigma * np.sqrt(xp * dt) * rng.standard_normal(x.shape)
    )


@dataclass
class _ChunkOutput:
    psi: np.ndarray       # (3, n_record, n)
    integral: np.ndarray  # (3, n_record, n), trapezoidal int_0^t psi du


def _run_chunk(params: ModelParams, grid: np.ndarray, n: int, seed_seq: np.random.SeedSequence,
               scheme: SimScheme, record: np.ndarray) -> _ChunkOutput:
    rngs = [np.random.Generator(np.random.PCG64(s)) for s in seed_seq.spawn(3)]
    state = [np.full(n, f.psi0, dtype=float) for f in params.factors]
    observed = [s.copy() for s in state]
    integral = np.zeros((3, n))
    psi_out = np.empty((3, record.size, n))
    int_out = np.empty((3, record.size, n))
    slot = 0
    if record.size and record[0] == 0:
        for i in range(3):
            psi_out[i, 0] = observed[i]
            int_out[i, 0] = 0.0
        slot = 1
    for k in range(1, grid.size):
        dt = grid[k] - grid[k - 1]
        for i, spec in enumerate(params.factors):
            if spec.kind is FactorKind.GAUSSIAN:
                state[i] = _ou_step(state[i], spec, dt, rngs[i], scheme)
                new = state[i]
            else:
                state[i] = _sqrt_step(state[i], spec, dt, rngs[i], scheme)
                new = np.maximum(state[i], 0.0)
            integral[i] += 0.5 * dt * (observed[i] + new)
            observed[i] = new
        if slot < record.size and record[slot] == k:
            for i in range(3):
                psi_out[i, slot] = observed[i]
                int_out[i, slot] = integral[i]
            slot += 1
    return _ChunkOutput(psi_out, int_out)


def _chunks(config: SimConfig):
    n_chunks = -(-int(config.n_paths) // int(config.chunk_size))
    seeds = np.random.SeedSequence(int(config.seed)).spawn(n_chunks)
    sizes = [int(config.chunk_size)] * n_chunks
    sizes[-1] = int(config.n_paths) - int(config.chunk_size) * (n_chunks - 1)
    return list(zip(sizes, seeds))


def _map_chunks(params, config, grid, record, fn: Callable[[_ChunkOutput], object]) -> list:
    validate_params(params)

    def work(item):
        n, seed_seq = item
        return fn(_run_chunk(params, grid, n, seed_seq, config.scheme, record))

    items = _chunks(config)
    if config.n_jobs == 1 or len(items) == 1:
        return [work(it) for it in items]
    with ThreadPoolExecutor(max_workers=int(config.n_jobs)) as pool:
        return list(pool.map(work, items))


def simulate(params: ModelParams, config: SimConfig, horizon: float,
             checkpoint_times: Sequence[float] = ()) -> PathSet:
    """Full factor paths on the simulation grid (which contains every checkpoint)."""
    grid = time_grid(horizon, config.n_steps_per_year, checkpoint_times)
    record = np.arange(grid.size)
    outs = _map_chunks(params, config, grid, record, lambda out: out.psi)
    psi = np.concatenate(outs, axis=2)
    return PathSet(grid, psi[0].T.copy(), psi[1].T.copy(), psi[2].T.copy(),
                   int(config.seed), config.scheme)


def _terminal_estimates(params, config, T, sample_fn) -> list[np.ndarray]:
    grid = time_grid(T, config.n_steps_per_year)
    record = np.array([grid.size - 1])

    def fn(out: _ChunkOutput):
        res = sample_fn(out.psi[:, 0], out.integral[:, 0])
        return res if isinstance(res, tuple) else (res,)

    parts = _map_chunks(params, config, grid, record, fn)
    return [np.concatenate([p[j] for p in parts]) for j in range(len(parts[0]))]


def mc_bond_price(curve: Curve | str, T: float, params: ModelParams, config: SimConfig) -> McEstimate:
    """``E[exp(-int_0^T r du)]`` or ``E[exp(-int_0^T (r + s) du)]``, trapezoidal in time."""
    curve = Curve(curve)
    if T == 0:
        return McEstimate(1.0, 0.0, int(config.n_paths))
    kappa = params.kappa

    def sample(psi, integ):
        if curve is Curve.RISK_FREE:
            return np.exp(-(integ[1] - integ[0]))
        return np.exp(-((kappa - 1.0) * integ[0] + integ[1] + integ[2]))

    (samples,) = _terminal_estimates(params, config, T, sample)
    return McEstimate.from_samples(samples)


def mc_adjustment_factor(T: float, Delta: float, params: ModelParams, config: SimConfig) -> McEstimate:
    """Average of the risk-free / risky bond ratio over simulated ``psi_T``."""
    ratio = bond_ratio_coeffs(T, Delta, params)
    (samples,) = _terminal_estimates(
        params, config, T, lambda psi, integ: np.exp(ratio.log_ratio(psi[0], psi[2]))
    )
    return McEstimate.from_samples(samples)


def _forward_pieces(T, Delta, params):
    ratio = bond_ratio_coeffs(T, Delta, params)
    A, B1, B2, _ = (x[0] for x in bond_coeff_curve(Curve.RISK_FREE, [Delta], params))

    def pieces(psi, integ):
        discount = np.exp(-(integ[1] - integ[0]))
        p_fwd = np.exp(A - B1 * psi[0] - B2 * psi[1])
        # p / pbar at T: the payoff 1/pbar discounted to T by p
        inv_pbar_times_p = np.exp(ratio.log_ratio(psi[0], psi[2]))
        return discount, p_fwd, inv_pbar_times_p

    return pieces


def mc_fra_legs(contract: FraContract, params: ModelParams, config: SimConfig) -> FraLegsEstimate:
    """``nu_bar`` and the FRA value from simulated state plus exponential-affine bonds at ``T``."""
    T, D = contract.T, contract.Delta
    pieces = _forward_pieces(T, D, params)
    p_end = bond_price(Curve.RISK_FREE, params.initial_state(), T + D, params)
    Ktilde = 1.0 + D * contract.K

    def sample(psi, integ):
        disc, p_fwd, ratio = pieces(psi, integ)
        return disc * ratio / p_end, contract.N * disc * (ratio - Ktilde * p_fwd)

    nb, value = _terminal_estimates(params, config, T, sample)
    return FraLegsEstimate(McEstimate.from_samples(nb), McEstimate.from_samples(value))


def mc_caplet(contract: CapletContract, params: ModelParams, config: SimConfig) -> McEstimate:
    """Caplet price per unit notional: ``E[exp(-int_0^T r) p(T,T+D) (1/pbar - Ktilde)^+]``."""
    pieces = _forward_pieces(contract.T, contract.Delta, params)
    Ktilde = contract.Ktilde

    def sample(psi, integ):
        disc, p_fwd, ratio = pieces(psi, integ)
        return disc * np.maximum(ratio - Ktilde * p_fwd, 0.0)

    (samples,) = _terminal_estimates(params, config, contract.T, sample)
    return McEstimate.from_samples(samples)


def mc_caplets(contracts: Sequence[CapletContract], params: ModelParams,
               config: SimConfig) -> list[McEstimate]:
    """Several caplets sharing one reset date and tenor, priced on the same paths."""
    if not contracts:
        return []
    T, D = contracts[0].T, contracts[0].Delta
    if any(c.T != T or c.Delta != D for c in contracts):
        raise InvalidConfig("mc_caplets requires a common reset date and tenor")
    pieces = _forward_pieces(T, D, params)

    def sample(psi, integ):
        disc, p_fwd, ratio = pieces(psi, integ)
        return tuple(disc * np.maximum(ratio - c.Ktilde * p_fwd, 0.0) for c in contracts)

    return [McEstimate.from_samples(s) for s in _terminal_estimates(params, config, T, sample)]
