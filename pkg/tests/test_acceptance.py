"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are
written to the terminal even when output capture is on.
"""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from multicurve.affine import (
    Curve,
    FactorState,
    ModelParams,
    bond_price,
    riskfree_bond_coeffs,
    risky_bond_coeffs,
)
from multicurve.calibration import calibrate, generate_quotes
from multicurve.cli import main
from multicurve.montecarlo import (
    SimConfig,
    mc_adjustment_factor,
    mc_bond_price,
    mc_caplets,
    mc_fra_legs,
    simulate,
)
from multicurve.pricing import (
    CapletContract,
    FraContract,
    QuadratureConfig,
    adjustment_factor,
    caplet_fourier,
    caplet_price,
    correlation_exponential,
    fair_rate_risky,
    fair_rate_single,
    forward_mgf,
    fra_price,
    nu_bar,
    nu_single_curve,
)

from conftest import deterministic_integral, deterministic_params, make_params

# (T, Delta, kappa) grid shared by the decomposition checks
GRID_T = (0.5, 1.0, 2.0)
GRID_DELTA = (0.25, 0.5, 1.0)
GRID_KAPPA = (-0.5, 0.0, 0.5, 1.0)

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.json"


@pytest.fixture
def report(capsys):
    """Print ``criterion N: PASS|FAIL detail`` past capture, then assert."""

    def emit(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, f"criterion {number} failed: {detail}"

    return emit


@pytest.fixture(scope="module")
def grid_states():
    rng = np.random.default_rng(7)
    return [FactorState(0.0, rng.uniform(-0.02, 0.03), rng.uniform(0.005, 0.06),
                        rng.uniform(0.0, 0.03)) for _ in range(2)]


def grid():
    return itertools.product(GRID_T, GRID_DELTA, GRID_KAPPA)


class TestAcceptance:
    def test_01_riccati_structure(self, report):
        worst_struct = worst_closed = 0.0
        for kappa, b1, tau in itertools.product((-1.0, -0.5, 0.0, 0.5, 1.0, 1.5), (0.05, 0.5, 2.0),
                                                (0.25, 1.0, 10.0)):
            p = make_params(kappa=kappa, b1=b1)
            rf = riskfree_bond_coeffs(0.0, tau, p)
            rk = risky_bond_coeffs(0.0, tau, p)
            worst_struct = max(worst_struct, abs(rk.B1 - (1 - kappa) * rf.B1), abs(rk.B2 - rf.B2))
            closed = math.expm1(-b1 * tau) / b1
            worst_closed = max(worst_closed, abs(rf.B1 - closed))
        ok = worst_struct < 1e-9 and worst_closed < 1e-10
        report(1, "Riccati structural suite", ok,
               f"structure {worst_struct:.1e} < 1e-9, closed form {worst_closed:.1e} < 1e-10")

    def test_02_decomposition_identity(self, report, grid_states):
        worst = 0.0
        for T, D, kappa in grid():
            p = make_params(kappa=kappa)
            for s in grid_states:
                direct = nu_bar(s, T, D, p, method="direct")
                decomposed = nu_bar(s, T, D, p, method="decomposition")
                worst = max(worst, abs(direct - decomposed) / direct)
        report(2, "nu_bar direct equals decomposition", worst < 1e-8, f"max rel {worst:.1e} < 1e-8")

    def test_03_correlation_exponential_quadrature(self, report):
        worst = 0.0
        for T, D, kappa in grid():
            p = make_params(kappa=kappa)
            f1 = p.factor1
            b = f1.b

            def B1(u):
                return math.expm1(-b * u) / b

            integral = quad(lambda u: B1(T - u) * math.exp(-b * (T - u)), 0.0, T,
                            epsabs=1e-15, epsrel=1e-13)[0]
            numeric = math.exp(kappa * f1.sigma ** 2 * B1(D) * integral)
            worst = max(worst, abs(correlation_exponential(0.0, T, D, p) - numeric))
        report(3, "correlation exponential closed form vs quadrature", worst < 1e-12,
               f"max abs {worst:.1e} < 1e-12")

    def test_04_zero_kappa_ordering(self, report, grid_states):
        failures = []
        p = make_params(kappa=0.0)
        for T, D in itertools.product(GRID_T, GRID_DELTA):
            for s in grid_states:
                checks = {
                    "corr": correlation_exponential(0.0, T, D, p) == 1.0,
                    "Ad": adjustment_factor(s, T, D, p) >= 1.0,
                    "nu": nu_bar(s, T, D, p) >= nu_single_curve(s, T, D, p),
                    "K": fair_rate_risky(s, T, D, p) >= fair_rate_single(s, T, D, p),
                }
                failures += [(T, D, name) for name, ok in checks.items() if not ok]
        report(4, "kappa = 0 ordering", not failures, f"{len(failures)} violations")

    def test_05_mgf_bridge(self, report):
        worst0 = worst1 = 0.0
        for T, D, kappa in itertools.product(GRID_T, (0.25, 0.5), (-0.5, 1.0)):
            p = make_params(kappa=kappa)
            s = p.initial_state()
            worst0 = max(worst0, abs(forward_mgf(0.0, T, D, p, s) - 1.0))
            target = nu_bar(s, T, D, p, method="direct")
            worst1 = max(worst1, abs(forward_mgf(1.0, T, D, p, s) - target))
        ok = worst0 < 1e-10 and worst1 < 1e-8
        report(5, "MGF bridge over 12 combinations", ok,
               f"|M(0)-1| {worst0:.1e} < 1e-10, |M(1)-nu_bar| {worst1:.1e} < 1e-8")

    def test_06_fourier_vs_monte_carlo(self, report):
        p = make_params()
        s = p.initial_state()
        cfg = SimConfig(n_paths=1_000_000, n_steps_per_year=64, seed=11)
        worst_z = 0.0
        for T in (0.5, 1.0, 2.0):
            atm = fair_rate_risky(s, T, 0.5, p)
            contracts = [CapletContract(T, 0.5, atm + shift) for shift in (-0.01, 0.0, 0.01)]
            for c, est in zip(contracts, mc_caplets(contracts, p, cfg)):
                worst_z = max(worst_z, abs(est.z_score(caplet_price(c, p, s))))
        atm = CapletContract(1.0, 0.5, fair_rate_risky(s, 1.0, 0.5, p))
        a = caplet_price(atm, p, s, QuadratureConfig(R=1.25))
        b = caplet_price(atm, p, s, QuadratureConfig(R=1.75))
        r_gap = abs(a - b) / a
        ok = worst_z <= 3.0 and r_gap < 1e-6
        report(6, "Fourier vs 1e6-path MC caplets", ok,
               f"max |z| {worst_z:.2f} <= 3, R-invariance {r_gap:.1e} < 1e-6")

    def test_07_caplet_fra_parity(self, report):
        worst = 0.0
        methods = set()
        for kappa, (T, D) in itertools.product((-0.5, 0.5, 1.0), [(1.0, 0.5), (2.0, 0.25), (0.5, 1.0)]):
            p = make_params(kappa=kappa)
            s = p.initial_state()
            for Ktilde in (0.0, 0.5):
                K = (Ktilde - 1.0) / D
                res = caplet_fourier(CapletContract(T, D, K), p, s)
                methods.add(res.method)
                fra = fra_price(s, FraContract(T, D, K), p)
                worst = max(worst, abs(res.price - fra) / fra)
        ok = worst < 1e-6 and methods == {"parity", "fourier"}
        report(7, "caplet-FRA parity at K = -1/Delta and deep in the money", ok,
               f"max rel {worst:.1e} < 1e-6")

    def test_08_monte_carlo_oracles(self, report):
        p = make_params()
        s = p.initial_state()
        cfg = SimConfig(n_paths=100_000, n_steps_per_year=64, seed=21)
        z = {}
        for curve, T in itertools.product(Curve, (1.0, 5.0)):
            z[f"bond {curve.value} T={T}"] = mc_bond_price(curve, T, p, cfg).z_score(
                bond_price(curve, s, T, p))
        for T, D in [(1.0, 0.5), (2.0, 0.25)]:
            z[f"Ad T={T}"] = mc_adjustment_factor(T, D, p, cfg).z_score(adjustment_factor(s, T, D, p))
            K = fair_rate_risky(s, T, D, p)
            legs = mc_fra_legs(FraContract(T, D, K), p, cfg)
            z[f"nu_bar T={T}"] = legs.nu_bar.z_score(nu_bar(s, T, D, p))
            z[f"fair FRA T={T}"] = legs.value.z_score(0.0)
        worst_z = max(abs(v) for v in z.values())

        # negligible volatility: paths follow the drift ODE
        d = deterministic_params()
        f1, f2, f3 = d.factors
        T = 2.0
        rf = deterministic_integral(f2, T) - deterministic_integral(f1, T)
        rk = rf + d.kappa * deterministic_integral(f1, T) + deterministic_integral(f3, T)
        det_cfg = SimConfig(n_paths=16, n_steps_per_year=256, seed=0)
        det = max(abs(mc_bond_price(Curve.RISK_FREE, T, d, det_cfg).mean - math.exp(-rf)),
                  abs(mc_bond_price(Curve.RISKY, T, d, det_cfg).mean - math.exp(-rk)),
                  abs(bond_price(Curve.RISK_FREE, d.initial_state(), T, d) - math.exp(-rf)),
                  abs(bond_price(Curve.RISKY, d.initial_state(), T, d) - math.exp(-rk)))
        ok = worst_z <= 3.0 and det < 1e-8
        report(8, "MC oracle suite at 1e5 paths", ok,
               f"max |z| {worst_z:.2f} <= 3 over {len(z)} checks, deterministic {det:.1e} < 1e-8")

    def test_09_sign_behaviour(self, report):
        T, D = 1.0, 0.5
        cfg = SimConfig(n_paths=100_000, n_steps_per_year=64, seed=31)
        lines = []
        ok = True
        for psi1, expected in ((0.1, 1.0), (-0.1, -1.0)):
            p_k = make_params(kappa=0.5, psi1=psi1)
            p_0 = make_params(kappa=0.0, psi1=psi1)
            s = p_k.initial_state()
            paths = simulate(p_k, SimConfig(n_paths=20_000, n_steps_per_year=64, seed=5), T + D)
            window = paths.psi1[:, paths.times >= T - 1e-12]
            prob = float(np.mean(np.all(np.sign(window) == expected, axis=1)))
            nu = nu_single_curve(s, T, D, p_k)
            est_k = mc_fra_legs(FraContract(T, D, 0.0), p_k, cfg).nu_bar
            est_0 = mc_fra_legs(FraContract(T, D, 0.0), p_0, replace_seed(cfg, 32)).nu_bar
            gap = (est_k.mean - est_0.mean) / nu
            combined = math.hypot(est_k.std_error, est_0.std_error) / nu
            ok &= prob > 0.99 and expected * gap > 3.0 * combined
            lines.append(f"psi1_0={psi1:+}: P={prob:.4f}, gap {gap:+.2e} vs 3SE {3 * combined:.1e}")
        report(9, "sign of the correlation effect", ok, "; ".join(lines))

    def test_10_calibration_round_trip(self, report):
        truth = make_params(kappa=0.5)
        quotes = generate_quotes(truth, (0.5, 1.0, 2.0, 5.0), (0.25, 0.5))
        guess = json.loads(EXAMPLE.read_text())["calibration"]["initial_guess"]
        start = time.perf_counter()
        result = calibrate(quotes, ModelParams.from_dict(guess))
        elapsed = time.perf_counter() - start
        kappa_gap = abs(result.params_hat.kappa - truth.kappa)
        ok = result.max_zcb_error < 1e-8 and result.max_fra_error < 1e-8
        kappa_note = "within" if kappa_gap <= 0.05 else "WARNING outside"
        report(10, "calibration round trip", ok,
               f"zcb {result.max_zcb_error:.1e}, fra {result.max_fra_error:.1e} < 1e-8; "
               f"kappa {result.params_hat.kappa:.4f} {kappa_note} +-0.05; {elapsed:.0f}s")

    def test_11_reproducibility(self, report, tmp_path):
        data = json.loads(EXAMPLE.read_text())
        data["simulation"] = {"n_paths": 20_000, "n_steps_per_year": 16, "seed": 7,
                              "chunk_size": 4096}
        data["calibration"].update(noise_sd=1e-5, n_starts=1, refine=False, initial_guess=None)
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps(data))
        runs = [("bond", ()), ("fra", ("--mc",)), ("caplet", ("--mc",)), ("simulate", ()),
                ("calibrate", ())]
        mismatched = []
        for command, extra in runs:
            outputs = []
            for label, jobs in (("a", "1"), ("b", "1"), ("c", "3")):
                out = tmp_path / f"{command}-{label}"
                code = main([command, "--config", str(cfg), "--out", str(out), "--jobs", jobs, *extra])
                assert code == 0
                outputs.append({f.name: f.read_bytes() for f in sorted(out.iterdir())})
            if not outputs[0] or any(o != outputs[0] for o in outputs[1:]):
                mismatched.append(command)
        report(11, "byte-identical outputs across runs and thread counts", not mismatched,
               f"{len(runs) - len(mismatched)}/{len(runs)} commands identical")


def replace_seed(cfg: SimConfig, seed: int) -> SimConfig:
    return SimConfig(**{**cfg.__dict__, "seed": seed})
