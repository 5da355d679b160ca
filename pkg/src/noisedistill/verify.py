"""Numerical verification battery for the linear-Gaussian theory.

Each check pits a structured-path computation against an independent oracle
(dense inverse, dense Bures distance, finite differences, Monte Carlo,
brute-force perturbation) and records value, threshold, and verdict.  The
battery is what the ``verify`` CLI command runs and what the acceptance suite
reuses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .gaussians import (
    LowRankGaussian,
    fit_gaussian,
    sample,
    structured_inverse,
    symmetric_eigen,
    w2_commuting,
)
from .linear_theory import (
    GeneratorParams,
    LinearModel,
    analytic_minimizer,
    eigenvalue_loss_profile,
    loss_closed_form,
    loss_monte_carlo,
    trace_maximizer_check,
    wasserstein_report,
)
from .rng import derive, make_rng
from .schedule import NoiseSchedule
from .stiefel import OptConfig, optimize, random_params, retract


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""


def _random_low_rank(rng, d=None, max_d=20) -> LowRankGaussian:
    if d is None:
        d = int(rng.integers(2, max_d + 1))
    r = int(rng.integers(1, d))
    f = retract(np.zeros((d, r)), rng.standard_normal((d, r)), "qr")
    return LowRankGaussian(f, float(rng.uniform(0.1, 3.0)), float(rng.uniform(0.05, 2.0)))


def _dense_bures(a: np.ndarray, b: np.ndarray) -> float:
    ea = symmetric_eigen(a)
    root = (ea.vectors * np.sqrt(np.clip(ea.values, 0, None))) @ ea.vectors.T
    inner = symmetric_eigen(root @ b @ root)
    return float(np.trace(a) + np.trace(b) - 2.0 * np.sum(np.sqrt(np.clip(inner.values, 0, None))))


def check_woodbury(seed: int, instances: int = 20) -> CheckResult:
    """Structured inverse vs dense LU inverse, entrywise."""
    rng = derive(seed, 1)
    worst = 0.0
    for _ in range(instances):
        g = _random_low_rank(rng)
        floor_inv, corr = structured_inverse(g)
        inv_structured = floor_inv * np.eye(g.dim) - corr * (g.factor @ g.factor.T)
        worst = max(worst, float(np.max(np.abs(inv_structured - np.linalg.inv(g.dense_cov())))))
    return CheckResult("woodbury_vs_dense_inverse", worst, 1e-10, worst <= 1e-10)


def check_w2_bures(seed: int, instances: int = 20) -> CheckResult:
    """Commuting-pair W2 vs the dense Bures formula on shared-factor pairs."""
    rng = derive(seed, 2)
    worst = 0.0
    for _ in range(instances):
        a = _random_low_rank(rng, d=int(rng.integers(3, 12)))
        b = LowRankGaussian(a.factor, float(rng.uniform(0.0, 2.0)), float(rng.uniform(0.01, 2.0)))
        worst = max(worst, abs(w2_commuting(a, b) - _dense_bures(a.dense_cov(), b.dense_cov())))
    return CheckResult("w2_commuting_vs_bures", worst, 1e-9, worst <= 1e-9)


def check_eigen_residual(seed: int, instances: int = 10, d: int = 8) -> CheckResult:
    rng = derive(seed, 3)
    worst = 0.0
    for _ in range(instances):
        m = rng.standard_normal((d, d))
        a = (m + m.T) / 2.0
        eig = symmetric_eigen(a)
        recon = (eig.vectors * eig.values) @ eig.vectors.T
        worst = max(worst, float(np.max(np.abs(recon - a))))
    return CheckResult("eigen_reconstruction", worst, 1e-8, worst <= 1e-8)


def check_trace_bound(seed: int, instances: int = 100) -> CheckResult:
    """tr(EE^T U M U^T) never exceeds tr(M); frames E Q attain it."""
    rng = derive(seed, 4)
    worst_excess = -np.inf
    attained_ok = True
    for _ in range(instances):
        d = int(rng.integers(3, 10))
        r = int(rng.integers(1, d))
        e = retract(np.zeros((d, r)), rng.standard_normal((d, r)), "qr")
        u = retract(np.zeros((d, r)), rng.standard_normal((d, r)), "qr")
        b = rng.standard_normal((r, r))
        spd = b @ b.T + 0.1 * np.eye(r)
        proj = e.T @ u
        value = float(np.sum((proj @ spd) * proj))
        worst_excess = max(worst_excess, value - float(np.trace(spd)))
        q, _ = np.linalg.qr(rng.standard_normal((r, r)))
        attained_ok = attained_ok and trace_maximizer_check(e, spd, e @ q)
    passed = worst_excess <= 1e-9 and attained_ok
    return CheckResult("trace_maximizer_bound", worst_excess, 1e-9, passed,
                       detail="bound respected and attained on aligned frames")


def check_profile_minimizer(schedule: NoiseSchedule, sigmas=(0.1, 0.2, 0.5)) -> CheckResult:
    """Numeric minimizer of the eigenvalue profile sits at 1 + sigma^2."""
    worst = 0.0
    for sigma in sigmas:
        res = minimize_scalar(
            lambda u: eigenvalue_loss_profile(u, sigma, schedule),
            bounds=(1e-6, 10.0),
            method="bounded",
            options={"xatol": 1e-10},
        )
        worst = max(worst, abs(res.x - (1.0 + sigma**2)))
    return CheckResult("profile_minimizer_location", worst, 1e-6, worst <= 1e-6)


def check_profile_convexity(schedule: NoiseSchedule, sigma: float = 0.5) -> CheckResult:
    """Central second differences of the profile are positive on [0.1, 5]."""
    h = 1e-3
    grid = np.linspace(0.1, 5.0, 25)
    second = []
    for u in grid:
        f = lambda x: eigenvalue_loss_profile(x, sigma, schedule)
        second.append((f(u + h) - 2.0 * f(u) + f(u - h)) / h**2)
    worst = float(min(second))
    return CheckResult("profile_convexity", worst, 0.0, worst > 0.0,
                       detail="minimum second difference on the grid")


def _frame(dim: int, rank: int, basis: np.ndarray | None, tag: int) -> np.ndarray:
    if basis is not None:
        return np.asarray(basis, dtype=float)
    rng = derive(int(dim * 1000 + rank), tag)
    return retract(np.zeros((dim, rank)), rng.standard_normal((dim, rank)), "qr")


def check_gap_identity(
    dim: int, rank: int, sigma: float, schedule: NoiseSchedule, basis: np.ndarray | None = None
) -> CheckResult:
    """At the analytic minimizer the W2 gap equals (d - r) sigma^2."""
    model = LinearModel(basis=_frame(dim, rank, basis, 5), sigma=sigma)
    report = wasserstein_report(model, analytic_minimizer(model))
    err = abs(report.gap - (dim - rank) * sigma**2)
    return CheckResult(f"w2_gap_identity_d{dim}_r{rank}", err, 1e-9, err <= 1e-9)


def check_closed_vs_monte_carlo(
    seed: int, schedule: NoiseSchedule, instances: int = 20, n: int = 100000
) -> CheckResult:
    """Closed-form loss within 4 standard errors of the sampling estimator."""
    rng = derive(seed, 6)
    worst_ratio = 0.0
    for i in range(instances):
        d, r = 6, 2
        e = retract(np.zeros((d, r)), rng.standard_normal((d, r)), "qr")
        model = LinearModel(basis=e, sigma=float(rng.uniform(0.1, 0.8)))
        u = retract(np.zeros((d, r)), rng.standard_normal((d, r)), "qr")
        v = rng.standard_normal((d, r))
        p = GeneratorParams(u=u, v=v)
        closed = loss_closed_form(model, p, schedule)
        est, stderr = loss_monte_carlo(model, p, schedule, n, derive(seed, 7, i))
        worst_ratio = max(worst_ratio, abs(closed - est) / (4.0 * stderr))
    return CheckResult("closed_form_vs_monte_carlo", worst_ratio, 1.0, worst_ratio <= 1.0,
                       detail="max |closed - MC| / (4 stderr)")


def check_minimizer_optimality(
    dim: int,
    rank: int,
    sigma: float,
    schedule: NoiseSchedule,
    seed: int,
    trials: int = 50,
    basis: np.ndarray | None = None,
) -> CheckResult:
    """Random perturbations of the minimizer strictly increase the loss."""
    rng = derive(seed, 8)
    model = LinearModel(basis=_frame(dim, rank, basis, 8), sigma=sigma)
    star = analytic_minimizer(model)
    base = loss_closed_form(model, star, schedule)
    min_margin = np.inf
    for _ in range(trials):
        scale = float(rng.uniform(1e-2, 0.3))
        u = retract(star.u, scale * rng.standard_normal(star.u.shape), "qr")
        v = star.v + scale * rng.standard_normal(star.v.shape)
        loss = loss_closed_form(model, GeneratorParams(u=u, v=v), schedule)
        min_margin = min(min_margin, loss - base)
    return CheckResult("minimizer_optimality", float(min_margin), 0.0, min_margin > 0.0,
                       detail="smallest loss increase over perturbations")


def check_descent_recovery(
    dim: int,
    rank: int,
    sigma: float,
    schedule: NoiseSchedule,
    opt_cfg: OptConfig,
    seeds: int = 20,
    seed: int = 0,
    basis: np.ndarray | None = None,
) -> CheckResult:
    """Riemannian descent from random starts reaches the minimizer family."""
    model = LinearModel(basis=_frame(dim, rank, basis, 9), sigma=sigma)
    successes = 0
    for k in range(seeds):
        p0 = random_params(dim, rank, seed=1000 + k)
        p_final, trace = optimize(model, p0, schedule, opt_cfg)
        if trace.angle_max[-1] <= 1e-3 and trace.vtv_dev[-1] <= 1e-3:
            successes += 1
    needed = math.ceil(0.9 * seeds)
    return CheckResult("descent_recovers_minimizer", float(successes), float(needed),
                       successes >= needed, detail=f"{successes}/{seeds} converged")


def check_von_neumann(seed: int, instances: int = 50, d: int = 6) -> CheckResult:
    """|tr(AB)| bounded by the sorted singular-value inner product."""
    rng = derive(seed, 10)
    worst = -np.inf
    for _ in range(instances):
        a = rng.standard_normal((d, d))
        b = rng.standard_normal((d, d))
        a = (a + a.T) / 2.0
        b = (b + b.T) / 2.0
        bound = float(np.dot(np.sort(np.linalg.svd(a, compute_uv=False))[::-1],
                             np.sort(np.linalg.svd(b, compute_uv=False))[::-1]))
        worst = max(worst, abs(float(np.trace(a @ b))) - bound)
    return CheckResult("von_neumann_trace_bound", worst, 1e-9, worst <= 1e-9)


def check_sample_fit_roundtrip(seed: int) -> CheckResult:
    """fit_gaussian(sample(g, 1e5)) recovers the covariance within 0.05."""
    rng = derive(seed, 11)
    g = _random_low_rank(rng, d=6)
    xs = sample(g, 100000, derive(seed, 12))
    _, cov = fit_gaussian(xs)
    err = float(np.max(np.abs(cov - g.dense_cov())))
    return CheckResult("sample_fit_roundtrip", err, 0.05, err <= 0.05)


def run_verification(
    dim: int = 8,
    rank: int = 2,
    sigma: float = 0.5,
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
    opt_cfg: OptConfig | None = None,
    opt_seeds: int = 20,
    mc_instances: int = 20,
    mc_samples: int = 100000,
    basis: np.ndarray | None = None,
) -> list[CheckResult]:
    """The full battery; deterministic in (arguments, seed)."""
    schedule = schedule or NoiseSchedule()
    opt_cfg = opt_cfg or OptConfig()
    checks = [
        check_woodbury(seed),
        check_w2_bures(seed),
        check_eigen_residual(seed),
        check_trace_bound(seed),
        check_profile_minimizer(schedule, sigmas=(0.1, 0.2, 0.5, sigma)),
        check_profile_convexity(schedule, sigma=max(sigma, 0.1)),
        check_gap_identity(dim, rank, sigma, schedule, basis=basis),
        check_closed_vs_monte_carlo(seed, schedule, instances=mc_instances, n=mc_samples),
        check_minimizer_optimality(dim, rank, sigma, schedule, seed, basis=basis),
        check_descent_recovery(dim, rank, sigma, schedule, opt_cfg, seeds=opt_seeds,
                               seed=seed, basis=basis),
        check_von_neumann(seed),
        check_sample_fit_roundtrip(seed),
    ]
    return checks
