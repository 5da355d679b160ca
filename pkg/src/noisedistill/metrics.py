"""Quantitative evaluation on fitted Gaussian moments.

At toy scale the FID analog is the Frechet distance between Gaussians fitted
to raw 2-D coordinates (no feature network); every consumer of these numbers
should know that substitution.  The proximal variant re-corrupts generated
samples at the assumed data noise level and compares against the *noisy*
training set, so it needs no clean data at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, PreconditionError
from .gaussians import fit_gaussian, symmetric_eigen

PSD_TOL = 1e-8
MIN_METRIC_SAMPLES = 100


@dataclass(frozen=True)
class MetricReport:
    """One evaluation row: distances plus the sample budget that produced it."""

    frechet_to_clean: float
    proximal_fid: float
    w2_gaussian_fit: float
    n_samples: int
    seed: int

    def __post_init__(self):
        vals = (self.frechet_to_clean, self.proximal_fid, self.w2_gaussian_fit)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise PreconditionError(f"metric values must be finite and nonnegative, got {vals}")


def _psd_sqrt(cov: np.ndarray, name: str) -> np.ndarray:
    eig = symmetric_eigen(cov, sym_tol=PSD_TOL)
    if eig.values[-1] < -PSD_TOL:
        raise PreconditionError(
            f"{name} is indefinite beyond tolerance: smallest eigenvalue {eig.values[-1]:.3e}"
        )
    root = np.sqrt(np.clip(eig.values, 0.0, None))
    return (eig.vectors * root) @ eig.vectors.T


def frechet_gaussian(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}).

    Zero exactly when the moment pairs coincide; marginally indefinite
    covariances (finite-sample artifacts) are clamped at zero eigenvalues.
    """
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    cov1 = np.asarray(cov1, dtype=float)
    cov2 = np.asarray(cov2, dtype=float)
    root1 = _psd_sqrt(cov1, "cov1")
    _psd_sqrt(cov2, "cov2")  # validates PSD-ness of the second argument
    inner = _psd_sqrt(root1 @ cov2 @ root1, "cross term")
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(inner))
    return max(value, 0.0)


def frechet_between_samples(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet distance between the Gaussian fits of two sample sets."""
    mu_a, cov_a = fit_gaussian(a)
    mu_b, cov_b = fit_gaussian(b)
    return frechet_gaussian(mu_a, cov_a, mu_b, cov_b)


def proximal_fid(
    gen_samples: np.ndarray,
    sigma_hat: float,
    noisy_reference: np.ndarray,
    rng: np.random.Generator,
) -> float:
    """Frechet distance of re-corrupted generations to the noisy training set.

    Generated samples get one fresh corruption pass x + sigma_hat * eps, after
    which both sides live at the same noise level and the comparison needs no
    clean data.  sigma_hat = 0 reduces to the plain Frechet distance.
    """
    gen_samples = np.atleast_2d(np.asarray(gen_samples, dtype=float))
    noisy_reference = np.atleast_2d(np.asarray(noisy_reference, dtype=float))
    if gen_samples.shape[0] < MIN_METRIC_SAMPLES or noisy_reference.shape[0] < MIN_METRIC_SAMPLES:
        raise InsufficientDataError(
            f"need at least {MIN_METRIC_SAMPLES} points per set, got "
            f"{gen_samples.shape[0]} and {noisy_reference.shape[0]}"
        )
    corrupted = gen_samples + sigma_hat * rng.standard_normal(gen_samples.shape)
    return frechet_between_samples(corrupted, noisy_reference)


def make_eval_hook(dataset, sigma_hat: float, schedule, n_eval: int = 16384, eval_seed: int = 0):
    """Standard metric hook for distillation runs.

    The clean reference fit, the evaluation latents, and the corruption
    stream are all derived once from ``eval_seed``, so the hook is a
    deterministic function of the model being evaluated and consecutive
    checkpoints see identical evaluation noise.
    """
    from .distill import generator_forward
    from .rng import derive
    from .toydata import sample_clean

    clean_ref = sample_clean(dataset.kind, n_eval, derive(eval_seed, 101))
    mu_c, cov_c = fit_gaussian(clean_ref)

    def hook(state) -> dict:
        z = derive(eval_seed, 102).standard_normal((n_eval, state.generator.data_dim))
        x_gen = generator_forward(state.generator, z, schedule)
        mu_g, cov_g = fit_gaussian(x_gen)
        return {
            "frechet_clean": frechet_gaussian(mu_g, cov_g, mu_c, cov_c),
            "proximal_fid": proximal_fid(x_gen, sigma_hat, dataset.points, derive(eval_seed, 103)),
        }

    return hook


def evaluate_sources(
    dataset,
    schedule,
    sigma_hat: float,
    teacher=None,
    generator=None,
    n_eval: int = 16384,
    sample_steps: int = 64,
    eval_seed: int = 0,
) -> list[dict]:
    """Metric rows for the raw noisy data and every available model.

    Sources: the noisy training points themselves, the teacher run as a full
    and as a truncated sampler, and the one-step generator.  All rows share
    one clean reference fit and one evaluation seed.
    """
    from .diffusion import ambient_sample
    from .distill import generator_forward
    from .rng import derive
    from .toydata import sample_clean

    clean_ref = sample_clean(dataset.kind, n_eval, derive(eval_seed, 101))
    mu_c, cov_c = fit_gaussian(clean_ref)

    def row(source: str, samples: np.ndarray, n: int) -> dict:
        mu, cov = fit_gaussian(samples)
        report = MetricReport(
            frechet_to_clean=frechet_gaussian(mu, cov, mu_c, cov_c),
            proximal_fid=proximal_fid(samples, sigma_hat, dataset.points, derive(eval_seed, 103)),
            w2_gaussian_fit=frechet_between_samples(samples, dataset.points),
            n_samples=n,
            seed=eval_seed,
        )
        return {
            "source": source,
            "frechet_clean": report.frechet_to_clean,
            "proximal_fid": report.proximal_fid,
            "w2_fit": report.w2_gaussian_fit,
            "n_samples": report.n_samples,
            "seed": report.seed,
        }

    rows = [row("raw_noisy", dataset.points, dataset.n)]
    if teacher is not None:
        full = ambient_sample(teacher, sigma_hat, sample_steps, "full", n_eval,
                              derive(eval_seed, 104), schedule)
        trunc = ambient_sample(teacher, sigma_hat, sample_steps, "truncated", n_eval,
                               derive(eval_seed, 105), schedule)
        rows.append(row("teacher_full", full, n_eval))
        rows.append(row("teacher_truncated", trunc, n_eval))
    if generator is not None:
        z = derive(eval_seed, 102).standard_normal((n_eval, generator.data_dim))
        rows.append(row("generator", generator_forward(generator, z, schedule), n_eval))
    return rows


@dataclass(frozen=True)
class CheckpointSelection:
    step: int
    proximal_fid: float
    frechet_to_clean: float  # true metric at the selected checkpoint, when known
    best_frechet_to_clean: float  # the run's true minimum, for the report


def select_best_checkpoint(history: list[dict]) -> CheckpointSelection:
    """Pick the checkpoint minimizing proximal FID (earliest step on ties).

    ``history`` rows need ``step`` and ``proximal_fid``; when rows also carry
    ``frechet_clean`` (the metric-history column) the selection reports the
    true metric at the chosen step next to the run's true minimum.
    """
    rows = [r for r in history if np.isfinite(r.get("proximal_fid", np.nan))]
    if not rows:
        raise InsufficientDataError("history has no rows with a proximal_fid value")
    chosen = min(rows, key=lambda r: (r["proximal_fid"], r["step"]))
    true_vals = [r["frechet_clean"] for r in rows if np.isfinite(r.get("frechet_clean", np.nan))]
    return CheckpointSelection(
        step=int(chosen["step"]),
        proximal_fid=float(chosen["proximal_fid"]),
        frechet_to_clean=float(chosen.get("frechet_clean", np.nan)),
        best_frechet_to_clean=float(min(true_vals)) if true_vals else float("nan"),
    )
