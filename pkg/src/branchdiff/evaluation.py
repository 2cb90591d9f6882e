"""Sample quality metrics: Fréchet distance, per-feature Wasserstein-1,
correlation structure, and before/after transmutation correlation.

Everything works directly on feature matrices; at this scale there is no
pretrained embedding in front of the Fréchet statistic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

EIG_CLIP = -1e-8  # eigenvalues this small in relative terms count as zero


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    count: int


def gaussian_fit(samples: np.ndarray) -> GaussianSummary:
    """Empirical mean and unbiased covariance of a sample matrix."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError(f"gaussian_fit needs at least 2 samples, got shape {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianSummary(mean, cov, x.shape[0])


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    scale = max(float(vals.max(initial=0.0)), 1.0)
    if vals.min(initial=0.0) < EIG_CLIP * scale:
        raise NumericError(
            f"{what} is not positive semidefinite: eigenvalues span "
            f"[{vals.min():.3e}, {vals.max():.3e}], condition "
            f"{abs(vals.max() / vals.min()):.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def product_sqrt(cov1: np.ndarray, cov2: np.ndarray) -> np.ndarray:
    """S with S @ S = cov1 @ cov2, via the symmetrized product.

    With A = cov1^(1/2), the product is similar to the symmetric matrix
    M = A cov2 A, so S = A M^(1/2) A^(-1). The inverse restricts this full
    form to well-conditioned cov1; frechet_distance only needs tr(M^(1/2)),
    which is defined for any PSD pair.
    """
    a = _psd_sqrt(np.asarray(cov1, dtype=np.float64), "cov1")
    m_half = _psd_sqrt(a @ np.asarray(cov2, dtype=np.float64) @ a, "cov1 @ cov2")
    return a @ m_half @ np.linalg.pinv(a)


def frechet_distance(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))."""
    if g1.mean.shape != g2.mean.shape:
        raise DataError(f"dimension mismatch: {g1.mean.shape} vs {g2.mean.shape}")
    a = _psd_sqrt(g1.cov, "cov1")
    m_half = _psd_sqrt(a @ g2.cov @ a, "cov1 @ cov2")
    gap = g1.mean - g2.mean
    out = float(gap @ gap + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(m_half))
    return max(out, 0.0)


def wasserstein1_feature(a: np.ndarray, b: np.ndarray) -> float:
    """Empirical 1-D W1 between two samples via quantile functions.

    Equal sizes reduce to mean |a_(i) - b_(i)|; unequal sizes integrate
    |F_a^{-1} - F_b^{-1}| over the merged quantile breakpoints.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise DataError("wasserstein1_feature needs nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    qs = np.union1d(np.arange(1, a.size + 1) / a.size,
                    np.arange(1, b.size + 1) / b.size)
    widths = np.diff(np.concatenate([[0.0], qs]))
    # each segment takes the order statistic at its upper edge; the tiny
    # nudge keeps exact breakpoints on their own step despite fp rounding
    ia = np.ceil(qs * a.size - 1e-9).astype(np.int64) - 1
    ib = np.ceil(qs * b.size - 1e-9).astype(np.int64) - 1
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))


def feature_correlations(samples: np.ndarray) -> np.ma.MaskedArray:
    """Pearson correlation matrix; zero-variance features come back masked."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("feature_correlations needs a (n >= 2, d) matrix")
    sd = x.std(axis=0)
    live = sd > 0
    d = x.shape[1]
    corr = np.ma.masked_all((d, d))
    if live.any():
        sub = np.corrcoef(x[:, live], rowvar=False)
        sub = np.atleast_2d(sub)
        idx = np.flatnonzero(live)
        corr[np.ix_(idx, idx)] = np.clip(sub, -1.0, 1.0)
    return corr


def transmutation_correlation(before: np.ndarray, after: np.ndarray) -> np.ma.MaskedArray:
    """Per-feature Pearson correlation between paired rows."""
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape:
        raise DataError(f"unpaired rows: {before.shape} vs {after.shape}")
    if before.ndim != 2 or before.shape[0] < 2:
        raise DataError("transmutation_correlation needs paired (n >= 2, d) matrices")
    bc = before - before.mean(axis=0)
    ac = after - after.mean(axis=0)
    denom = np.sqrt((bc * bc).sum(axis=0) * (ac * ac).sum(axis=0))
    out = np.ma.masked_all(before.shape[1])
    live = denom > 0
    out[live] = np.clip((bc * ac).sum(axis=0)[live] / denom[live], -1.0, 1.0)
    return out


def _masked_to_json(arr: np.ma.MaskedArray):
    return arr.tolist()  # masked entries become None


def metrics_report(reference: dict, generated: dict,
                   feature_names: tuple | None = None) -> dict:
    """Per-class Fréchet + per-feature W1 + correlation matrices, JSON-ready.

    reference/generated map class label -> sample matrix; classes present in
    both are compared, extras are reported as one-sided.
    """
    report: dict = {"frechet": {}, "wasserstein1": {}, "correlations": {}}
    shared = [c for c in reference if c in generated]
    for c in shared:
        ref, gen = np.asarray(reference[c]), np.asarray(generated[c])
        names = feature_names or tuple(f"feature_{j}" for j in range(ref.shape[1]))
        report["frechet"][c] = frechet_distance(gaussian_fit(ref), gaussian_fit(gen))
        report["wasserstein1"][c] = {
            names[j]: wasserstein1_feature(ref[:, j], gen[:, j])
            for j in range(ref.shape[1])
        }
        report["correlations"][c] = {
            "reference": _masked_to_json(feature_correlations(ref)),
            "generated": _masked_to_json(feature_correlations(gen)),
        }
    report["classes"] = {
        "shared": shared,
        "reference_only": sorted(set(reference) - set(generated)),
        "generated_only": sorted(set(generated) - set(reference)),
    }
    return report


def metrics_report_json(reference: dict, generated: dict,
                        feature_names: tuple | None = None) -> str:
    return json.dumps(metrics_report(reference, generated, feature_names),
                      indent=2, sort_keys=True)
