"""ADE/FDE, best-of-N evaluation and clustering quality scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import adjusted_rand_score, silhouette_score

from .predictor import correlate, integrate


class EmptyTestSetError(RuntimeError):
    pass


@dataclass
class MetricsReport:
    ade: float
    fde: float
    n_samples: int
    per_window: list = field(default_factory=list)  # (ade, fde, n_agents)
    ari: float | None = None
    silhouette: float | None = None


def displacement_errors(pred, truth):
    """Per-sample scene ADE and FDE for ``pred`` of shape ``(S, N, T, 2)``."""
    err = np.linalg.norm(pred - truth[None], axis=-1)  # (S, N, T)
    return err.mean(axis=(1, 2)), err[:, :, -1].mean(axis=1)


def ade_fde(pred, truth):
    """Best-of-samples ADE and FDE.

    ``pred`` is ``(N, T, 2)`` or ``(S, N, T, 2)``; the minimum over samples is
    taken separately for each metric over the whole window.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim == 3:
        pred = pred[None]
    if pred.shape[1:] != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape[1:]} vs {truth.shape}")
    ade, fde = displacement_errors(pred, truth)
    return float(ade.min()), float(fde.min())


def window_samples(distributions, observed, n_samples, rng):
    """Draw ``n_samples`` absolute tracks, cycling through the goal hypotheses.

    ``distributions`` is a list of ``(BivariateGaussianTrack, goal)`` pairs,
    one per retrieved goal. Sample ``s`` uses hypothesis ``s % K``; noise is
    drawn in sample order so smaller ``n_samples`` yield a prefix.
    """
    origin = np.asarray(observed, dtype=np.float64)[:, -1]
    preds = [(pred.numpy(), np.asarray(goal, dtype=np.float64)) for pred, goal in distributions]
    out = []
    for s in range(n_samples):
        pred_np, goal = preds[s % len(preds)]
        n, t = pred_np[0].shape[:2]
        draw = correlate(pred_np, rng.standard_normal((n, t, 2)))
        out.append(integrate(draw, goal, origin))
    return np.stack(out)


def evaluate(model, windows, n_samples=20, seed=0, scale=1.0):
    """Best-of-``n_samples`` ADE/FDE over ``windows``.

    ``model.distributions(window)`` must return ``(pred, goal)`` pairs in the
    model's (scaled) frame; errors are divided by ``scale`` so they are reported
    in scene units. The aggregate weights every agent equally.
    """
    if not windows:
        raise EmptyTestSetError("no test windows")
    per_window = []
    for w_idx, window in enumerate(windows):
        rng = np.random.default_rng([seed, w_idx])
        dists = model.distributions(window)
        samples = window_samples(dists, window.observed * scale, n_samples, rng)
        ade, fde = ade_fde(samples / scale, window.future)
        per_window.append((ade, fde, window.n_agents))
    arr = np.asarray(per_window)
    weights = arr[:, 2] / arr[:, 2].sum()
    return MetricsReport(float(arr[:, 0] @ weights), float(arr[:, 1] @ weights), n_samples, per_window)


def summarize_runs(reports):
    """Mean and sample std of ADE/FDE over repeated evaluations."""
    ade = np.array([r.ade for r in reports])
    fde = np.array([r.fde for r in reports])
    ddof = 1 if len(reports) > 1 else 0
    return {
        "runs": len(reports),
        "ade_mean": float(ade.mean()), "ade_std": float(ade.std(ddof=ddof)),
        "fde_mean": float(fde.mean()), "fde_std": float(fde.std(ddof=ddof)),
    }


def format_mean_std(mean, std, digits=3):
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def clustering_scores(labels, true_labels, latents=None):
    """Adjusted Rand index and (when latents are given and defined) silhouette."""
    labels = np.asarray(labels)
    true_labels = np.asarray(true_labels)
    if labels.shape != true_labels.shape:
        raise ValueError("label arrays differ in length")
    ari = float(adjusted_rand_score(true_labels, labels))
    sil = None
    if latents is not None:
        n_clusters = len(np.unique(labels))
        if 2 <= n_clusters < len(labels):
            sil = float(silhouette_score(np.asarray(latents), labels))
    return ari, sil
