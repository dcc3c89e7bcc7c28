"""Static figures: trajectory overlays and a 2-D latent scatter."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from sklearn.decomposition import PCA  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _colors(labels):
    cmap = plt.get_cmap("tab10")
    return [cmap(int(lab) % 10) for lab in labels]


def plot_trajectories(path, observed, future, samples, labels=None, title=None):
    """Overlay observed tracks, ground-truth futures and sampled predictions.

    ``observed`` is ``(N, T_obs, 2)``, ``future`` ``(N, T_fut, 2)``, ``samples``
    ``(S, N, T_fut, 2)``. Agents are coloured by ``labels`` when given.
    """
    observed, future, samples = (np.asarray(a, dtype=float) for a in (observed, future, samples))
    labels = np.zeros(len(observed), dtype=int) if labels is None else np.asarray(labels)
    colors = _colors(labels)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for i, color in enumerate(colors):
            for s in range(samples.shape[0]):
                track = np.vstack([observed[i, -1:], samples[s, i]])
                ax.plot(track[:, 0], track[:, 1], color=color, alpha=0.15, lw=0.8)
            ax.plot(observed[i, :, 0], observed[i, :, 1], color=color, lw=2.0)
            truth = np.vstack([observed[i, -1:], future[i]])
            ax.plot(truth[:, 0], truth[:, 1], color="k", ls="--", lw=1.0)
            ax.plot(*observed[i, -1], "o", color=color, ms=3)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(Path(path))
        plt.close(fig)
    return Path(path)


def project_2d(latents):
    """PCA projection to two components; pads with zeros for 1-D input."""
    latents = np.asarray(latents, dtype=float)
    n_comp = min(2, latents.shape[1], latents.shape[0])
    proj = PCA(n_components=n_comp).fit_transform(latents)
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(proj), 2 - proj.shape[1]))])
    return proj


def plot_latents(path, latents, labels, title=None):
    """Scatter of the latent PCA projection coloured by pseudo-label."""
    proj = project_2d(latents)
    labels = np.asarray(labels)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.0))
        for lab in np.unique(labels):
            pts = proj[labels == lab]
            ax.scatter(pts[:, 0], pts[:, 1], s=8, color=_colors([lab])[0], label=f"cluster {lab}")
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(Path(path))
        plt.close(fig)
    return Path(path)
