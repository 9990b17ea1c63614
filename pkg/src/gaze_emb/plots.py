"""SVG figures for ROC curves, score distributions and quality densities.

The CSV artifacts are the contract; these are convenience renderings.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import RocCurve  # noqa: E402
from .quality import DensityCurve  # noqa: E402

_SVG_META = {"Date": None}


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed salt keeps generated element ids stable across runs
    with matplotlib.rc_context({"svg.hashsalt": "gaze-emb"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_roc(curves: Mapping[str, RocCurve], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, c in curves.items():
        far = np.clip(c.far, 1e-6, 1)
        ax.step(far, 1 - c.frr, where="post", label=label)
    ax.set_xscale("log")
    ax.set_xlim(1e-4, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("False acceptance rate")
    ax.set_ylabel("True acceptance rate")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_scores(genuine: np.ndarray, imposter: np.ndarray, path: str | Path, bins: int = 40) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    edges = np.linspace(-1, 1, bins + 1)
    ax.hist(imposter, edges, density=True, alpha=0.6, label=f"Imposter (n={len(imposter)})")
    ax.hist(genuine, edges, density=True, alpha=0.6, label=f"Genuine (n={len(genuine)})")
    ax.set_xlabel("Similarity score")
    ax.set_ylabel("Density")
    ax.legend(loc="upper left")
    fig.tight_layout()
    return _save(fig, path)


def plot_densities(curves: Mapping[str, tuple[DensityCurve, float]], path: str | Path, xlabel: str) -> Path:
    """Overlay densities; each entry carries the median to mark."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (curve, median) in curves.items():
        (line,) = ax.plot(curve.grid, curve.density, label=f"{label} (median {median:.3f})")
        ax.axvline(median, color=line.get_color(), linestyle="--", linewidth=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("Density")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
