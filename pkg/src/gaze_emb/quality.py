"""Spatial accuracy and precision of fixation segments, plus Gaussian KDE summaries."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class QualityError(ValueError):
    pass


@dataclass(eq=False)
class FixationSegment:
    gaze: np.ndarray  # (n, 2) dva
    target: tuple[float, float]
    rate_hz: float = 250.0

    def __post_init__(self):
        self.gaze = np.asarray(self.gaze, dtype=np.float64)
        if self.gaze.ndim != 2 or self.gaze.shape[1] != 2 or len(self.gaze) < 2:
            raise QualityError("fixation segment needs an (n >= 2, 2) gaze array")
        if not np.all(np.isfinite(self.gaze)) or not np.all(np.isfinite(self.target)):
            raise QualityError("fixation segment must be free of NaN/inf")
        self.target = (float(self.target[0]), float(self.target[1]))


@dataclass
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def spatial_accuracy(seg: FixationSegment) -> float:
    """Distance between the mean gaze point and the target (dva)."""
    return float(np.hypot(*(seg.gaze.mean(axis=0) - np.asarray(seg.target))))


def spatial_precision(seg: FixationSegment, method: str = "rms") -> float:
    """Sample-to-sample precision (dva).

    ``rms`` is the root mean square of successive-sample distances (RMS-S2S);
    ``std`` is the root of the summed per-axis variances about the mean.
    """
    if method == "rms":
        steps = np.diff(seg.gaze, axis=0)
        return float(np.sqrt(np.mean(np.sum(steps * steps, axis=1))))
    if method == "std":
        return float(np.sqrt(np.sum(np.var(seg.gaze, axis=0))))
    raise QualityError(f"unknown precision method {method!r}")


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(std, IQR / 1.34) * n^(-1/5), falling back to std then 1."""
    v = np.asarray(values, dtype=np.float64)
    std = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
    q75, q25 = np.percentile(v, [75, 25])
    spread = min(std, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = std if std > 0 else 1.0
    return 0.9 * spread * len(v) ** (-0.2)


def default_grid(values: np.ndarray, bandwidth: float, n: int = 512) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.linspace(v.min() - 5 * bandwidth, v.max() + 5 * bandwidth, n)


def kde(values: Sequence[float], bandwidth: float | None = None, grid: np.ndarray | None = None) -> DensityCurve:
    """Gaussian kernel density evaluated on ``grid`` (Silverman bandwidth by default)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) == 0:
        raise QualityError("kde needs at least one value")
    h = silverman_bandwidth(v) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise QualityError("bandwidth must be positive")
    g = default_grid(v, h) if grid is None else np.asarray(grid, dtype=np.float64)
    dens = np.zeros(len(g))
    # chunk over data to bound memory for large samples
    for start in range(0, len(v), 4096):
        z = (g[:, None] - v[None, start:start + 4096]) / h
        dens += np.exp(-0.5 * z * z).sum(axis=1)
    dens /= len(v) * h * np.sqrt(2 * np.pi)
    return DensityCurve(g, dens, h)


def target_segments(rec, settle_ms: float = 300.0, min_samples: int = 2) -> list[FixationSegment]:
    """Left-eye fixation segments from the constant-target intervals of a recording.

    Samples within ``settle_ms`` of each target onset are skipped and NaN
    samples dropped. Intervals without a finite target are ignored.
    """
    tx, ty = np.asarray(rec.tx), np.asarray(rec.ty)
    t = np.asarray(rec.t_ms)
    gaze = np.column_stack([rec.lx, rec.ly])
    finite_target = np.isfinite(tx) & np.isfinite(ty)
    change = np.ones(len(t), dtype=bool)
    change[1:] = (tx[1:] != tx[:-1]) | (ty[1:] != ty[:-1]) | (finite_target[1:] != finite_target[:-1])
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], len(t))
    out = []
    for a, b in zip(starts, ends):
        if not finite_target[a]:
            continue
        keep = (t[a:b] >= t[a] + settle_ms) & np.all(np.isfinite(gaze[a:b]), axis=1)
        if keep.sum() >= min_samples:
            out.append(FixationSegment(gaze[a:b][keep], (tx[a], ty[a]), rec.meta.rate_hz))
    return out


# ---------------------------------------------------------------------------
# files


def read_fixation_csv(path: str | Path, rate_hz: float = 250.0) -> FixationSegment:
    """Read ``x,y,tx,ty`` rows; the target is taken from the first row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"x", "y", "tx", "ty"} - set(reader.fieldnames or ())
        if missing:
            raise QualityError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        rows = [(float(r["x"]), float(r["y"]), float(r["tx"]), float(r["ty"])) for r in reader]
    if not rows:
        raise QualityError(f"{path}: no samples")
    arr = np.array(rows)
    return FixationSegment(arr[:, :2], (arr[0, 2], arr[0, 3]), rate_hz)


def write_metrics_csv(metrics: dict[str, float], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, repr(float(v))])
    return path


def write_density_csv(curve: DensityCurve, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid", "density"])
        for x, d in zip(curve.grid, curve.density):
            w.writerow([repr(float(x)), repr(float(d))])
    return path


def read_density_csv(path: str | Path) -> DensityCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    grid = np.array([float(r["grid"]) for r in rows])
    dens = np.array([float(r["density"]) for r in rows])
    return DensityCurve(grid, dens, float("nan"))
