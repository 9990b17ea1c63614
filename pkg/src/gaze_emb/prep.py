"""Gaze signal preprocessing: timestamp regularization, off-screen masking,
Savitzky-Golay velocity, clamping, decimation, windowing and segment grouping.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import GazeDataError, GazeRecording, RecordingMeta

SEGMENT_WINDOWS = 9


class PrepError(ValueError):
    pass


@dataclass(frozen=True)
class ScreenBounds:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise PrepError(f"degenerate screen bounds {self}")


# EyeLink 1000 trackable range used for the GazeBase recordings
GAZEBASE_BOUNDS = ScreenBounds(-23.3, 23.3, -18.5, 11.7)


@dataclass(frozen=True)
class PrepConfig:
    """Preprocessing parameters.

    ``dt_ms=None`` regularizes onto the recording's native period (4 ms at
    250 Hz). ``downsample`` decimates 1000 Hz input by ``decimate_factor``.
    ``eyes="monocular_left"`` keeps only the left-eye channels of binocular
    input; ``None`` follows each recording's metadata.
    """

    dt_ms: float | None = None
    sg_window: int = 7
    sg_order: int = 2
    clamp: float = 1000.0
    window_s: float = 5.0
    segment_windows: int = SEGMENT_WINDOWS
    bounds: ScreenBounds | None = None
    decimate_factor: int = 4
    downsample: bool = False
    eyes: str | None = None

    def __post_init__(self):
        if self.sg_window % 2 != 1 or self.sg_window <= self.sg_order:
            raise PrepError("sg_window must be odd and greater than sg_order")
        if self.sg_order < 1:
            raise PrepError("sg_order must be >= 1 to differentiate")
        if self.clamp <= 0:
            raise PrepError("clamp must be positive")
        if self.segment_windows < 1:
            raise PrepError("segment_windows must be >= 1")
        if self.eyes not in (None, "monocular_left", "binocular"):
            raise PrepError(f"eyes must be monocular_left or binocular, got {self.eyes!r}")
        if self.dt_ms is not None and self.dt_ms <= 0:
            raise PrepError("dt_ms must be positive")
        if self.decimate_factor < 1:
            raise PrepError("decimate_factor must be >= 1")


class WindowSource(NamedTuple):
    subject_id: str
    round: int
    session: int
    task: str
    window_index: int

    @property
    def recording(self) -> tuple[str, int, int, str]:
        return (self.subject_id, self.round, self.session, self.task)


@dataclass(eq=False)
class VelocityWindow:
    """C x L velocity matrix (deg/s), stored as float32."""

    channels: np.ndarray
    nan_fraction: float
    source: WindowSource

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 2:
            raise PrepError("window channels must be a C x L matrix")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def length(self) -> int:
        return self.channels.shape[1]


@dataclass(eq=False)
class Segment:
    windows: list[VelocityWindow]

    def __post_init__(self):
        if not self.windows:
            raise PrepError("segment needs at least one window")
        rec = self.windows[0].source.recording
        start = self.windows[0].source.window_index
        for i, w in enumerate(self.windows):
            if w.source.recording != rec or w.source.window_index != start + i:
                raise PrepError("segment windows must be consecutive windows of one recording")


# ---------------------------------------------------------------------------
# timestamp regularization and masking


def regularize_timestamps(rec: GazeRecording, dt_ms: float) -> GazeRecording:
    """Resample every channel onto the grid 0, dt, 2 dt, ... by linear interpolation.

    A grid point that coincides with an input sample takes that sample.
    Otherwise both bracketing samples must be finite, else the result is NaN.
    Grid points before the first input sample are NaN.
    """
    if dt_ms <= 0:
        raise PrepError("dt_ms must be positive")
    if len(rec) < 2:
        raise PrepError("need at least 2 samples to regularize timestamps")
    t = rec.t_ms
    n_grid = int(math.floor(t[-1] / dt_ms + 1e-9)) + 1
    grid = np.arange(n_grid) * dt_ms

    hi = np.searchsorted(t, grid, side="left")
    exact = (hi < len(t)) & (t[np.minimum(hi, len(t) - 1)] == grid)
    before = hi == 0
    hi_c = np.clip(hi, 1, len(t) - 1)
    lo_c = hi_c - 1
    w = (grid - t[lo_c]) / (t[hi_c] - t[lo_c])

    out = {}
    for name in ("lx", "ly", "rx", "ry", "tx", "ty"):
        v = getattr(rec, name)
        vals = v[lo_c] + (v[hi_c] - v[lo_c]) * w  # NaN in either bracket propagates
        vals = np.where(exact, v[np.minimum(hi, len(t) - 1)], vals)
        vals[before & ~exact] = np.nan
        out[name] = vals
    return rec.replace(t_ms=grid, **out)


def apply_screen_bounds(rec: GazeRecording, bounds: ScreenBounds) -> GazeRecording:
    """NaN both coordinates of an eye wherever either falls outside ``bounds``."""
    out = {}
    for xn, yn in (("lx", "ly"), ("rx", "ry")):
        x, y = getattr(rec, xn).copy(), getattr(rec, yn).copy()
        off = (x < bounds.x_min) | (x > bounds.x_max) | (y < bounds.y_min) | (y > bounds.y_max)
        x[off] = np.nan
        y[off] = np.nan
        out[xn], out[yn] = x, y
    return rec.replace(**out)


def decimate(rec: GazeRecording, factor: int) -> GazeRecording:
    """Keep every ``factor``-th sample from index 0. No anti-alias filter."""
    if factor < 1:
        raise PrepError(f"decimation factor must be >= 1, got {factor}")
    if factor == 1:
        return rec
    if rec.meta.rate_hz % factor:
        raise PrepError(f"cannot decimate {rec.meta.rate_hz} Hz by {factor}")
    try:
        meta = RecordingMeta(
            rec.meta.subject_id, rec.meta.round, rec.meta.session, rec.meta.task,
            rec.meta.rate_hz // factor, rec.meta.eyes,
        )
    except GazeDataError as exc:
        raise PrepError(str(exc)) from None
    cols = {name: getattr(rec, name)[::factor] for name in ("t_ms", "lx", "ly", "rx", "ry", "tx", "ty")}
    return GazeRecording(meta, **cols)


# ---------------------------------------------------------------------------
# Savitzky-Golay differentiation


def sg_derivative_coeffs(window: int, order: int) -> np.ndarray:
    """Weights giving the first derivative (per sample) at the window centre.

    Dotting the weights with ``window`` consecutive samples equals the slope
    at the centre of the least-squares polynomial of degree ``order``. Solved
    in exact rational arithmetic, so the weights are exactly antisymmetric.
    """
    half = window // 2
    offsets = range(-half, half + 1)
    n = order + 1
    # normal equations (V^T V) a = V^T y; we need row 1 of (V^T V)^-1 V^T
    gram = [[Fraction(sum(k ** (i + j) for k in offsets)) for j in range(n)] for i in range(n)]
    # gram is symmetric, so that row is z^T V^T with gram @ z = e_1
    aug = [row + [Fraction(int(i == 1))] for i, row in enumerate(gram)]
    for col in range(n):
        pivot = next(r for r in range(col, n) if aug[r][col] != 0)
        aug[col], aug[pivot] = aug[pivot], aug[col]
        pv = aug[col][col]
        aug[col] = [v / pv for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [a - f * b for a, b in zip(aug[r], aug[col])]
    z = [aug[i][n] for i in range(n)]
    return np.array([float(sum(z[i] * k ** i for i in range(n))) for k in offsets])


def differentiate_sg(
    positions: Sequence[float] | np.ndarray,
    dt_ms: float,
    sg_window: int = 7,
    sg_order: int = 2,
    clamp: float | None = 1000.0,
) -> np.ndarray:
    """Savitzky-Golay first derivative in units per second, clamped to +/-clamp.

    Edges are padded by repeating the end samples. Any sample whose fit
    window touches a NaN comes out NaN (clamping leaves NaN alone).
    """
    if sg_window % 2 != 1 or sg_window <= sg_order:
        raise PrepError("sg_window must be odd and greater than sg_order")
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim != 1:
        raise PrepError("positions must be one-dimensional")
    if len(x) < sg_window:
        raise PrepError(f"sequence of length {len(x)} shorter than sg_window={sg_window}")
    half = sg_window // 2
    coeffs = sg_derivative_coeffs(sg_window, sg_order)
    padded = np.pad(x, half, mode="edge")
    # pair samples symmetrically about the centre; constants cancel exactly
    n = len(x)
    vel = np.zeros(n)
    for k in range(1, half + 1):
        vel += coeffs[half + k] * (padded[half + k:half + k + n] - padded[half - k:half - k + n])
    # the centre sample carries no weight, so mark NaN-touched windows explicitly
    touched = np.lib.stride_tricks.sliding_window_view(np.isnan(padded), sg_window).any(axis=1)
    vel[touched] = np.nan
    vel *= 1000.0 / dt_ms
    if clamp is not None:
        vel = np.clip(vel, -clamp, clamp)
    return vel


# ---------------------------------------------------------------------------
# windows and segments


def make_windows(
    channels: np.ndarray,
    window_len: int,
    source: tuple[str, int, int, str] = ("", 1, 1, "SYNTH"),
) -> list[VelocityWindow]:
    """Split a C x N matrix into floor(N / L) non-overlapping windows.

    NaN entries are replaced by zero after their share is recorded in
    ``nan_fraction``; the trailing remainder is dropped.
    """
    if window_len < 1:
        raise PrepError("window length must be >= 1")
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim != 2:
        raise PrepError("channels must be a C x N matrix")
    c, n = channels.shape
    out = []
    for k in range(n // window_len):
        block = channels[:, k * window_len:(k + 1) * window_len]
        nan = np.isnan(block)
        frac = float(nan.sum()) / (c * window_len)
        out.append(VelocityWindow(np.where(nan, 0.0, block), frac, WindowSource(*source, k)))
    return out


def group_segments(windows: Sequence[VelocityWindow], segment_windows: int = SEGMENT_WINDOWS) -> list[Segment]:
    n = len(windows) // segment_windows
    return [Segment(list(windows[i * segment_windows:(i + 1) * segment_windows])) for i in range(n)]


def window_length(rate_hz: int, window_s: float = 5.0) -> int:
    return int(round(rate_hz * window_s))


def velocity_channels(rec: GazeRecording, dt_ms: float, config: PrepConfig) -> np.ndarray:
    eyes = config.eyes or rec.meta.eyes
    if eyes == "binocular" and rec.meta.eyes == "monocular_left":
        raise PrepError(f"{rec.meta.key}: binocular channels requested from a monocular recording")
    names = ("lx", "ly") if eyes == "monocular_left" else ("lx", "ly", "rx", "ry")
    return np.stack([
        differentiate_sg(getattr(rec, n), dt_ms, config.sg_window, config.sg_order, config.clamp)
        for n in names
    ])


def preprocess_recording(rec: GazeRecording, config: PrepConfig = PrepConfig()) -> list[VelocityWindow]:
    """Full chain from a raw recording to velocity windows."""
    dt = config.dt_ms if config.dt_ms is not None else 1000.0 / rec.meta.rate_hz
    rec = regularize_timestamps(rec, dt)
    if config.bounds is not None:
        rec = apply_screen_bounds(rec, config.bounds)
    if config.downsample and rec.meta.rate_hz == 1000:
        rec = decimate(rec, config.decimate_factor)
        dt *= config.decimate_factor
    if len(rec) < config.sg_window:
        return []
    vel = velocity_channels(rec, dt, config)
    return make_windows(vel, window_length(rec.meta.rate_hz, config.window_s), rec.meta.key)


# ---------------------------------------------------------------------------
# persistence

INDEX_FIELDS = ("subject", "round", "session", "task", "window_index", "nan_fraction")


def write_windows(windows: Sequence[VelocityWindow], path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>`` (binary) and ``<path stem>.csv`` (index).

    Binary layout: ASCII header line ``C=<c> L=<l> count=<n>`` then
    little-endian float32 values, window-major, channel-major, time-minor.
    """
    path = Path(path)
    if windows:
        c, l = windows[0].channels.shape
        if any(w.channels.shape != (c, l) for w in windows):
            raise PrepError("all windows must share one shape")
        payload = np.stack([w.channels for w in windows]).astype("<f4")
    else:
        c, l = 0, 0
        payload = np.zeros(0, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(f"C={c} L={l} count={len(windows)}\n".encode("ascii"))
        fh.write(payload.tobytes())
    index_path = path.with_suffix(".csv")
    with open(index_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDEX_FIELDS)
        for w in windows:
            s = w.source
            writer.writerow([s.subject_id, s.round, s.session, s.task, s.window_index, repr(w.nan_fraction)])
    return path, index_path


def read_windows(path: str | Path) -> list[VelocityWindow]:
    path = Path(path)
    raw = path.read_bytes()
    header, _, body = raw.partition(b"\n")
    try:
        fields = dict(tok.split("=") for tok in header.decode("ascii").split())
        c, l, count = int(fields["C"]), int(fields["L"]), int(fields["count"])
    except (KeyError, ValueError, UnicodeDecodeError):
        raise PrepError(f"{path}: malformed window header {header[:80]!r}") from None
    if len(body) != 4 * c * l * count:
        raise PrepError(f"{path}: payload size {len(body)} does not match header")
    data = np.frombuffer(body, dtype="<f4").reshape(count, c, l)
    with open(path.with_suffix(".csv"), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != count:
        raise PrepError(f"{path}: index has {len(rows)} rows, binary has {count} windows")
    return [
        VelocityWindow(
            data[i].astype(np.float32),
            float(r["nan_fraction"]),
            WindowSource(r["subject"], int(r["round"]), int(r["session"]), r["task"], int(r["window_index"])),
        )
        for i, r in enumerate(rows)
    ]
