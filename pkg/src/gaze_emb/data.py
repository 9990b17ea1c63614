"""Gaze recording model, canonical CSV ingestion and a synthetic gaze generator.

A recording is stored column-wise (one float array per field) rather than as a
list of sample objects; :attr:`GazeRecording.samples` gives the row view when
that is more convenient.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, TextIO

import numpy as np

TASKS = ("TEX", "RAN", "PUR", "VD", "VRG", "FXS", "HSS", "VD1", "VD2", "BLG", "SYNTH")
SYNTH_TASKS = ("RAN", "TEX", "PUR", "FXS")
EYES = ("monocular_left", "binocular")
RATES = (250, 1000)

COLUMNS = ("t_ms", "lx", "ly", "rx", "ry", "tx", "ty")
REQUIRED_COLUMNS = ("t_ms", "lx", "ly", "rx", "ry")
POSITION_COLUMNS = COLUMNS[1:]

# half-width of the synthetic field of view, dva
FIELD_LIMIT = 16.0

_EYES_SHORT = {"monocular_left": "mono", "binocular": "bino"}
_EYES_LONG = {v: k for k, v in _EYES_SHORT.items()}


class GazeDataError(ValueError):
    """Base class for recording errors."""


class SchemaError(GazeDataError):
    pass


class ParseError(GazeDataError):
    pass


class OrderingError(GazeDataError):
    pass


class GazeSample(NamedTuple):
    t_ms: float
    lx: float
    ly: float
    rx: float
    ry: float
    tx: float = math.nan
    ty: float = math.nan


@dataclass(frozen=True)
class RecordingMeta:
    subject_id: str
    round: int
    session: int
    task: str
    rate_hz: int
    eyes: str = "binocular"

    def __post_init__(self):
        if self.task not in TASKS:
            raise GazeDataError(f"unknown task {self.task!r}")
        if self.rate_hz not in RATES:
            raise GazeDataError(f"rate_hz must be one of {RATES}, got {self.rate_hz}")
        if self.eyes not in EYES:
            raise GazeDataError(f"eyes must be one of {EYES}, got {self.eyes!r}")
        if not 1 <= self.round <= 9:
            raise GazeDataError(f"round out of range: {self.round}")
        if not 1 <= self.session <= 2:
            raise GazeDataError(f"session out of range: {self.session}")

    @property
    def key(self) -> tuple[str, int, int, str]:
        return (self.subject_id, self.round, self.session, self.task)

    def to_line(self) -> str:
        return (
            f"subject={self.subject_id} round={self.round} session={self.session} "
            f"task={self.task} rate_hz={self.rate_hz} eyes={_EYES_SHORT[self.eyes]}"
        )

    @classmethod
    def from_line(cls, line: str) -> "RecordingMeta":
        fields = {}
        for token in line.split():
            name, sep, value = token.partition("=")
            if not sep:
                raise SchemaError(f"malformed metadata token {token!r}")
            fields[name] = value
        missing = [k for k in ("subject", "round", "session", "task", "rate_hz", "eyes") if k not in fields]
        if missing:
            raise SchemaError(f"metadata missing {', '.join(missing)}")
        if fields["eyes"] not in _EYES_LONG:
            raise SchemaError(f"eyes must be mono or bino, got {fields['eyes']!r}")
        try:
            return cls(
                subject_id=fields["subject"],
                round=int(fields["round"]),
                session=int(fields["session"]),
                task=fields["task"],
                rate_hz=int(fields["rate_hz"]),
                eyes=_EYES_LONG[fields["eyes"]],
            )
        except ValueError as exc:
            if isinstance(exc, GazeDataError):
                raise
            raise SchemaError(f"bad metadata value: {exc}") from None


@dataclass(eq=False)
class GazeRecording:
    """Timestamped binocular gaze positions (dva) plus metadata.

    Missing target columns are stored as NaN. Arrays are float64 and all of
    the same length; construction validates ordering and finiteness.
    """

    meta: RecordingMeta
    t_ms: np.ndarray
    lx: np.ndarray
    ly: np.ndarray
    rx: np.ndarray
    ry: np.ndarray
    tx: np.ndarray = field(default=None)
    ty: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.t_ms)
        for name in COLUMNS:
            arr = getattr(self, name)
            if arr is None:
                arr = np.full(n, np.nan)
            arr = np.array(arr, dtype=np.float64)
            if arr.ndim != 1 or len(arr) != n:
                raise GazeDataError(f"column {name} has inconsistent length")
            object.__setattr__(self, name, arr)
        if n == 0:
            raise GazeDataError("recording has no samples")
        if not np.all(np.isfinite(self.t_ms)) or self.t_ms[0] < 0:
            raise GazeDataError("timestamps must be finite and non-negative")
        if n > 1 and np.any(np.diff(self.t_ms) <= 0):
            bad = int(np.argmax(np.diff(self.t_ms) <= 0)) + 1
            raise OrderingError(f"timestamps not strictly increasing at sample {bad}")
        for name in POSITION_COLUMNS:
            if np.any(np.isinf(getattr(self, name))):
                raise GazeDataError(f"column {name} contains infinite values")
        if self.meta.eyes == "monocular_left":
            if not (np.all(np.isnan(self.rx)) and np.all(np.isnan(self.ry))):
                raise GazeDataError("monocular recording carries right-eye samples")

    def __len__(self) -> int:
        return len(self.t_ms)

    @property
    def samples(self) -> list[GazeSample]:
        cols = [getattr(self, c).tolist() for c in COLUMNS]
        return [GazeSample(*row) for row in zip(*cols)]

    def replace(self, **changes) -> "GazeRecording":
        return replace(self, **changes)

    def equals(self, other: "GazeRecording") -> bool:
        """Bitwise equality, NaN == NaN."""
        if self.meta != other.meta or len(self) != len(other):
            return False
        return all(
            np.array_equal(getattr(self, c), getattr(other, c), equal_nan=True) for c in COLUMNS
        )


# ---------------------------------------------------------------------------
# canonical CSV


def _format(value: float) -> str:
    return "nan" if math.isnan(value) else repr(float(value))


def serialize_recording(rec: GazeRecording) -> str:
    buf = io.StringIO()
    buf.write(",".join(COLUMNS) + "\n")
    cols = [getattr(rec, c).tolist() for c in COLUMNS]
    for row in zip(*cols):
        buf.write(",".join(_format(v) for v in row) + "\n")
    return buf.getvalue()


def parse_recording(text: str | TextIO, meta: RecordingMeta) -> GazeRecording:
    """Parse canonical ``t_ms,lx,ly,rx,ry,tx,ty`` CSV text.

    ``tx``/``ty`` may be omitted; empty cells and ``nan`` become NaN.
    """
    stream = io.StringIO(text) if isinstance(text, str) else text
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty recording: no header row") from None
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    index = {name: header.index(name) for name in COLUMNS if name in header}

    data: dict[str, list[float]] = {name: [] for name in COLUMNS}
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"row {row_no}: expected {len(header)} cells, got {len(row)}")
        for name in COLUMNS:
            if name not in index:
                data[name].append(math.nan)
                continue
            cell = row[index[name]].strip()
            if cell == "" or cell.lower() == "nan":
                if name == "t_ms":
                    raise ParseError(f"row {row_no}: missing timestamp")
                data[name].append(math.nan)
                continue
            try:
                data[name].append(float(cell))
            except ValueError:
                raise ParseError(f"row {row_no}: non-numeric value {cell!r} in column {name}") from None
    if not data["t_ms"]:
        raise SchemaError("recording has no data rows")
    t = np.asarray(data["t_ms"])
    if np.any(np.diff(t) <= 0):
        bad = int(np.argmax(np.diff(t) <= 0)) + 1
        raise OrderingError(f"timestamps not strictly increasing at data row {bad + 1}")
    return GazeRecording(meta, **{name: np.asarray(vals) for name, vals in data.items()})


def recording_filename(meta: RecordingMeta) -> str:
    return f"S{meta.subject_id}_R{meta.round}_S{meta.session}_{meta.task}.csv"


def write_recording(rec: GazeRecording, path: str | Path) -> Path:
    """Write ``path`` (CSV) and its ``.meta`` sidecar."""
    path = Path(path)
    path.write_text(serialize_recording(rec), encoding="utf-8")
    path.with_suffix(".meta").write_text(rec.meta.to_line() + "\n", encoding="utf-8")
    return path


def read_recording(path: str | Path) -> GazeRecording:
    path = Path(path)
    meta_path = path.with_suffix(".meta")
    if not meta_path.exists():
        raise SchemaError(f"missing metadata sidecar {meta_path}")
    meta = RecordingMeta.from_line(meta_path.read_text(encoding="utf-8").strip())
    with open(path, encoding="utf-8", newline="") as fh:
        try:
            return parse_recording(fh, meta)
        except GazeDataError as exc:
            raise type(exc)(f"{path.name}: {exc}") from None


def read_recordings(directory: str | Path) -> list[GazeRecording]:
    paths = sorted(Path(directory).glob("*.csv"))
    return [read_recording(p) for p in paths]


# ---------------------------------------------------------------------------
# synthetic subjects


@dataclass(frozen=True)
class SubjectParams:
    """Per-subject oculomotor idiosyncrasies driving the synthetic generator."""

    saccade_vmax: float = 500.0  # deg/s, main-sequence asymptote
    saccade_c: float = 5.0  # dva, main-sequence curvature
    fixation_noise_sigma: float = 0.05  # dva per axis
    saccade_rate: float = 3.0  # Hz
    pursuit_gain: float = 0.9
    latency_ms: float = 200.0
    vergence_dva: float = 0.3  # constant right-eye horizontal offset

    def __post_init__(self):
        if not 200 <= self.saccade_vmax <= 800:
            raise GazeDataError(f"saccade_vmax must be in [200, 800], got {self.saccade_vmax}")
        if not 0.01 <= self.fixation_noise_sigma <= 0.5 and self.fixation_noise_sigma != 0:
            raise GazeDataError(
                f"fixation_noise_sigma must be in [0.01, 0.5] (or exactly 0), got {self.fixation_noise_sigma}"
            )
        if not 0 < self.pursuit_gain <= 1:
            raise GazeDataError(f"pursuit_gain must be in (0, 1], got {self.pursuit_gain}")
        if self.saccade_c <= 0 or self.saccade_rate <= 0 or self.latency_ms < 0:
            raise GazeDataError("saccade_c and saccade_rate must be positive, latency_ms non-negative")


def peak_velocity(params: SubjectParams, amplitude: float) -> float:
    """Main-sequence peak velocity (deg/s) for a saccade of ``amplitude`` dva."""
    return params.saccade_vmax * (1.0 - math.exp(-amplitude / params.saccade_c))


def _raised_cosine_progress(u: np.ndarray) -> np.ndarray:
    # integral of the normalized raised-cosine velocity profile, 0 -> 1 over u in [0, 1]
    u = np.clip(u, 0.0, 1.0)
    return u - np.sin(2 * np.pi * u) / (2 * np.pi)


class _Track:
    """Piecewise gaze trajectory made of holds and raised-cosine saccades."""

    def __init__(self, start):
        self.start = np.asarray(start, dtype=float)
        self.pos = self.start.copy()
        self.saccades = []  # (onset_s, duration_s, from_xy, to_xy)

    def saccade(self, onset: float, params: SubjectParams, to) -> float:
        to = np.asarray(to, dtype=float)
        amp = float(np.hypot(*(to - self.pos)))
        if amp < 1e-6:
            return onset
        duration = 2.0 * amp / peak_velocity(params, amp)
        self.saccades.append((onset, duration, self.pos.copy(), to))
        self.pos = to
        return onset + duration

    def render(self, t_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xy = np.empty((len(t_s), 2))
        xy[:] = self.start
        for onset, duration, a, b in self.saccades:
            mask = t_s >= onset
            if not mask.any():
                break
            prog = _raised_cosine_progress((t_s[mask] - onset) / duration)
            xy[mask] = a + (b - a) * prog[:, None]
        return xy[:, 0], xy[:, 1]


def _dwell(params: SubjectParams, rng: np.random.Generator) -> float:
    return 0.1 + rng.exponential(1.0 / params.saccade_rate)


def _synth_ran(params, t_s, duration_s, rng):
    target = rng.uniform(-15, 15, size=2)
    track = _Track(target)
    tx = np.full(len(t_s), target[0])
    ty = np.full(len(t_s), target[1])
    jump = _dwell(params, rng)
    while jump < duration_s:
        target = rng.uniform(-15, 15, size=2)
        after = t_s >= jump
        tx[after], ty[after] = target
        end = track.saccade(jump + params.latency_ms / 1000.0, params, target)
        jump = end + _dwell(params, rng)
    x, y = track.render(t_s)
    return x, y, tx, ty


def _synth_tex(params, t_s, duration_s, rng):
    lines = np.linspace(6.0, -6.0, 9)
    line = 0
    track = _Track((-12.0, lines[0]))
    t = _dwell(params, rng)
    while t < duration_s:
        x, y = track.pos
        if x >= 12.0:
            line = (line + 1) % len(lines)
            nxt = (-12.0 + rng.uniform(-0.5, 0.5), lines[line])
        else:
            nxt = (x + rng.uniform(1.5, 3.0), y)
        t = track.saccade(t, params, nxt) + _dwell(params, rng)
    x, y = track.render(t_s)
    nan = np.full(len(t_s), np.nan)
    return x, y, nan, nan.copy()


def _synth_pur(params, t_s, duration_s, rng):
    freq = 0.4  # Hz
    amp = 10.0
    phase = rng.uniform(0, 2 * np.pi)
    tx = amp * np.sin(2 * np.pi * freq * t_s + phase)
    lag = params.latency_ms / 1000.0
    x = params.pursuit_gain * amp * np.sin(2 * np.pi * freq * (t_s - lag) + phase)
    zeros = np.zeros(len(t_s))
    return x, zeros, tx, zeros.copy()


def _synth_fxs(params, t_s, duration_s, rng):
    zeros = np.zeros(len(t_s))
    return zeros, zeros.copy(), zeros.copy(), zeros.copy()


_GENERATORS = {"RAN": _synth_ran, "TEX": _synth_tex, "PUR": _synth_pur, "FXS": _synth_fxs}


def synth_recording(
    params: SubjectParams,
    task: str,
    duration_s: float,
    rate_hz: int,
    seed: int,
    *,
    subject_id: str = "synth",
    round: int = 1,
    session: int = 1,
    eyes: str = "binocular",
) -> GazeRecording:
    """Generate a deterministic synthetic recording.

    RAN alternates fixations with main-sequence saccades to random targets,
    TEX produces left-to-right reading staircases with return sweeps, PUR
    follows a horizontal sinusoid with gain and lag, and FXS holds a central
    target. Per-axis Gaussian noise is added independently to each eye; the
    right eye carries a constant horizontal vergence offset.
    """
    if task not in _GENERATORS:
        raise GazeDataError(f"unsupported synthetic task {task!r}; choose from {SYNTH_TASKS}")
    if not duration_s > 0:
        raise GazeDataError(f"duration_s must be positive, got {duration_s}")
    if rate_hz not in RATES:
        raise GazeDataError(f"rate_hz must be one of {RATES}, got {rate_hz}")
    rng = np.random.default_rng(seed)
    n = int(round_half_up(duration_s * rate_hz))
    t_ms = np.arange(n) * (1000.0 / rate_hz)
    x, y, tx, ty = _GENERATORS[task](params, t_ms / 1000.0, duration_s, rng)

    sigma = params.fixation_noise_sigma
    noise = rng.normal(0.0, 1.0, size=(4, n)) * sigma
    lx = np.clip(x + noise[0], -FIELD_LIMIT, FIELD_LIMIT)
    ly = np.clip(y + noise[1], -FIELD_LIMIT, FIELD_LIMIT)
    if eyes == "binocular":
        rx = np.clip(x + params.vergence_dva + noise[2], -FIELD_LIMIT, FIELD_LIMIT)
        ry = np.clip(y + noise[3], -FIELD_LIMIT, FIELD_LIMIT)
    else:
        rx = np.full(n, np.nan)
        ry = np.full(n, np.nan)
    meta = RecordingMeta(subject_id, round, session, task, rate_hz, eyes)
    return GazeRecording(meta, t_ms, lx, ly, rx, ry, tx, ty)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def spread_subject_params(n: int, seed: int) -> list[SubjectParams]:
    """Draw ``n`` subjects whose parameters are stratified across their ranges.

    Each parameter range is cut into ``n`` strata and every subject gets a
    different stratum (a Latin hypercube), so no two subjects share a value
    band in any dimension.
    """
    if n < 1:
        raise GazeDataError("need at least one subject")
    rng = np.random.default_rng(seed)

    def strata(lo, hi, log=False):
        u = (rng.permutation(n) + rng.uniform(0.25, 0.75, size=n)) / n
        if log:
            return np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo)))
        return lo + u * (hi - lo)

    vmax = strata(250, 750)
    c = strata(2.0, 10.0)
    sigma = strata(0.015, 0.45, log=True)
    rate = strata(1.5, 4.5)
    gain = strata(0.6, 1.0)
    latency = strata(120, 320)
    verg = strata(-1.0, 1.0)
    return [
        SubjectParams(
            saccade_vmax=float(vmax[i]),
            saccade_c=float(c[i]),
            fixation_noise_sigma=float(sigma[i]),
            saccade_rate=float(rate[i]),
            pursuit_gain=float(gain[i]),
            latency_ms=float(latency[i]),
            vergence_dva=float(verg[i]),
        )
        for i in range(n)
    ]


def recording_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


def synth_dataset(
    n_subjects: int,
    *,
    tasks: Iterable[str] = ("TEX",),
    duration_s: float = 60.0,
    rate_hz: int = 250,
    eyes: str = "binocular",
    n_long_term: int = 0,
    long_term_round: int = 3,
    sessions: Iterable[int] = (1, 2),
    seed: int = 0,
) -> list[GazeRecording]:
    """Synthesize a multi-subject corpus.

    Every subject gets round 1 ``sessions`` (default 1 and 2) for each task.
    The last ``n_long_term`` subjects additionally get ``long_term_round``
    with the same sessions, mirroring corpora where only a subset returns for a later round.
    Subject ids are zero-padded integers starting at ``001``.
    """
    tasks = tuple(tasks)
    sessions = tuple(sessions)
    params = spread_subject_params(n_subjects, seed)
    width = max(3, len(str(n_subjects)))
    out = []
    for s, p in enumerate(params):
        sid = str(s + 1).zfill(width)
        rounds = [1]
        if s >= n_subjects - n_long_term:
            rounds.append(long_term_round)
        for rnd in rounds:
            for session in sessions:
                for ti, task in enumerate(tasks):
                    rs = recording_seed(seed, s, rnd, session, ti)
                    out.append(
                        synth_recording(
                            p, task, duration_s, rate_hz, rs,
                            subject_id=sid, round=rnd, session=session, eyes=eyes,
                        )
                    )
    return out
