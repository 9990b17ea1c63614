"""Ensemble embeddings, enrollment/probe templates, genuine/imposter scoring and
biometric error rates (ROC, EER, d-prime, FRR at a fixed FAR)."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .net import ModelCheckpoint, embed_windows
from .prep import SEGMENT_WINDOWS, VelocityWindow, group_segments

FAR_TARGET = 1e-4
HIST_BINS = 40


class EvalError(ValueError):
    pass


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise EvalError("cannot normalize a zero vector")
    return v / norm


def _sorted_checkpoints(checkpoints: Sequence[ModelCheckpoint]) -> list[ModelCheckpoint]:
    folds = [c.fold_index for c in checkpoints]
    if len(set(folds)) != len(folds):
        raise EvalError(f"duplicate fold_index among checkpoints: {folds}")
    if not checkpoints:
        raise EvalError("no checkpoints given")
    return sorted(checkpoints, key=lambda c: c.fold_index)


def ensemble_embed_windows(checkpoints: Sequence[ModelCheckpoint], windows: Sequence) -> np.ndarray:
    """Concatenate per-model embeddings in fold order and length-normalize each row."""
    ordered = _sorted_checkpoints(checkpoints)
    parts = [embed_windows(c.params, windows) for c in ordered]
    return normalize(np.concatenate(parts, axis=1))


def ensemble_embed(checkpoints: Sequence[ModelCheckpoint], window) -> np.ndarray:
    return ensemble_embed_windows(checkpoints, [window])[0]


def centroid(embeddings: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Mean of the embeddings, length-normalized."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or len(e) == 0:
        raise EvalError("centroid needs a non-empty (n, dim) array")
    mean = e.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise EvalError("degenerate template: embeddings average to (near) zero")
    return mean / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EvalError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class ScoreSets:
    genuine: np.ndarray
    imposter: np.ndarray
    genuine_pairs: list[tuple[str, str]] = field(default_factory=list)
    imposter_pairs: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.imposter = np.asarray(self.imposter, dtype=np.float64)


def build_score_sets(
    enroll: Mapping[str, np.ndarray],
    probe: Mapping[str, np.ndarray],
    similarity: Callable[[np.ndarray, np.ndarray], float] = cosine_similarity,
) -> ScoreSets:
    """Genuine scores pair each subject with itself; imposter scores cover every
    ordered (enroll, probe) pair of different subjects. Only subjects present in
    both maps take part."""
    shared = sorted(set(enroll) & set(probe))
    if len(shared) < 2:
        raise EvalError(f"need >= 2 subjects with both enroll and probe templates, got {len(shared)}")
    genuine, imposter, gp, ip = [], [], [], []
    for s in shared:
        for t in shared:
            score = similarity(enroll[s], probe[t])
            if s == t:
                genuine.append(score)
                gp.append((s, t))
            else:
                imposter.append(score)
                ip.append((s, t))
    return ScoreSets(np.array(genuine), np.array(imposter), gp, ip)


# ---------------------------------------------------------------------------
# error rates


@dataclass
class RocCurve:
    """FAR(t) = share of imposter scores >= t; FRR(t) = share of genuine scores < t."""

    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    n_genuine: int
    n_imposter: int


def roc(scores: ScoreSets) -> RocCurve:
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.imposter)
    if len(gen) == 0 or len(imp) == 0:
        raise EvalError("ROC needs non-empty genuine and imposter sets")
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([gen, imp])), [np.inf]])
    far = (len(imp) - np.searchsorted(imp, thresholds, side="left")) / len(imp)
    frr = np.searchsorted(gen, thresholds, side="left") / len(gen)
    return RocCurve(thresholds, far, frr, len(gen), len(imp))


def eer(curve: RocCurve) -> float:
    """Rate where FAR and FRR cross, linearly interpolated between thresholds."""
    diff = curve.far - curve.frr
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0:
        return float(curve.far[i])
    d0, d1 = diff[i - 1], diff[i]
    w = d0 / (d0 - d1)
    return float(curve.far[i - 1] + w * (curve.far[i] - curve.far[i - 1]))


def frr_at_far(curve: RocCurve, far_target: float = FAR_TARGET) -> float:
    """FRR at the smallest threshold whose FAR does not exceed ``far_target``."""
    i = int(np.argmax(curve.far <= far_target))
    return float(curve.frr[i])


def far_resolution_limited(n_imposter: int, far_target: float = FAR_TARGET) -> bool:
    return n_imposter < 1.0 / far_target


def d_prime(scores: ScoreSets) -> float:
    g, i = scores.genuine, scores.imposter
    if len(g) < 2 or len(i) < 2:
        raise EvalError("d-prime needs at least 2 genuine and 2 imposter scores")
    vg, vi = np.var(g, ddof=1), np.var(i, ddof=1)
    if vg == 0 and vi == 0:
        raise EvalError("d-prime undefined: both score sets have zero variance")
    return float((np.mean(g) - np.mean(i)) / math.sqrt((vg + vi) / 2))


# ---------------------------------------------------------------------------
# protocol


@dataclass(frozen=True)
class EvalProtocol:
    term: str
    task: str
    eyes: str = "binocular"
    enroll: tuple[int, int] = (1, 1)
    probe: tuple[int, int] = (1, 2)
    segment_windows: int = SEGMENT_WINDOWS

    def __post_init__(self):
        if self.term not in ("short", "long"):
            raise EvalError(f"term must be short or long, got {self.term!r}")
        object.__setattr__(self, "enroll", tuple(int(v) for v in self.enroll))
        object.__setattr__(self, "probe", tuple(int(v) for v in self.probe))

    @classmethod
    def short_term(cls, task: str, eyes: str = "binocular") -> "EvalProtocol":
        return cls("short", task, eyes, (1, 1), (1, 2))

    @classmethod
    def long_term(cls, task: str, probe_round: int, eyes: str = "binocular") -> "EvalProtocol":
        return cls("long", task, eyes, (1, 1), (probe_round, 1))


@dataclass
class EvalReport:
    protocol: EvalProtocol
    eer: float
    d_prime: float | None
    frr_at_far: float
    frr_std: float
    far_target: float
    roc: RocCurve
    scores: ScoreSets
    per_model: list[dict]
    subjects: list[str]
    dropped_subjects: list[str]
    flags: dict[str, bool]

    def histograms(self, bins: int = HIST_BINS) -> dict:
        edges = np.linspace(-1.0, 1.0, bins + 1)
        return {
            "edges": edges.tolist(),
            "genuine": np.histogram(self.scores.genuine, edges)[0].tolist(),
            "imposter": np.histogram(self.scores.imposter, edges)[0].tolist(),
        }

    def to_json(self) -> dict:
        return {
            "protocol": {**asdict(self.protocol), "enroll": list(self.protocol.enroll), "probe": list(self.protocol.probe)},
            "metrics": {
                "eer": self.eer,
                "d_prime": self.d_prime,
                "frr_at_far": self.frr_at_far,
                "frr_at_far_std": self.frr_std,
                "far_target": self.far_target,
            },
            "per_model": self.per_model,
            "counts": {
                "subjects": len(self.subjects),
                "genuine": len(self.scores.genuine),
                "imposter": len(self.scores.imposter),
            },
            "subjects": self.subjects,
            "dropped_subjects": self.dropped_subjects,
            "flags": self.flags,
            "notes": {
                "frr_at_far_std": "standard deviation (ddof=0) of FRR@FAR over the single fold models",
                "template": "centroid of the first full segment's window embeddings",
                "similarity": "cosine",
            },
            "histograms": self.histograms(),
        }


def _segment_windows(windows, subject, round_session, task, segment_windows):
    rnd, sess = round_session
    picked = sorted(
        (w for w in windows
         if w.source.subject_id == subject and w.source.round == rnd
         and w.source.session == sess and w.source.task == task),
        key=lambda w: w.source.window_index,
    )
    segments = group_segments(picked, segment_windows)
    return segments[0].windows if segments else None


def _templates(embed_fn, selections):
    return {s: centroid(embed_fn(ws)) for s, ws in selections.items()}


def _metrics(scores: ScoreSets, far_target: float) -> dict:
    curve = roc(scores)
    try:
        dp = d_prime(scores)
    except EvalError:
        dp = None
    return {"eer": eer(curve), "d_prime": dp, "frr_at_far": frr_at_far(curve, far_target), "curve": curve}


def evaluate(
    checkpoints: Sequence[ModelCheckpoint],
    windows: Sequence[VelocityWindow],
    protocol: EvalProtocol,
    subjects: Sequence[str] | None = None,
    far_target: float = FAR_TARGET,
    allow_self_match: bool = False,
) -> EvalReport:
    """Score one protocol over ``subjects`` (the held-out pool; default: all).

    Point estimates come from the ensemble; the FRR spread is the standard
    deviation across the single fold models evaluated the same way.
    """
    if protocol.enroll == protocol.probe and not allow_self_match:
        raise EvalError("enroll and probe recordings must differ")
    ordered = _sorted_checkpoints(checkpoints)
    in_ch = {c.config.in_channels for c in ordered}
    expected = 2 if protocol.eyes == "monocular_left" else 4
    if in_ch != {expected}:
        raise EvalError(f"protocol eyes={protocol.eyes} needs {expected}-channel models, got {sorted(in_ch)}")
    pool = sorted(subjects) if subjects is not None else sorted({w.source.subject_id for w in windows})

    absent = []
    for label, rs in (("enroll", protocol.enroll), ("probe", protocol.probe)):
        if not any(w.source.round == rs[0] and w.source.session == rs[1] and w.source.task == protocol.task
                   and w.source.subject_id in pool for w in windows):
            absent.append(f"{label} round {rs[0]} session {rs[1]} task {protocol.task}")
    if absent:
        raise EvalError("protocol references missing recordings: " + "; ".join(absent))

    enroll_sel, probe_sel, dropped = {}, {}, []
    for s in pool:
        e = _segment_windows(windows, s, protocol.enroll, protocol.task, protocol.segment_windows)
        p = _segment_windows(windows, s, protocol.probe, protocol.task, protocol.segment_windows)
        if e is None or p is None:
            dropped.append(s)
            continue
        enroll_sel[s], probe_sel[s] = e, p

    ensemble = lambda ws: ensemble_embed_windows(ordered, ws)
    scores = build_score_sets(_templates(ensemble, enroll_sel), _templates(ensemble, probe_sel))
    main = _metrics(scores, far_target)

    per_model = []
    for ckpt in ordered:
        single = lambda ws, c=ckpt: normalize(embed_windows(c.params, ws))
        m = _metrics(build_score_sets(_templates(single, enroll_sel), _templates(single, probe_sel)), far_target)
        per_model.append({"fold_index": ckpt.fold_index, "eer": m["eer"], "d_prime": m["d_prime"],
                          "frr_at_far": m["frr_at_far"]})
    frr_std = float(np.std([m["frr_at_far"] for m in per_model]))

    return EvalReport(
        protocol=protocol,
        eer=main["eer"],
        d_prime=main["d_prime"],
        frr_at_far=main["frr_at_far"],
        frr_std=frr_std,
        far_target=far_target,
        roc=main["curve"],
        scores=scores,
        per_model=per_model,
        subjects=sorted(enroll_sel),
        dropped_subjects=dropped,
        flags={"far_resolution_limited": far_resolution_limited(len(scores.imposter), far_target)},
    )


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"


def write_report(report: EvalReport, outdir: str | Path) -> dict[str, Path]:
    """Write report.json, roc.csv, scores_genuine.csv and scores_imposter.csv."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"report": outdir / "report.json", "roc": outdir / "roc.csv",
             "genuine": outdir / "scores_genuine.csv", "imposter": outdir / "scores_imposter.csv"}
    paths["report"].write_text(report_json(report), encoding="utf-8")
    with open(paths["roc"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "far", "frr"])
        for t, a, r in zip(report.roc.thresholds, report.roc.far, report.roc.frr):
            w.writerow([repr(float(t)), repr(float(a)), repr(float(r))])
    for key, values, pairs in (("genuine", report.scores.genuine, report.scores.genuine_pairs),
                               ("imposter", report.scores.imposter, report.scores.imposter_pairs)):
        with open(paths[key], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["enroll", "probe", "score"])
            for (e, p), v in zip(pairs, values):
                w.writerow([e, p, repr(float(v))])
    return paths


def read_scores(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([float(r["score"]) for r in csv.DictReader(fh)])


def read_roc(path: str | Path) -> RocCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    cols = {k: np.array([float(r[k]) for r in rows]) for k in ("threshold", "far", "frr")}
    return RocCurve(cols["threshold"], cols["far"], cols["frr"], 0, 0)
