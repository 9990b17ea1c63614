"""Flat ``key = value`` run configuration with a validated key registry.

Every accepted key is listed in ``REGISTRY`` together with its parser and
default. Defaults follow the published training setup wherever one is stated.
Lines starting with ``#`` and blank lines are ignored.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .data import EYES, RATES, TASKS
from .evaluate import FAR_TARGET, EvalProtocol
from .net import NetConfig
from .prep import GAZEBASE_BOUNDS, PrepConfig, ScreenBounds
from .train import MSLossHParams, TrainConfig

SEED_ENV = "GAZE_EMB_SEED"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(item: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        return tuple(item(p.strip()) for p in text.split(",") if p.strip())
    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _optional(item: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str) -> Any:
        return None if text.lower() in ("", "none") else item(text)
    return parse


def _pair(text: str) -> tuple[int, int]:
    vals = _list(int)(text)
    if len(vals) != 2:
        raise ValueError(f"expected 'round,session', got {text!r}")
    return vals


def _bounds(text: str) -> ScreenBounds | None:
    low = text.lower()
    if low in ("", "none"):
        return None
    if low == "gazebase":
        return GAZEBASE_BOUNDS
    vals = _list(float)(text)
    if len(vals) != 4:
        raise ValueError("bounds need x_min,x_max,y_min,y_max (or 'gazebase' / 'none')")
    return ScreenBounds(*vals)


def _tasks(text: str) -> tuple[str, ...]:
    vals = _list(str)(text)
    bad = [t for t in vals if t not in TASKS]
    if bad:
        raise ValueError(f"unknown task(s) {', '.join(bad)}")
    return vals


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    help: str


REGISTRY: dict[str, Key] = {
    "seed": Key(int, "0", f"master seed for synthesis and training (overridden by ${SEED_ENV})"),
    # stage inputs
    "paths.recordings": Key(str, "", "directory of canonical recording CSVs (prep, quality)"),
    "paths.windows": Key(str, "", "windows.bin written by prep (train, embed, eval)"),
    "paths.models": Key(str, "", "directory holding folds.json and fold<k>.ckpt (embed, eval)"),
    "paths.eval": Key(str, "", "directory written by eval (plot)"),
    "paths.quality": Key(str, "", "directory written by quality (plot)"),
    "paths.fixations": Key(str, "", "fixation CSV (x,y,tx,ty) or directory of them (quality)"),
    # synthesis
    "synth.n_subjects": Key(int, "8", "number of synthetic subjects"),
    "synth.tasks": Key(_tasks, "TEX", "comma-separated tasks"),
    "synth.duration_s": Key(float, "60", "recording length in seconds"),
    "synth.rate_hz": Key(int, "250", "sampling rate (250 or 1000)"),
    "synth.eyes": Key(_choice(*EYES), "binocular", "monocular_left or binocular"),
    "synth.sessions": Key(_list(int), "1,2", "sessions recorded per round"),
    "synth.n_long_term": Key(int, "0", "last N subjects also get the long-term round"),
    "synth.long_term_round": Key(int, "3", "round number of the long-term recordings"),
    # preprocessing
    "prep.dt_ms": Key(_optional(float), "none", "resampling period in ms (none = native period)"),
    "prep.sg_window": Key(int, "7", "Savitzky-Golay window length (samples)"),
    "prep.sg_order": Key(int, "2", "Savitzky-Golay polynomial order"),
    "prep.clamp": Key(float, "1000", "velocity clamp in deg/s"),
    "prep.window_s": Key(float, "5", "window length in seconds"),
    "prep.segment_windows": Key(int, "9", "windows per evaluation segment"),
    "prep.bounds": Key(_bounds, "none", "off-screen mask: none, gazebase, or x_min,x_max,y_min,y_max"),
    "prep.downsample": Key(_bool, "false", "decimate 1000 Hz input"),
    "prep.decimate_factor": Key(int, "4", "decimation factor"),
    "prep.eyes": Key(_choice("auto", *EYES), "auto", "channels to keep (auto = per recording)"),
    # network
    "net.n_conv_layers": Key(int, "8", "number of dilated conv layers"),
    "net.growth": Key(int, "32", "channels added per conv layer"),
    "net.kernel": Key(int, "3", "conv kernel width"),
    "net.dilations": Key(_list(int), "1,2,4,8,16,32,64,64", "one dilation per conv layer"),
    "net.embed_dim": Key(int, "128", "embedding size per model"),
    "net.use_norm": Key(_bool, "true", "batch norm after each conv"),
    # training
    "train.epochs": Key(int, "100", "epochs per fold"),
    "train.batch_size": Key(int, "64", "windows per batch"),
    "train.classes_per_batch": Key(int, "8", "subjects per batch"),
    "train.samples_per_class": Key(int, "8", "windows per subject per batch"),
    "train.lr_initial": Key(float, "1e-4", "learning rate at step 0"),
    "train.lr_peak": Key(float, "1e-2", "learning rate at the peak epoch"),
    "train.lr_final": Key(float, "1e-7", "learning rate at the final step"),
    "train.peak_epoch": Key(int, "30", "epoch at which the learning rate peaks"),
    "train.adam_beta1": Key(float, "0.9", "Adam first-moment decay"),
    "train.adam_beta2": Key(float, "0.999", "Adam second-moment decay"),
    "train.adam_eps": Key(float, "1e-8", "Adam epsilon"),
    "train.val_batches": Key(int, "4", "validation batches per epoch"),
    "train.rounds": Key(_list(int), "", "rounds in the training pool (empty = all)"),
    "train.exclude_tasks": Key(_tasks, "BLG", "tasks left out of the training pool"),
    "train.folds": Key(_list(int), "", "fold models to train in this process (empty = all)"),
    "loss.alpha": Key(float, "2", "multi-similarity positive scale"),
    "loss.beta": Key(float, "50", "multi-similarity negative scale"),
    "loss.base": Key(float, "0.5", "multi-similarity similarity offset"),
    "loss.epsilon": Key(float, "0.1", "pair-mining margin"),
    # splits
    "split.k": Key(int, "4", "number of folds"),
    "split.held_out": Key(_list(str), "", "subject ids excluded from training"),
    "split.n_held_out": Key(int, "0", "additionally hold out the last N subject ids"),
    # evaluation
    "eval.term": Key(_choice("short", "long"), "short", "short- or long-term protocol"),
    "eval.task": Key(_choice(*TASKS), "TEX", "task to evaluate"),
    "eval.eyes": Key(_choice(*EYES), "binocular", "channels the models were trained on"),
    "eval.enroll": Key(_pair, "1,1", "enrollment round,session"),
    "eval.probe": Key(_optional(_pair), "none", "probe round,session (none = protocol default)"),
    "eval.far_target": Key(float, str(FAR_TARGET), "FAR at which FRR is reported"),
    "eval.subjects": Key(_list(str), "", "subjects to score (empty = held-out subjects)"),
    # quality
    "quality.method": Key(_choice("rms", "std"), "rms", "precision definition"),
    "quality.settle_ms": Key(float, "300", "samples skipped after each target jump"),
}


class RunConfig:
    """Validated configuration values keyed by their registry name."""

    def __init__(self, values: Mapping[str, Any], raw: Mapping[str, str]):
        self._values = dict(values)
        self._raw = dict(raw)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._raw == other._raw

    def dump(self) -> str:
        return "".join(f"{k} = {self._raw[k]}\n" for k in REGISTRY)

    @property
    def seed(self) -> int:
        return self["seed"]

    def prep_config(self) -> PrepConfig:
        eyes = self["prep.eyes"]
        return PrepConfig(
            dt_ms=self["prep.dt_ms"], sg_window=self["prep.sg_window"], sg_order=self["prep.sg_order"],
            clamp=self["prep.clamp"], window_s=self["prep.window_s"], segment_windows=self["prep.segment_windows"],
            bounds=self["prep.bounds"], decimate_factor=self["prep.decimate_factor"],
            downsample=self["prep.downsample"], eyes=None if eyes == "auto" else eyes,
        )

    def net_config(self, in_channels: int) -> NetConfig:
        return NetConfig(
            in_channels=in_channels, n_conv_layers=self["net.n_conv_layers"], growth=self["net.growth"],
            kernel=self["net.kernel"], dilations=self["net.dilations"], embed_dim=self["net.embed_dim"],
            use_norm=self["net.use_norm"],
        )

    def loss_hparams(self) -> MSLossHParams:
        return MSLossHParams(self["loss.alpha"], self["loss.beta"], self["loss.base"], self["loss.epsilon"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"], batch_size=self["train.batch_size"],
            classes_per_batch=self["train.classes_per_batch"], samples_per_class=self["train.samples_per_class"],
            lr_initial=self["train.lr_initial"], lr_peak=self["train.lr_peak"], lr_final=self["train.lr_final"],
            peak_epoch=self["train.peak_epoch"], seed=self.seed, adam_beta1=self["train.adam_beta1"],
            adam_beta2=self["train.adam_beta2"], adam_eps=self["train.adam_eps"],
            val_batches=self["train.val_batches"], loss=self.loss_hparams(),
        )

    def protocol(self, last_round: int | None = None) -> EvalProtocol:
        """Evaluation protocol; the long-term probe defaults to (last round, session 1)."""
        probe = self["eval.probe"]
        if probe is None:
            if self["eval.term"] == "short":
                probe = (1, 2)
            else:
                if last_round is None:
                    raise ConfigError("eval.probe must be set for a long-term protocol without data")
                probe = (last_round, 1)
        return EvalProtocol(self["eval.term"], self["eval.task"], self["eval.eyes"], self["eval.enroll"], probe,
                            self["prep.segment_windows"])


def parse_lines(text: str, origin: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings from config text; rejects unknown keys."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        if key not in REGISTRY:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate config key {key!r}")
        out[key] = value.strip()
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        if key not in REGISTRY:
            raise ConfigError(f"--set: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Defaults, then the file, then ``--set`` overrides, then ``$GAZE_EMB_SEED``."""
    raw = {k: entry.default for k, entry in REGISTRY.items()}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_lines(path.read_text(encoding="utf-8"), str(path)))
    raw.update(parse_overrides(overrides))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        raw["seed"] = env[SEED_ENV].strip()

    values = {}
    for key, entry in REGISTRY.items():
        try:
            values[key] = entry.parse(raw[key])
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from None
    if values["synth.rate_hz"] not in RATES:
        raise ConfigError(f"synth.rate_hz must be one of {RATES}")
    return RunConfig(values, raw)
