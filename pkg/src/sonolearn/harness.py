"""Experiment orchestration: datasets, training stages, metrics, and reports.

Every stage output is content-addressed: the artifact filename embeds a short
hash of exactly the configuration fields that influence it. A rerun with an
unchanged config finds its artifacts on disk and skips the work; changing any
relevant field (a seed, an epoch count, the noise level) yields a new hash and
a fresh compute. Reports are deterministic functions of the configuration:
all randomness flows from explicit seeds, and wall time is zeroed under
deterministic mode so report files are byte-identical across runs.

Models are always evaluated from their serialized form, never from the
freshly fitted in-memory object. Checkpoints store float32, so evaluating the
in-memory model on the first run and the deserialized one on a rerun would
differ in the last few bits and break report determinism.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from configparser import ConfigParser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import svgplot
from .dsp import ChannelStats, amplitude_envelope, fit_channel_stats
from .dtw import dtw_distance, fit_normalization, normalized_score
from .models import (
    AudioBehaviorModel,
    fit_probe_model,
    fit_supervised_model,
    load_model,
    oracle_baseline,
    random_baseline,
    save_model,
)
from .nn.checkpoint import load_encoder_state, save_encoder_state
from .nn.encoder import clone_state
from .ssl import (
    VARIANTS,
    ByolPretrainer,
    SpectrogramPool,
    duplicate_mono,
    mel_batch,
    normalize_batch,
)
from .synth import (
    TASKS,
    ContactSoundDataset,
    generate_dataset,
    load_dataset,
    mix_seed,
    quantize_action,
    simulate,
)
from .validation import check_action_batch

log = logging.getLogger("sonolearn.harness")

REPORT_SCHEMA = "sonolearn-report-v1"
SCALES = ("desk", "paper")
METHODS = ("probe", "supervised", "supervised_aug", "random", "oracle")
METRICS = ("mse", "dtw")
AUDIO_KINDS = ("probe", "supervised", "supervised_aug")

# per-task config keys that [task.<id>] sections may override
TASK_OVERRIDE_KEYS = ("n_behaviors", "repeats", "noise_level")


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and config hash."""

    def __init__(self, stage, config_hash, cause):
        super().__init__(f"stage {stage!r} failed for config {config_hash}: {cause}")
        self.stage = stage
        self.config_hash = config_hash


@dataclass
class RunConfig:
    """Everything a pipeline run depends on. Defaults are the desk scale."""

    tasks: tuple = tuple(TASKS)
    scale: str = "desk"
    methods: tuple = ("probe", "supervised", "random", "oracle")
    metrics: tuple = ("mse", "dtw")
    seeds: tuple = (0, 1, 2)
    out_dir: str = "runs"
    deterministic: bool = False
    # dataset
    n_behaviors: int = 200
    repeats: int = 5
    train_fraction: float = 0.8
    noise_level: float = 0.01
    master_seed: int = 0
    # encoder
    block_widths: tuple = (8, 16, 32, 64)
    repr_dim: int = 64
    proj_dim: int = 32
    pred_hidden: int = 128
    # self-supervised pretraining
    variant: str = "BYOL"
    use_mixup: bool = False
    pretrain_epochs: int = 100
    pretrain_batch: int = 128
    pretrain_lr: float = 0.2
    # supervised baseline
    supervised_epochs: int = 40
    supervised_batch: int = 128
    # linear probe
    probe_max_epochs: int = 30000
    # evaluation
    dtw_repeats: int = 5
    dtw_seed: int = 0
    # low-data sweep
    sweep_slices: tuple = (50, 100, 200)
    # per-task overrides: {task_id: {key: value}}, keys in TASK_OVERRIDE_KEYS
    task_overrides: dict = field(default_factory=dict)

    def task_value(self, task_id, key):
        return self.task_overrides.get(task_id, {}).get(key, getattr(self, key))


# paper-scale deviations from the dataclass defaults; everything else carries over
_PAPER_PRESET = {
    "scale": "paper",
    "n_behaviors": 1000,
    "pretrain_epochs": 1000,
    "pretrain_batch": 1024,
    "repr_dim": 512,
}


def make_config(scale="desk", **overrides) -> RunConfig:
    """Build a config from a scale preset plus explicit overrides."""
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    values = dict(_PAPER_PRESET) if scale == "paper" else {"scale": "desk"}
    values.update(overrides)
    names = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    if cfg.scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {cfg.scale!r}")
    if not cfg.tasks:
        raise ConfigError("tasks must be non-empty")
    for t in cfg.tasks:
        if t not in TASKS:
            raise ConfigError(f"unknown task {t!r}; known tasks: {', '.join(TASKS)}")
    if not cfg.methods:
        raise ConfigError("methods must be non-empty")
    for m in cfg.methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; known methods: {', '.join(METHODS)}")
    for m in cfg.metrics:
        if m not in METRICS:
            raise ConfigError(f"unknown metric {m!r}; known metrics: {', '.join(METRICS)}")
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    if not 0.0 < cfg.train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {cfg.train_fraction}")
    if cfg.noise_level < 0:
        raise ConfigError(f"noise_level must be >= 0, got {cfg.noise_level}")
    for name in ("n_behaviors", "repeats", "pretrain_epochs", "pretrain_batch",
                 "supervised_epochs", "supervised_batch", "probe_max_epochs",
                 "dtw_repeats", "repr_dim", "proj_dim", "pred_hidden"):
        v = getattr(cfg, name)
        if not isinstance(v, int) or v < 1:
            raise ConfigError(f"{name} must be a positive integer, got {v!r}")
    if cfg.n_behaviors < 2:
        raise ConfigError(f"n_behaviors must be >= 2, got {cfg.n_behaviors}")
    if cfg.dtw_repeats < 2:
        raise ConfigError(f"dtw_repeats must be >= 2 to fit normalization stats, "
                          f"got {cfg.dtw_repeats}")
    for task_id, over in cfg.task_overrides.items():
        if task_id not in TASKS:
            raise ConfigError(f"task override for unknown task {task_id!r}")
        for key in over:
            if key not in TASK_OVERRIDE_KEYS:
                raise ConfigError(
                    f"[task.{task_id}] may only override {TASK_OVERRIDE_KEYS}, got {key!r}"
                )
    return cfg


def config_fingerprint(cfg: RunConfig) -> dict:
    """The fields that determine report content. Excludes out_dir (placement,
    not science) and deterministic (changes only the wall-time field)."""
    skip = {"out_dir", "deterministic"}
    return {f.name: getattr(cfg, f.name) for f in fields(RunConfig) if f.name not in skip}


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=list)


def stage_hash(payload) -> str:
    return hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()[:12]


def config_hash(cfg: RunConfig) -> str:
    return stage_hash(config_fingerprint(cfg))


# ---- INI config files -------------------------------------------------------

_INI_SECTIONS = {
    "run": ("tasks", "scale", "methods", "metrics", "seeds", "out_dir", "deterministic"),
    "dataset": ("n_behaviors", "repeats", "train_fraction", "noise_level", "master_seed"),
    "encoder": ("block_widths", "repr_dim", "proj_dim", "pred_hidden"),
    "pretrain": ("variant", "use_mixup", "pretrain_epochs", "pretrain_batch", "pretrain_lr"),
    "supervised": ("supervised_epochs", "supervised_batch"),
    "probe": ("probe_max_epochs",),
    "eval": ("dtw_repeats", "dtw_seed"),
    "sweep": ("sweep_slices",),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name, raw):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "tuple":
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if name in ("seeds", "block_widths", "sweep_slices"):
                return tuple(int(s) for s in items)
            return tuple(items)
        if kind == "bool":
            lower = raw.lower()
            if lower in ("true", "yes", "1", "on"):
                return True
            if lower in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {e}") from e


def load_run_config(path, **overrides) -> RunConfig:
    """Parse an INI run config. Sections group related keys; [task.<id>]
    sections override dataset-shape keys for a single task."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except Exception as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e

    values = {}
    task_overrides = {}
    for section in parser.sections():
        if section.startswith("task."):
            task_id = section[len("task."):]
            over = {}
            for key, raw in parser.items(section):
                if key not in TASK_OVERRIDE_KEYS:
                    raise ConfigError(
                        f"[{section}] may only set {TASK_OVERRIDE_KEYS}, got {key!r}"
                    )
                over[key] = _parse_value(key, raw)
            task_overrides[task_id] = over
            continue
        if section not in _INI_SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        allowed = _INI_SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _parse_value(key, raw)
    if task_overrides:
        values["task_overrides"] = task_overrides
    ini_scale = values.pop("scale", "desk")
    scale = overrides.pop("scale", None) or ini_scale
    values.update(overrides)
    return make_config(scale=scale, **values)


# ---- dataset + spectrogram stages -------------------------------------------

@dataclass
class TaskArrays:
    """One split of one task, fully materialized: raw (pre-normalization) mel
    spectrograms plus the aligned labels."""

    specs: np.ndarray        # (n, channels, n_mels, n_frames) float32
    actions: np.ndarray      # (n, action_dim) float64
    behavior_ids: np.ndarray
    repeat_idxs: np.ndarray
    records: list

    def subset(self, behaviors) -> "TaskArrays":
        mask = np.isin(self.behavior_ids, np.asarray(sorted(behaviors)))
        return TaskArrays(
            specs=self.specs[mask],
            actions=self.actions[mask],
            behavior_ids=self.behavior_ids[mask],
            repeat_idxs=self.repeat_idxs[mask],
            records=[r for r, keep in zip(self.records, mask) if keep],
        )


def dataset_params(cfg: RunConfig, task_id) -> dict:
    return {
        "stage": "gen",
        "task": task_id,
        "n_behaviors": cfg.task_value(task_id, "n_behaviors"),
        "repeats": cfg.task_value(task_id, "repeats"),
        "noise_level": cfg.task_value(task_id, "noise_level"),
        "master_seed": cfg.master_seed,
        "train_fraction": cfg.train_fraction,
    }


def dataset_dir(cfg: RunConfig, task_id) -> Path:
    return Path(cfg.out_dir) / "data" / f"{task_id}-{stage_hash(dataset_params(cfg, task_id))}"


def ensure_dataset(cfg: RunConfig, task_id) -> ContactSoundDataset:
    """Generate the task's dataset unless its content-addressed dir exists."""
    root = dataset_dir(cfg, task_id)
    if (root / "manifest.json").exists():
        log.info("gen %s: reusing %s", task_id, root)
        return load_dataset(root)
    p = dataset_params(cfg, task_id)
    log.info("gen %s: %d behaviors x %d repeats -> %s",
             task_id, p["n_behaviors"], p["repeats"], root)
    return generate_dataset(
        task_id, p["n_behaviors"], p["repeats"], root,
        noise_level=p["noise_level"], master_seed=p["master_seed"],
        train_fraction=p["train_fraction"],
    )


def load_split_arrays(dataset: ContactSoundDataset, split, cache=True) -> TaskArrays:
    """Mel-transform one split, with an on-disk cache beside the audio."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    records = dataset.train_records if split == "train" else dataset.test_records
    cache_path = dataset.root / f"specs_{split}.npz"
    specs = None
    if cache and cache_path.exists():
        with np.load(cache_path) as z:
            cached = z["specs"]
        if len(cached) == len(records):
            specs = cached
    if specs is None:
        log.info("spectrograms %s/%s: computing %d clips",
                 dataset.task_id, split, len(records))
        specs = mel_batch(dataset, records)
        if cache:
            tmp = cache_path.with_suffix(".npz.tmp")
            with open(tmp, "wb") as fh:
                np.savez(fh, specs=specs)
            os.replace(tmp, cache_path)
    return TaskArrays(
        specs=specs,
        actions=dataset.actions_for(records),
        behavior_ids=np.array([r.behavior_id for r in records], dtype=np.int64),
        repeat_idxs=np.array([r.repeat_idx for r in records], dtype=np.int64),
        records=records,
    )


def match_channels(specs, in_channels):
    """Adapt a spectrogram batch to a model's channel count (mono duplication
    is the only supported widening; anything else is a real mismatch)."""
    if specs.shape[1] == in_channels:
        return specs
    if specs.shape[1] == 1 and in_channels == 2:
        return duplicate_mono(specs)
    raise ValueError(
        f"cannot adapt {specs.shape[1]}-channel spectrograms to a "
        f"{in_channels}-channel encoder"
    )


def _state_stats(state) -> ChannelStats:
    return ChannelStats(
        mean=np.asarray(state.channel_mean, dtype=np.float64),
        std=np.asarray(state.channel_std, dtype=np.float64),
    )


# ---- training stages ---------------------------------------------------------

def _arch_params(cfg: RunConfig) -> dict:
    return {
        "block_widths": cfg.block_widths,
        "repr_dim": cfg.repr_dim,
        "proj_dim": cfg.proj_dim,
        "pred_hidden": cfg.pred_hidden,
    }


def _pretrain_payload(cfg, task_id, seed, variant, use_mixup, slice_size):
    if variant == "BYOL_ALL":
        data = [dataset_params(cfg, t) for t in cfg.tasks]
    else:
        data = dataset_params(cfg, task_id)
    return {
        "stage": "pretrain",
        "data": data,
        "variant": variant,
        "use_mixup": use_mixup,
        "epochs": cfg.pretrain_epochs,
        "batch": cfg.pretrain_batch,
        "lr": cfg.pretrain_lr,
        "seed": seed,
        "slice": slice_size,
        **_arch_params(cfg),
    }


def _fit_pool(cfg, seed, variant, use_mixup, pool, stats):
    trainer = ByolPretrainer(
        variant=variant, epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch,
        lr=cfg.pretrain_lr, seed=seed, use_mixup=use_mixup,
        block_widths=cfg.block_widths, repr_dim=cfg.repr_dim,
        proj_dim=cfg.proj_dim, pred_hidden=cfg.pred_hidden,
    )
    trainer.fit(pool, stats=stats)
    return trainer.state_


def pretrain_stage(cfg: RunConfig, task_id, seed, train: TaskArrays,
                   stats: ChannelStats, variant=None, use_mixup=None,
                   slice_size=None):
    """Pretrain (or reload) the encoder for one task. The checkpoint carries
    the channel stats so downstream consumers normalize identically."""
    variant = cfg.variant if variant is None else variant
    use_mixup = cfg.use_mixup if use_mixup is None else use_mixup
    h = stage_hash(_pretrain_payload(cfg, task_id, seed, variant, use_mixup, slice_size))
    tag = f"{variant}{'-mixup' if use_mixup else ''}"
    path = Path(cfg.out_dir) / "checkpoints" / f"{task_id}-{tag}-s{seed}-{h}.arlc"
    if path.exists():
        log.info("pretrain %s/%s seed %d: reusing %s", task_id, tag, seed, path.name)
        return load_encoder_state(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log.info("pretrain %s/%s seed %d: %d epochs on %d clips",
             task_id, tag, seed, cfg.pretrain_epochs, len(train.specs))
    pool = SpectrogramPool(normalize_batch(train.specs, stats),
                           train.behavior_ids, train.repeat_idxs)
    state = _fit_pool(cfg, seed, variant, use_mixup, pool, stats)
    save_encoder_state(state, path)
    return load_encoder_state(path)


def pretrain_all_stage(cfg: RunConfig, seed, task_data: dict):
    """Cross-task variant: one encoder over every task's train pool. Mono
    tasks are duplicated to two channels; each task keeps its own
    normalization; behavior ids are offset so repeats never collide."""
    h = stage_hash(_pretrain_payload(cfg, None, seed, "BYOL_ALL", cfg.use_mixup, None))
    tag = f"BYOL_ALL{'-mixup' if cfg.use_mixup else ''}"
    path = Path(cfg.out_dir) / "checkpoints" / f"all-{tag}-s{seed}-{h}.arlc"
    if path.exists():
        log.info("pretrain all-tasks seed %d: reusing %s", seed, path.name)
        return load_encoder_state(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    merged = None
    for task_id in cfg.tasks:
        train, stats = task_data[task_id]
        specs = normalize_batch(train.specs, stats)
        if specs.shape[1] == 1:
            specs = duplicate_mono(specs)
        pool = SpectrogramPool(specs, train.behavior_ids, train.repeat_idxs)
        if merged is None:
            merged = pool
        else:
            merged = merged.merge(pool, behavior_offset=int(merged.behavior_ids.max()) + 1)
    log.info("pretrain all-tasks seed %d: %d epochs on %d clips",
             seed, cfg.pretrain_epochs, len(merged))
    # the shared encoder gets identity stats; per-task clones restamp their own
    identity = ChannelStats(mean=np.zeros(2), std=np.ones(2))
    state = _fit_pool(cfg, seed, "BYOL_ALL", cfg.use_mixup, merged, identity)
    save_encoder_state(state, path)
    return load_encoder_state(path)


def _materialize(path: Path, fitter) -> AudioBehaviorModel:
    """Fit-and-save unless the artifact exists, then always load from disk so
    first runs and reruns evaluate bit-identical float32 weights."""
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        save_model(fitter(), path)
    else:
        log.info("model: reusing %s", path.name)
    return load_model(path)


def probe_stage(cfg: RunConfig, task_id, seed, state, train: TaskArrays,
                variant=None, use_mixup=None, slice_size=None) -> AudioBehaviorModel:
    variant = cfg.variant if variant is None else variant
    use_mixup = cfg.use_mixup if use_mixup is None else use_mixup
    payload = {
        "stage": "probe",
        "pretrain": _pretrain_payload(cfg, task_id, seed, variant, use_mixup, slice_size),
        "task": task_id,
        "probe_max_epochs": cfg.probe_max_epochs,
    }
    tag = f"probe-{variant}{'-mixup' if use_mixup else ''}"
    path = Path(cfg.out_dir) / "models" / f"{task_id}-{tag}-s{seed}-{stage_hash(payload)}.arlc"

    def fit():
        log.info("probe %s/%s seed %d: fitting on %d clips",
                 task_id, variant, seed, len(train.specs))
        specs = match_channels(train.specs, state.config.in_channels)
        specs_n = normalize_batch(specs, _state_stats(state))
        model, _ = fit_probe_model(state, specs_n, train.actions, task_id,
                                   max_epochs=cfg.probe_max_epochs, seed=seed)
        return model

    return _materialize(path, fit)


def supervised_stage(cfg: RunConfig, task_id, seed, train: TaskArrays,
                     stats: ChannelStats, augment=False,
                     slice_size=None) -> AudioBehaviorModel:
    payload = {
        "stage": "supervised",
        "data": dataset_params(cfg, task_id),
        "epochs": cfg.supervised_epochs,
        "batch": cfg.supervised_batch,
        "augment": augment,
        "seed": seed,
        "slice": slice_size,
        **_arch_params(cfg),
    }
    kind = "supervised_aug" if augment else "supervised"
    path = Path(cfg.out_dir) / "models" / f"{task_id}-{kind}-s{seed}-{stage_hash(payload)}.arlc"

    def fit():
        log.info("%s %s seed %d: %d epochs on %d clips",
                 kind, task_id, seed, cfg.supervised_epochs, len(train.specs))
        specs_n = normalize_batch(train.specs, stats)
        return fit_supervised_model(
            specs_n, train.actions, task_id, stats, augment=augment,
            epochs=cfg.supervised_epochs, batch_size=cfg.supervised_batch,
            seed=seed, block_widths=cfg.block_widths, repr_dim=cfg.repr_dim,
        )

    return _materialize(path, fit)


def baseline_stage(cfg: RunConfig, task_id, kind, train: TaskArrays,
                   seed=0) -> AudioBehaviorModel:
    payload = {"stage": kind, "data": dataset_params(cfg, task_id)}
    if kind == "random":
        payload["seed"] = seed
        name = f"{task_id}-random-s{seed}-{stage_hash(payload)}.arlc"
    elif kind == "oracle":
        name = f"{task_id}-oracle-{stage_hash(payload)}.arlc"
    else:
        raise ValueError(f"baseline kind must be 'random' or 'oracle', got {kind!r}")
    path = Path(cfg.out_dir) / "models" / name

    def fit():
        log.info("%s baseline %s", kind, task_id)
        if kind == "random":
            return random_baseline(train.actions, task_id, seed)
        return oracle_baseline(train.actions, train.behavior_ids, task_id)

    return _materialize(path, fit)


# ---- metrics -----------------------------------------------------------------

def predict_actions(model: AudioBehaviorModel, specs, actions) -> np.ndarray:
    """Raw-unit test predictions, dispatching on model kind: audio models see
    spectrograms, the random baseline sees only the sample count, and the
    oracle sees the ground-truth actions it snaps to the train set."""
    if model.kind in AUDIO_KINDS:
        specs = match_channels(specs, model.encoder_state.config.in_channels)
        return model.predict(model.normalize_specs(specs))
    if model.kind == "random":
        return model.predict_random(len(actions))
    if model.kind == "oracle":
        return model.predict_oracle(actions)
    raise ValueError(f"cannot predict with model kind {model.kind!r}")


def eval_mse(model: AudioBehaviorModel, specs, actions):
    """(mse_raw, mse_normalized): mean squared L2 error per test sample, in
    raw action units (predictions already clipped to bounds) and in the
    task's normalized space."""
    actions = check_action_batch(actions, "test actions")
    preds = predict_actions(model, specs, actions)
    mse_raw = float(np.mean(np.sum((preds - actions) ** 2, axis=1)))
    pn = model.scaler.transform(preds)
    an = model.scaler.transform(actions)
    mse_norm = float(np.mean(np.sum((pn - an) ** 2, axis=1)))
    return mse_raw, mse_norm


def desired_envelopes(dataset: ContactSoundDataset, records):
    return [amplitude_envelope(dataset.load_audio(r)) for r in records]


def dtw_normalization_stats(dataset: ContactSoundDataset, records, repeats=5,
                            seed=0, envelopes=None):
    """Pooled per-task stats: DTW distances between every desired test clip
    and `repeats` fresh re-simulations of its own ground-truth action."""
    if envelopes is None:
        envelopes = desired_envelopes(dataset, records)
    dists = []
    for rec, env in zip(records, envelopes):
        action = quantize_action(dataset.spec, rec.action)
        for r in range(repeats):
            clip = simulate(dataset.task_id, action,
                            mix_seed(seed, 3, rec.behavior_id, rec.repeat_idx, r),
                            dataset.noise_level)
            dists.append(dtw_distance(env, amplitude_envelope(clip)).distance)
    return fit_normalization(dists)


def eval_dtw_rollout(model, dataset: ContactSoundDataset, records=None,
                     repeats=5, seed=0, specs=None, stats=None,
                     envelopes=None) -> float:
    """Mean normalized DTW between each desired clip and a re-simulation of
    the model's predicted action. model=None scores a fresh ground-truth
    re-simulation instead: the centering reference, which sits near zero by
    construction because its distances are drawn from the normalizing
    distribution."""
    records = dataset.test_records if records is None else records
    if not records:
        raise ValueError("empty test split")
    actions = dataset.actions_for(records)
    if model is None:
        preds = actions
    else:
        if specs is None and model.kind in AUDIO_KINDS:
            specs = mel_batch(dataset, records)
        preds = predict_actions(model, specs, actions)
    if envelopes is None:
        envelopes = desired_envelopes(dataset, records)
    if stats is None:
        stats = dtw_normalization_stats(dataset, records, repeats, seed, envelopes)
    scores = []
    for i, (rec, env) in enumerate(zip(records, envelopes)):
        action = quantize_action(dataset.spec, preds[i])
        clip = simulate(dataset.task_id, action,
                        mix_seed(seed, 4, rec.behavior_id, rec.repeat_idx),
                        dataset.noise_level)
        d = dtw_distance(env, amplitude_envelope(clip)).distance
        scores.append(normalized_score(d, stats))
    return float(np.mean(scores))


# ---- report ------------------------------------------------------------------

@dataclass
class EvalReport:
    """The machine-readable result of a pipeline run."""

    config_hash: str
    config: dict
    scale: str
    seeds: tuple
    deterministic: bool
    wall_time_s: float
    tasks: dict
    schema: str = REPORT_SCHEMA

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "config_hash": self.config_hash,
            "config": self.config,
            "scale": self.scale,
            "seeds": list(self.seeds),
            "deterministic": self.deterministic,
            "wall_time_s": self.wall_time_s,
            "tasks": self.tasks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        validate_report(d)
        return cls(
            config_hash=d["config_hash"], config=d["config"], scale=d["scale"],
            seeds=tuple(d["seeds"]), deterministic=d["deterministic"],
            wall_time_s=d["wall_time_s"], tasks=d["tasks"], schema=d["schema"],
        )


def _finite(x):
    return isinstance(x, (int, float)) and math.isfinite(x)


def validate_report(d: dict):
    """Schema check for report files; raises ValueError on any defect."""
    for key in ("schema", "config_hash", "config", "seeds", "tasks",
                "wall_time_s", "scale", "deterministic"):
        if key not in d:
            raise ValueError(f"report missing key {key!r}")
    if d["schema"] != REPORT_SCHEMA:
        raise ValueError(f"unknown report schema {d['schema']!r}")
    if d["config_hash"] != stage_hash(d["config"]):
        raise ValueError("config_hash does not match the embedded config")
    if not _finite(d["wall_time_s"]) or d["wall_time_s"] < 0:
        raise ValueError(f"bad wall_time_s: {d['wall_time_s']!r}")
    for task_id, entry in d["tasks"].items():
        if entry["n_test"] < 1:
            raise ValueError(f"task {task_id}: n_test must be >= 1")
        if "ground_truth_dtw" in entry and not _finite(entry["ground_truth_dtw"]):
            raise ValueError(f"task {task_id}: ground_truth_dtw is not finite")
        for method, m in entry["methods"].items():
            for name in ("mse_raw", "mse_normalized", "dtw_normalized_mean"):
                if name in m and m[name] is not None and not _finite(m[name]):
                    raise ValueError(f"task {task_id}/{method}: {name} is not finite")
            for seed, sm in m.get("per_seed", {}).items():
                for name, value in sm.items():
                    if value is not None and not _finite(value):
                        raise ValueError(
                            f"task {task_id}/{method}/seed {seed}: {name} is not finite"
                        )
    return d


def write_json(payload: dict, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_csv(path: Path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def write_tables(report: dict, out_dir: Path):
    """CSV mirrors of the per-task x per-method metric grids, plus charts."""
    out_dir = Path(out_dir)
    h = report["config_hash"]
    tasks = list(report["tasks"])
    methods = []
    for entry in report["tasks"].values():
        for m in entry["methods"]:
            if m not in methods:
                methods.append(m)

    def grid(metric):
        return {
            m: [report["tasks"][t]["methods"].get(m, {}).get(metric) for t in tasks]
            for m in methods
        }

    raw = grid("mse_raw")
    norm = grid("mse_normalized")
    if any(v is not None for vs in raw.values() for v in vs):
        header = ["task"]
        for m in methods:
            header += [f"{m}_mse_raw", f"{m}_mse_normalized"]
        rows = []
        for i, t in enumerate(tasks):
            row = [t]
            for m in methods:
                row += [raw[m][i], norm[m][i]]
            rows.append(row)
        _write_csv(out_dir / f"table-mse-{h}.csv", header, rows)
        series = [(m, [v if v is not None else 0.0 for v in raw[m]]) for m in methods]
        svgplot.bar_chart(out_dir / f"chart-mse-{h}.svg", tasks, series,
                          title="Action MSE (raw units)", ylabel="MSE")

    dtw = grid("dtw_normalized_mean")
    gt = [report["tasks"][t].get("ground_truth_dtw") for t in tasks]
    if any(v is not None for vs in dtw.values() for v in vs):
        header = ["task", "ground_truth"] + [f"{m}_dtw" for m in methods]
        rows = [[t, gt[i]] + [dtw[m][i] for m in methods] for i, t in enumerate(tasks)]
        _write_csv(out_dir / f"table-dtw-{h}.csv", header, rows)
        series = [("ground_truth", [v if v is not None else 0.0 for v in gt])]
        series += [(m, [v if v is not None else 0.0 for v in dtw[m]]) for m in methods]
        svgplot.bar_chart(out_dir / f"chart-dtw-{h}.svg", tasks, series,
                          title="Normalized DTW similarity", ylabel="normalized DTW")


# ---- pipeline ----------------------------------------------------------------

def _guard(stage, chash, fn):
    try:
        return fn()
    except (ConfigError, StageError):
        raise
    except Exception as e:
        raise StageError(stage, chash, e) from e


def _fit_method(cfg, task_id, method, seed, train, stats, shared_states):
    if method == "probe":
        if cfg.variant == "BYOL_ALL":
            shared = shared_states[seed]
            state = clone_state(shared).with_stats(stats.mean, stats.std)
        else:
            state = pretrain_stage(cfg, task_id, seed, train, stats)
        return probe_stage(cfg, task_id, seed, state, train)
    if method in ("supervised", "supervised_aug"):
        return supervised_stage(cfg, task_id, seed, train, stats,
                                augment=(method == "supervised_aug"))
    if method in ("random", "oracle"):
        return baseline_stage(cfg, task_id, method, train, seed=seed)
    raise ValueError(f"unknown method {method!r}")


def run_pipeline(cfg: RunConfig):
    """Orchestrate gen -> pretrain -> probe/supervised/baselines -> eval and
    emit the report plus CSV/SVG mirrors. Returns (report_dict, report_path).
    A rerun with an unchanged config returns the existing report untouched."""
    validate_config(cfg)
    chash = config_hash(cfg)
    out = Path(cfg.out_dir)
    reports_dir = out / "reports"
    report_path = reports_dir / f"report-{chash}.json"
    if report_path.exists():
        log.info("report %s exists; skipping run", report_path.name)
        with open(report_path, encoding="utf-8") as fh:
            return json.load(fh), report_path

    t0 = time.monotonic()
    task_data = {}
    for task_id in cfg.tasks:
        ds = _guard("gen", chash, lambda t=task_id: ensure_dataset(cfg, t))
        train = _guard("spectrograms", chash,
                       lambda d=ds: load_split_arrays(d, "train"))
        test = _guard("spectrograms", chash,
                      lambda d=ds: load_split_arrays(d, "test"))
        stats = fit_channel_stats(train.specs)
        task_data[task_id] = (ds, train, test, stats)

    shared_states = {}
    if cfg.variant == "BYOL_ALL" and "probe" in cfg.methods:
        pools = {t: (task_data[t][1], task_data[t][3]) for t in cfg.tasks}
        for seed in cfg.seeds:
            shared_states[seed] = _guard(
                "pretrain", chash, lambda s=seed: pretrain_all_stage(cfg, s, pools))

    tasks_report = {}
    for task_id in cfg.tasks:
        ds, train, test, stats = task_data[task_id]
        entry = {"n_test": len(test.records), "methods": {}}
        envs = None
        dtw_stats = None
        if "dtw" in cfg.metrics:
            envs = desired_envelopes(ds, test.records)
            dtw_stats = _guard("eval-dtw", chash, lambda: dtw_normalization_stats(
                ds, test.records, cfg.dtw_repeats, cfg.dtw_seed, envs))
            entry["ground_truth_dtw"] = _guard("eval-dtw", chash, lambda: eval_dtw_rollout(
                None, ds, test.records, cfg.dtw_repeats, cfg.dtw_seed,
                stats=dtw_stats, envelopes=envs))
        for method in cfg.methods:
            per_seed = {}
            cache = {}  # oracle artifacts are seed-independent; evaluate once
            for seed in cfg.seeds:
                model = _guard(method, chash, lambda s=seed: _fit_method(
                    cfg, task_id, method, s, train, stats, shared_states))
                key = (method, seed if method != "oracle" else None)
                if key not in cache:
                    m = {}
                    if "mse" in cfg.metrics:
                        m["mse_raw"], m["mse_normalized"] = _guard(
                            "eval-mse", chash,
                            lambda mo=model: eval_mse(mo, test.specs, test.actions))
                    if "dtw" in cfg.metrics:
                        m["dtw_normalized_mean"] = _guard(
                            "eval-dtw", chash, lambda mo=model: eval_dtw_rollout(
                                mo, ds, test.records, cfg.dtw_repeats, cfg.dtw_seed,
                                specs=test.specs, stats=dtw_stats, envelopes=envs))
                    cache[key] = m
                per_seed[str(seed)] = cache[key]
            summary = {"kind": method, "per_seed": per_seed}
            if method == "probe":
                summary["variant"] = cfg.variant
                summary["use_mixup"] = cfg.use_mixup
            for name in ("mse_raw", "mse_normalized", "dtw_normalized_mean"):
                values = [per_seed[str(s)][name] for s in cfg.seeds
                          if name in per_seed[str(s)]]
                if values:
                    summary[name] = float(np.mean(values))
            entry["methods"][method] = summary
        tasks_report[task_id] = entry

    wall = 0.0 if cfg.deterministic else time.monotonic() - t0
    report = EvalReport(
        config_hash=chash, config=json.loads(_canonical(config_fingerprint(cfg))),
        scale=cfg.scale, seeds=cfg.seeds, deterministic=cfg.deterministic,
        wall_time_s=wall, tasks=tasks_report,
    ).to_dict()
    validate_report(report)
    write_json(report, report_path)
    write_tables(report, reports_dir)
    log.info("report written: %s", report_path)
    return report, report_path


# ---- low-data sweep ------------------------------------------------------------

def sweep_dataset_behaviors(cfg: RunConfig, max_slice: int) -> int:
    """Smallest behavior count whose train side covers the largest slice."""
    n = max_slice
    while int(round(cfg.train_fraction * n)) < max_slice:
        n += 1
    return n


def low_data_sweep(cfg: RunConfig, task_id, slice_sizes=None,
                   methods=("probe", "supervised"), seed=0):
    """Low-data sweep: for nested train slices (smallest-first behavior
    ids), re-pretrain + probe and retrain the supervised baseline, always
    evaluating on the same full test split. Returns rows of
    {slice, method, mse_raw, mse_normalized} and writes CSV + SVG."""
    validate_config(cfg)
    slice_sizes = tuple(sorted(cfg.sweep_slices if slice_sizes is None else slice_sizes))
    if not slice_sizes:
        raise ConfigError("slice_sizes must be non-empty")
    for m in methods:
        if m not in ("probe", "supervised", "supervised_aug"):
            raise ConfigError(f"sweep methods must be trainable models, got {m!r}")
    if cfg.variant == "BYOL_ALL":
        raise ConfigError("low_data_sweep supports per-task variants only")

    # a dedicated dataset whose train side covers the largest slice
    sweep_cfg = replace(cfg, task_overrides={},
                        n_behaviors=sweep_dataset_behaviors(cfg, max(slice_sizes)))
    validate_config(sweep_cfg)
    chash = config_hash(sweep_cfg)
    ds = _guard("gen", chash, lambda: ensure_dataset(sweep_cfg, task_id))
    train = _guard("spectrograms", chash, lambda: load_split_arrays(ds, "train"))
    test = _guard("spectrograms", chash, lambda: load_split_arrays(ds, "test"))
    train_behaviors = ds.train_behaviors  # sorted ascending
    if max(slice_sizes) > len(train_behaviors):
        raise ConfigError(
            f"slice {max(slice_sizes)} larger than train set "
            f"({len(train_behaviors)} behaviors)"
        )

    rows = []
    for size in slice_sizes:
        sub = train.subset(train_behaviors[:size])
        stats = fit_channel_stats(sub.specs)
        for method in methods:
            if method == "probe":
                state = _guard("pretrain", chash, lambda: pretrain_stage(
                    sweep_cfg, task_id, seed, sub, stats, slice_size=size))
                model = _guard("probe", chash, lambda: probe_stage(
                    sweep_cfg, task_id, seed, state, sub, slice_size=size))
            else:
                model = _guard(method, chash, lambda: supervised_stage(
                    sweep_cfg, task_id, seed, sub, stats,
                    augment=(method == "supervised_aug"), slice_size=size))
            mse_raw, mse_norm = _guard("eval-mse", chash, lambda: eval_mse(
                model, test.specs, test.actions))
            rows.append({"slice": size, "method": method,
                         "mse_raw": mse_raw, "mse_normalized": mse_norm})
            log.info("sweep %s slice %d %s: mse_raw %.5f",
                     task_id, size, method, mse_raw)

    reports_dir = Path(cfg.out_dir) / "reports"
    _write_csv(reports_dir / f"sweep-{task_id}-{chash}.csv",
               ["slice", "method", "mse_raw", "mse_normalized"],
               [[r["slice"], r["method"], r["mse_raw"], r["mse_normalized"]]
                for r in rows])
    series = []
    for method in methods:
        pts = [(r["slice"], r["mse_raw"]) for r in rows if r["method"] == method]
        series.append((method, [p[0] for p in pts], [p[1] for p in pts]))
    svgplot.line_chart(reports_dir / f"sweep-{task_id}-{chash}.svg", series,
                       title=f"{task_id}: MSE vs training behaviors",
                       xlabel="train behaviors", ylabel="MSE (raw)")
    return rows


__all__ = [
    "AUDIO_KINDS", "ConfigError", "EvalReport", "METHODS", "METRICS",
    "REPORT_SCHEMA", "RunConfig", "SCALES", "StageError", "TaskArrays",
    "baseline_stage", "config_fingerprint", "config_hash", "dataset_dir",
    "dataset_params", "desired_envelopes", "dtw_normalization_stats",
    "ensure_dataset", "eval_dtw_rollout", "eval_mse", "load_run_config",
    "load_split_arrays", "low_data_sweep", "make_config", "match_channels",
    "predict_actions", "pretrain_all_stage", "pretrain_stage", "probe_stage",
    "run_pipeline", "stage_hash", "supervised_stage", "sweep_dataset_behaviors",
    "validate_config", "validate_report", "write_json", "write_tables",
]
