"""Deterministic contact-sound simulator for five dynamic tasks, plus
dataset generation and loading.

Each task maps a bounded action-parameter vector to 4 s of multichannel
audio at 44.1 kHz. The synthesis recipes are simple burst models chosen so
that the parameters stay audible: burst count tracks oscillation count,
burst energy grows with commanded velocity, impact timing follows the
velocity/acceleration profile, and for two-microphone tasks the channel
energy split encodes strike position.

Everything is seeded. A record's waveform is a pure function of
(action, repeat_seed, noise_level); repeat seeds derive from the dataset
master seed via splitmix64 (see :func:`mix_seed`), so regeneration is
byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import AudioClip, RAW_RATE, CLIP_SECONDS
from .wavio import read_wav, read_wav_info, write_wav

SCHEMA_VERSION = 1
DEFAULT_NOISE_LEVEL = 0.01
SOFT_CLIP_LIMIT = 0.99

# burst decay rates (1/s)
_LAMBDA_STRIKE = 60.0
_LAMBDA_CLICK = 120.0

# tambourine partials: fixed "instrument" frequencies, kept inside the
# decimation filter passband (cutoff ~2.5 kHz at the 11025 Hz pipeline rate)
_TAMBOURINE_FREQS = (843.0, 1170.0, 1530.0, 1910.0)


@dataclass(frozen=True)
class ActionSpec:
    """Bounded action space of one task."""

    task_id: str
    names: tuple
    bounds: tuple  # per-dimension (lo, hi)
    integer_dims: frozenset = field(default_factory=frozenset)
    channels: int = 1

    @property
    def dims(self):
        return len(self.names)

    def lo(self):
        return np.array([b[0] for b in self.bounds], dtype=np.float64)

    def hi(self):
        return np.array([b[1] for b in self.bounds], dtype=np.float64)

    def validate(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.dims,):
            raise ValueError(
                f"{self.task_id}: expected {self.dims} action values, got shape {values.shape}"
            )
        lo, hi = self.lo(), self.hi()
        if np.any(values < lo - 1e-9) or np.any(values > hi + 1e-9):
            raise ValueError(f"{self.task_id}: action {values} outside bounds")
        for d in self.integer_dims:
            if abs(values[d] - round(values[d])) > 1e-9:
                raise ValueError(
                    f"{self.task_id}: dimension {d} ({self.names[d]}) must be an integer, "
                    f"got {values[d]}"
                )
        return values

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "names": list(self.names),
            "bounds": [list(b) for b in self.bounds],
            "integer_dims": sorted(self.integer_dims),
            "channels": self.channels,
        }


TASKS = {
    "rattle": ActionSpec(
        task_id="rattle",
        names=("elbow_velocity", "elbow_acceleration", "oscillations"),
        bounds=((0.5, 2.0), (0.5, 2.0), (1, 5)),
        integer_dims=frozenset({2}),
        channels=1,
    ),
    "tambourine": ActionSpec(
        task_id="tambourine",
        names=("elbow_velocity", "elbow_acceleration", "oscillations"),
        bounds=((0.5, 2.0), (0.5, 2.0), (1, 5)),
        integer_dims=frozenset({2}),
        channels=1,
    ),
    "swatter": ActionSpec(
        task_id="swatter",
        names=("base_velocity", "shoulder_velocity", "acceleration"),
        bounds=((0.5, 2.0), (0.5, 2.0), (0.5, 2.0)),
        channels=2,
    ),
    "strike_h": ActionSpec(
        task_id="strike_h",
        names=(
            "shoulder_velocity",
            "elbow_velocity",
            "wrist_velocity",
            "acceleration",
            "shoulder_steps",
            "elbow_steps",
            "wrist_steps",
        ),
        bounds=((0.5, 2.0), (0.5, 2.0), (0.5, 2.0), (0.5, 2.0), (1, 8), (1, 8), (1, 8)),
        integer_dims=frozenset({4, 5, 6}),
        channels=2,
    ),
    "strike_v": ActionSpec(
        task_id="strike_v",
        names=("shoulder_velocity", "elbow_velocity", "wrist_velocity", "acceleration"),
        bounds=((0.5, 2.0), (0.5, 2.0), (0.5, 2.0), (0.5, 2.0)),
        channels=2,
    ),
}

VELOCITY_DIMS = {
    "rattle": (0,),
    "tambourine": (0,),
    "swatter": (0, 1),
    "strike_h": (0, 1, 2),
    "strike_v": (0, 1, 2),
}


def mix_seed(master_seed: int, *parts: int) -> int:
    """Derive a 64-bit stream seed: fold each part in with splitmix64.

    seed_0 = splitmix64(master); seed_{k+1} = splitmix64(seed_k XOR
    splitmix64(part_k + 1)). Stable across platforms and documented so
    datasets can be regenerated elsewhere.
    """

    def splitmix64(z):
        z = (z + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        return z ^ (z >> 31)

    s = splitmix64(master_seed & 0xFFFFFFFFFFFFFFFF)
    for p in parts:
        s = splitmix64(s ^ splitmix64((int(p) + 1) & 0xFFFFFFFFFFFFFFFF))
    return s


def quantize_action(spec: ActionSpec, values) -> np.ndarray:
    """Clip to bounds and round integer dimensions, turning a continuous
    prediction into a simulatable action."""
    values = np.asarray(values, dtype=np.float64).copy()
    if values.shape != (spec.dims,):
        raise ValueError(
            f"{spec.task_id}: expected {spec.dims} action values, got shape {values.shape}"
        )
    values = np.clip(values, spec.lo(), spec.hi())
    for d in spec.integer_dims:
        values[d] = round(values[d])
    return values


def sample_action(spec: ActionSpec, rng_seed: int) -> np.ndarray:
    """Uniform action draw: continuous dims over [lo, hi], integer dims over
    the inclusive integer range."""
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    values = np.empty(spec.dims, dtype=np.float64)
    for d in range(spec.dims):
        lo, hi = spec.bounds[d]
        if d in spec.integer_dims:
            values[d] = float(rng.integers(int(lo), int(hi) + 1))
        else:
            values[d] = rng.uniform(lo, hi)
    return values


def _soft_clip(x):
    c = SOFT_CLIP_LIMIT
    return c * np.tanh(x / c)


def _noise_burst(out, rng, t0, energy, lam, sr):
    """Add a decaying white-noise burst sqrt(E) * exp(-lam t) * w(t) at t0."""
    start = int(round(t0 * sr))
    if start >= out.shape[-1]:
        return
    length = min(out.shape[-1] - start, int(np.ceil(9.2 / lam * sr)))
    t = np.arange(length) / sr
    w = rng.standard_normal(length)
    out[..., start : start + length] += np.sqrt(energy) * np.exp(-lam * t) * w


def _tonal_burst(out, rng, t0, energy, lam, sr):
    """Add a decaying sum of the four tambourine partials at t0."""
    start = int(round(t0 * sr))
    if start >= out.shape[-1]:
        return
    length = min(out.shape[-1] - start, int(np.ceil(9.2 / lam * sr)))
    t = np.arange(length) / sr
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(_TAMBOURINE_FREQS))
    tone = np.zeros(length)
    for f, ph in zip(_TAMBOURINE_FREQS, phases):
        tone += np.sin(2.0 * np.pi * f * t + ph)
    out[..., start : start + length] += np.sqrt(energy) * np.exp(-lam * t) * tone / 2.0


def _oscillation_times(v, a, count):
    # half-period of the oscillation primitive; scaled so that even 2*5
    # reversals of the slowest action land inside the 4 s clip
    half_period = 0.07 * (v / a + 0.8 / v)
    return [(j + 1) * half_period for j in range(2 * int(round(count)))]


def _simulate_rattle(action, rng, n, sr, tonal):
    v, a, c = action
    out = np.zeros((1, n))
    energy = 0.1 * v * v
    burst = _tonal_burst if tonal else _noise_burst
    for t0 in _oscillation_times(v, a, c):
        burst(out, rng, t0, energy, _LAMBDA_CLICK, sr)
    return out


def _simulate_swatter(action, rng, n, sr):
    v_b, v_s, a = action
    lo, hi = TASKS["swatter"].bounds[0]
    x = (v_b - lo) / (hi - lo)  # strike position along the board
    t0 = 0.3 * (v_b / a + 0.8 / v_b)
    energy = 0.15 * (0.7 * v_s + 0.3 * v_b) ** 2
    mono = np.zeros((1, n))
    _noise_burst(mono, rng, t0, energy, _LAMBDA_STRIKE, sr)
    out = np.zeros((2, n))
    out[0] = np.sqrt(1.0 - x) * mono[0]
    out[1] = np.sqrt(x) * mono[0]
    return out


def _simulate_strike(action, rng, n, sr, with_drag):
    if with_drag:
        v_s, v_e, v_w, a, d_s, d_e, d_w = action
        t0 = 0.3 + 1.0 / a
    else:
        v_s, v_e, v_w, a = action
        t0 = 0.5 + 1.0 / a  # momentum phase delays the impact
    energy = 0.15 * (0.5 * v_s + 0.3 * v_e + 0.2 * v_w) ** 2
    impact = np.zeros((1, n))
    _noise_burst(impact, rng, t0, energy, _LAMBDA_STRIKE, sr)
    drag = np.zeros((1, n))
    if with_drag:
        drag_dur = 0.05 * abs(d_s - d_e)
        drag_len = int(round(drag_dur * sr))
        if drag_len > 0:
            start = max(0, int(round(t0 * sr)) - drag_len)
            drag[0, start : start + drag_len] = 0.02 * rng.standard_normal(
                min(drag_len, n - start)
            )
    out = np.zeros((2, n))
    out[0] = 0.6 * impact[0] + 0.4 * drag[0]
    out[1] = 0.4 * impact[0] + 0.6 * drag[0]
    return out


def simulate(task_id: str, action, repeat_seed: int,
             noise_level: float = DEFAULT_NOISE_LEVEL) -> AudioClip:
    """Render one interaction: 4 s at 44.1 kHz, deterministic in its inputs."""
    spec = TASKS[task_id]
    action = spec.validate(action)
    if noise_level < 0:
        raise ValueError(f"noise_level must be >= 0, got {noise_level}")
    rng = np.random.Generator(np.random.PCG64(repeat_seed))
    sr = RAW_RATE
    n = int(round(CLIP_SECONDS * sr))
    if task_id == "rattle":
        out = _simulate_rattle(action, rng, n, sr, tonal=False)
    elif task_id == "tambourine":
        out = _simulate_rattle(action, rng, n, sr, tonal=True)
    elif task_id == "swatter":
        out = _simulate_swatter(action, rng, n, sr)
    elif task_id == "strike_h":
        out = _simulate_strike(action, rng, n, sr, with_drag=True)
    elif task_id == "strike_v":
        out = _simulate_strike(action, rng, n, sr, with_drag=False)
    else:  # pragma: no cover - TASKS lookup above already throws
        raise KeyError(task_id)
    if noise_level > 0:
        out = out + noise_level * rng.standard_normal(out.shape)
    return AudioClip(_soft_clip(out).astype(np.float32), sr)


def count_envelope_bursts(clip: AudioClip, threshold: float = 0.05,
                          frame_len: int = 128, min_gap_frames: int = 10) -> int:
    """Count above-threshold runs of the short-frame envelope maxima.

    Any-channel maximum per frame. Runs separated by fewer than
    min_gap_frames below-threshold frames are merged into one burst, so a
    noise sample grazing the threshold inside a decay tail is not counted
    twice; real bursts sit much further apart than the merge window.
    """
    n_frames = clip.n_samples // frame_len
    x = np.abs(clip.samples[:, : n_frames * frame_len])
    env = x.reshape(clip.channels, n_frames, frame_len).max(axis=(0, 2))
    above = env > threshold
    count = 0
    gap = min_gap_frames  # wide-open gap so the first run always counts
    for flag in above:
        if flag:
            if gap >= min_gap_frames:
                count += 1
            gap = 0
        else:
            gap += 1
    return count


@dataclass
class SampleRecord:
    behavior_id: int
    repeat_idx: int
    seed: int
    action: np.ndarray
    audio_path: str

    def to_dict(self):
        return {
            "behavior_id": self.behavior_id,
            "repeat_idx": self.repeat_idx,
            "seed": self.seed,
            "action": [float(v) for v in self.action],
            "audio_path": self.audio_path,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            behavior_id=int(d["behavior_id"]),
            repeat_idx=int(d["repeat_idx"]),
            seed=int(d["seed"]),
            action=np.asarray(d["action"], dtype=np.float64),
            audio_path=str(d["audio_path"]),
        )


class DatasetError(RuntimeError):
    """Raised when a dataset on disk violates its manifest contract."""


class ContactSoundDataset:
    """In-memory view over a generated dataset directory."""

    def __init__(self, root, manifest):
        self.root = Path(root)
        self.task_id = manifest["task_id"]
        self.spec = TASKS[self.task_id]
        self.sample_rate = int(manifest["sample_rate"])
        self.channels = int(manifest["channels"])
        self.duration_s = float(manifest["duration_s"])
        self.noise_level = float(manifest["noise_level"])
        self.master_seed = int(manifest["master_seed"])
        self.records = [SampleRecord.from_dict(r) for r in manifest["records"]]
        self.train_behaviors = sorted(int(b) for b in manifest["split"]["train"])
        self.test_behaviors = sorted(int(b) for b in manifest["split"]["test"])
        self._validate()

    def _validate(self):
        overlap = set(self.train_behaviors) & set(self.test_behaviors)
        if overlap:
            raise DatasetError(f"train/test splits overlap on behaviors {sorted(overlap)}")
        seen = set()
        expected_len = int(round(self.duration_s * self.sample_rate))
        for rec in self.records:
            key = (rec.behavior_id, rec.repeat_idx)
            if key in seen:
                raise DatasetError(f"duplicate record (behavior {key[0]}, repeat {key[1]})")
            seen.add(key)
            path = self.root / rec.audio_path
            if not path.exists():
                raise DatasetError(
                    f"missing audio for behavior {rec.behavior_id} repeat {rec.repeat_idx}: {path}"
                )
            channels, length, rate = read_wav_info(path)
            if channels != self.channels or length != expected_len or rate != self.sample_rate:
                raise DatasetError(
                    f"audio shape mismatch for behavior {rec.behavior_id} repeat "
                    f"{rec.repeat_idx}: got ({channels} ch, {length} samples, {rate} Hz), "
                    f"expected ({self.channels} ch, {expected_len} samples, {self.sample_rate} Hz)"
                )
        split_ids = set(self.train_behaviors) | set(self.test_behaviors)
        record_ids = {rec.behavior_id for rec in self.records}
        if split_ids != record_ids:
            raise DatasetError("split behavior ids do not cover the record set exactly")

    def _subset(self, behaviors):
        ids = set(behaviors)
        return [r for r in self.records if r.behavior_id in ids]

    @property
    def train_records(self):
        return sorted(self._subset(self.train_behaviors),
                      key=lambda r: (r.behavior_id, r.repeat_idx))

    @property
    def test_records(self):
        return sorted(self._subset(self.test_behaviors),
                      key=lambda r: (r.behavior_id, r.repeat_idx))

    def load_audio(self, record: SampleRecord) -> AudioClip:
        samples, rate = read_wav(self.root / record.audio_path)
        return AudioClip(samples, rate)

    def actions_for(self, records) -> np.ndarray:
        return np.stack([r.action for r in records])

    def __len__(self):
        return len(self.records)


def generate_dataset(task_id: str, n_behaviors: int, repeats: int, out_dir,
                     noise_level: float = DEFAULT_NOISE_LEVEL, master_seed: int = 0,
                     train_fraction: float = 0.8, overwrite: bool = False):
    """Synthesize a dataset: n_behaviors unique actions, `repeats` renders each.

    Writes audio/<behavior>_<repeat>.wav files plus a manifest.json (written
    last, atomically). The behavior-level 80/20 split keeps all repeats of a
    behavior on one side. Returns the loaded dataset view.
    """
    if n_behaviors < 2:
        raise ValueError(f"n_behaviors must be >= 2, got {n_behaviors}")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    spec = TASKS[task_id]
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not overwrite:
        raise FileExistsError(
            f"{manifest_path} already exists; pass overwrite=True to regenerate"
        )
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)

    records = []
    for b in range(n_behaviors):
        action = sample_action(spec, mix_seed(master_seed, 0, b))
        for r in range(repeats):
            seed = mix_seed(master_seed, 1, b, r)
            clip = simulate(task_id, action, seed, noise_level)
            rel = f"audio/{b:04d}_{r}.wav"
            write_wav(out_dir / rel, clip.samples, clip.sample_rate)
            records.append(SampleRecord(b, r, seed, action, rel))

    split_rng = np.random.Generator(np.random.PCG64(mix_seed(master_seed, 2)))
    order = split_rng.permutation(n_behaviors)
    n_train = int(round(train_fraction * n_behaviors))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "task_id": task_id,
        "sample_rate": RAW_RATE,
        "channels": spec.channels,
        "duration_s": CLIP_SECONDS,
        "noise_level": noise_level,
        "master_seed": master_seed,
        "action_spec": spec.to_dict(),
        "records": [rec.to_dict() for rec in records],
        "split": {
            "train": sorted(int(b) for b in order[:n_train]),
            "test": sorted(int(b) for b in order[n_train:]),
        },
    }
    tmp = manifest_path.with_suffix(".json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, manifest_path)
    return ContactSoundDataset(out_dir, manifest)


def load_dataset(manifest_path) -> ContactSoundDataset:
    """Load and validate a dataset from its manifest."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
    return ContactSoundDataset(manifest_path.parent, manifest)
