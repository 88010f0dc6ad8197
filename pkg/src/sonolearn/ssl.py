"""Self-supervised pretraining on mel spectrograms.

An online network (encoder -> projector -> predictor) learns to predict the
projection produced by a slowly moving EMA copy of itself (the target
network) for a second view of the same underlying sound. Views come in four
flavors:

- BYOL: two independent random-resize-crop augmentations of one clip;
- BYOL_ACT: two different repeats of the same behavior, no augmentation;
- BYOL_AA: two different repeats, each augmented;
- BYOL_ALL: plain BYOL pairing, but the training pool spans all tasks.

A mixup switch replaces cropping with convex mixing against random pool
members (an intentionally weak augmentation kept for the ablation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .dsp import ChannelStats, MelSpectrogram, mel_spectrogram, preprocess_clip
from .nn.encoder import (
    EncoderConfig,
    EncoderState,
    encoder_forward,
    init_encoder_state,
    predictor_forward,
    projector_forward,
)
from .nn.optim import Lars
from .nn.tensor import Tensor, l2_normalize, no_grad
from .validation import check_spectrogram_batch

VARIANTS = ("BYOL", "BYOL_ACT", "BYOL_AA", "BYOL_ALL")


@dataclass(frozen=True)
class AugmentationConfig:
    """Random-resize-crop scale ranges plus the mixup ablation switch."""

    crop_scale_time: tuple = (0.6, 1.0)
    crop_scale_mel: tuple = (0.6, 1.0)
    use_mixup: bool = False
    mixup_alpha_range: tuple = (0.5, 1.0)

    def __post_init__(self):
        for label, rng_ in (("crop_scale_time", self.crop_scale_time),
                            ("crop_scale_mel", self.crop_scale_mel)):
            lo, hi = rng_
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError(f"{label} must satisfy 0 < lo <= hi <= 1, got {rng_}")
        lo, hi = self.mixup_alpha_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(
                f"mixup_alpha_range must lie inside [0, 1], got {self.mixup_alpha_range}"
            )


@dataclass(frozen=True)
class PretrainConfig:
    """Training-loop hyperparameters for one pretraining run."""

    variant: str = "BYOL"
    epochs: int = 100
    batch_size: int = 128
    ema_tau: float = 0.99
    lr: float = 0.2
    weight_decay: float = 1.5e-6
    momentum: float = 0.9
    trust_coefficient: float = 0.001
    seed: int = 0
    augment: AugmentationConfig = AugmentationConfig()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not (0.0 <= self.ema_tau < 1.0):
            raise ValueError(f"ema_tau must lie in [0, 1), got {self.ema_tau}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Bilinear (align-corners) resampling matrix mapping src points to dst.

    src == dst yields the exact identity, so unit-scale crops are identity.
    """
    if src == dst:
        return np.eye(dst, dtype=np.float64)
    a = np.zeros((dst, src), dtype=np.float64)
    if src == 1:
        a[:, 0] = 1.0
        return a
    pos = (np.arange(dst) * (src - 1) / (dst - 1)) if dst > 1 else np.zeros(1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    a[np.arange(dst), i0] += 1.0 - frac
    a[np.arange(dst), i1] += frac
    return a


def _values_of(spec):
    return spec.values if isinstance(spec, MelSpectrogram) else np.asarray(spec)


def _rewrap(template, values):
    if isinstance(template, MelSpectrogram):
        return MelSpectrogram(values, template.n_mels, template.frame_hop,
                              template.source_rate)
    return values


def random_resize_crop(spec, rng, config: AugmentationConfig = AugmentationConfig()):
    """Crop a random time/mel window and bilinearly stretch it back to the
    full grid; all channels share the crop."""
    x = _values_of(spec)
    _, n_mels, n_frames = x.shape
    u_f = rng.uniform(*config.crop_scale_mel)
    u_t = rng.uniform(*config.crop_scale_time)
    h = max(1, int(round(u_f * n_mels)))
    w = max(1, int(round(u_t * n_frames)))
    top = int(rng.integers(0, n_mels - h + 1))
    left = int(rng.integers(0, n_frames - w + 1))
    crop = x[:, top : top + h, left : left + w]
    a_mel = _interp_matrix(h, n_mels)
    a_time = _interp_matrix(w, n_frames)
    out = np.matmul(np.matmul(a_mel, crop.astype(np.float64)), a_time.T)
    return _rewrap(spec, out.astype(x.dtype))


def mixup(spec_a, spec_b, rng, config: AugmentationConfig = AugmentationConfig()):
    """Convex combination alpha*a + (1-alpha)*b, alpha from the config range."""
    a, b = _values_of(spec_a), _values_of(spec_b)
    if a.shape != b.shape:
        raise ValueError(f"mixup shape mismatch: {a.shape} vs {b.shape}")
    alpha = rng.uniform(*config.mixup_alpha_range)
    return _rewrap(spec_a, (alpha * a + (1.0 - alpha) * b).astype(a.dtype))


def byol_loss(online_pred: Tensor, target_proj: Tensor) -> Tensor:
    """Mean over the batch of 2 - 2*cos(q, z'), both L2-normalized.

    Gradients flow only through online_pred; callers pass the target
    projection as a constant tensor.
    """
    if online_pred.shape != target_proj.shape or online_pred.ndim != 2:
        raise ValueError(
            f"byol_loss expects matching (batch, dim) shapes, got "
            f"{online_pred.shape} and {target_proj.shape}"
        )
    q = l2_normalize(online_pred, axis=1)
    z = l2_normalize(target_proj, axis=1)
    cos = (q * z).sum(axis=1)
    return (2.0 - 2.0 * cos).mean()


def ema_update(target: dict, online: dict, tau: float):
    """target <- tau*target + (1-tau)*online, elementwise, in place."""
    for key, arr in target.items():
        src = online[key]
        src = src.data if isinstance(src, Tensor) else src
        dst = arr.data if isinstance(arr, Tensor) else arr
        dst *= tau
        dst += (1.0 - tau) * src


class SpectrogramPool:
    """Normalized spectrograms plus the behavior grouping needed for
    repeat-based view pairing."""

    def __init__(self, specs, behavior_ids, repeat_idxs):
        self.specs = np.asarray(specs, dtype=np.float32)
        check_spectrogram_batch(self.specs, "specs")
        self.behavior_ids = np.asarray(behavior_ids, dtype=np.int64)
        self.repeat_idxs = np.asarray(repeat_idxs, dtype=np.int64)
        if not (len(self.specs) == len(self.behavior_ids) == len(self.repeat_idxs)):
            raise ValueError("specs, behavior_ids, repeat_idxs must have equal length")
        self._by_behavior = {}
        for i, b in enumerate(self.behavior_ids):
            self._by_behavior.setdefault(int(b), []).append(i)

    def __len__(self):
        return len(self.specs)

    @property
    def channels(self):
        return self.specs.shape[1]

    def siblings(self, index):
        """Indices of other repeats of the same behavior."""
        return [i for i in self._by_behavior[int(self.behavior_ids[index])]
                if i != index]

    def merge(self, other, behavior_offset):
        """Concatenate pools (for the all-tasks variant); caller must have
        reconciled channel counts already."""
        if self.channels != other.channels:
            raise ValueError(
                f"cannot merge pools with {self.channels} and {other.channels} channels"
            )
        return SpectrogramPool(
            np.concatenate([self.specs, other.specs]),
            np.concatenate([self.behavior_ids, other.behavior_ids + behavior_offset]),
            np.concatenate([self.repeat_idxs, other.repeat_idxs]),
        )


def mel_batch(dataset, records) -> np.ndarray:
    """Preprocess and mel-transform the records of a dataset, stacked as
    (n, channels, n_mels, n_frames) float32 (pre-normalization)."""
    out = []
    for rec in records:
        clip = preprocess_clip(dataset.load_audio(rec))
        out.append(mel_spectrogram(clip).values.astype(np.float32))
    return np.stack(out)


def normalize_batch(specs, stats: ChannelStats) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(stats.std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((specs - mean) / std).astype(np.float32)


def duplicate_mono(specs) -> np.ndarray:
    """Duplicate a 1-channel batch to 2 channels (all-tasks reconciliation)."""
    if specs.shape[1] != 1:
        raise ValueError(f"expected 1-channel specs, got {specs.shape[1]} channels")
    return np.repeat(specs, 2, axis=1)


def make_view_pair(pool: SpectrogramPool, index: int, variant: str, rng,
                   config: AugmentationConfig = AugmentationConfig()):
    """Build the two training views for one record under the given variant."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    spec = pool.specs[index]
    if variant in ("BYOL_ACT", "BYOL_AA"):
        siblings = pool.siblings(index)
        if not siblings:
            raise ValueError(
                f"variant {variant} needs >= 2 repeats per behavior; behavior "
                f"{int(pool.behavior_ids[index])} has no second repeat"
            )
        other = pool.specs[int(rng.choice(siblings))]
        if variant == "BYOL_ACT":
            return spec.copy(), other.copy()
        return (random_resize_crop(spec, rng, config),
                random_resize_crop(other, rng, config))
    # BYOL / BYOL_ALL: two views of the same clip
    if config.use_mixup:
        j1 = int(rng.integers(0, len(pool)))
        j2 = int(rng.integers(0, len(pool)))
        return (mixup(spec, pool.specs[j1], rng, config),
                mixup(spec, pool.specs[j2], rng, config))
    return (random_resize_crop(spec, rng, config),
            random_resize_crop(spec, rng, config))


def write_loss_trace(path, trace):
    """CSV with one (epoch, loss) row per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in trace:
            fh.write(f"{epoch},{loss:.8f}\n")


class ByolPretrainer(BaseEstimator):
    """Trains the encoder with symmetrized BYOL steps and a LARS optimizer.

    fit expects a SpectrogramPool of normalized train-split spectrograms.
    After fit, state_ holds the trained EncoderState (online + EMA target)
    and loss_trace_ the per-epoch mean loss.
    """

    def __init__(self, variant="BYOL", epochs=100, batch_size=128, ema_tau=0.99,
                 lr=0.2, weight_decay=1.5e-6, momentum=0.9, trust_coefficient=0.001,
                 seed=0, crop_scale_time=(0.6, 1.0), crop_scale_mel=(0.6, 1.0),
                 use_mixup=False, mixup_alpha_range=(0.5, 1.0),
                 block_widths=(8, 16, 32, 64), repr_dim=64, proj_dim=32,
                 pred_hidden=128):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.ema_tau = ema_tau
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.trust_coefficient = trust_coefficient
        self.seed = seed
        self.crop_scale_time = crop_scale_time
        self.crop_scale_mel = crop_scale_mel
        self.use_mixup = use_mixup
        self.mixup_alpha_range = mixup_alpha_range
        self.block_widths = block_widths
        self.repr_dim = repr_dim
        self.proj_dim = proj_dim
        self.pred_hidden = pred_hidden

    def _configs(self):
        aug = AugmentationConfig(
            crop_scale_time=tuple(self.crop_scale_time),
            crop_scale_mel=tuple(self.crop_scale_mel),
            use_mixup=self.use_mixup,
            mixup_alpha_range=tuple(self.mixup_alpha_range),
        )
        train = PretrainConfig(
            variant=self.variant, epochs=self.epochs, batch_size=self.batch_size,
            ema_tau=self.ema_tau, lr=self.lr, weight_decay=self.weight_decay,
            momentum=self.momentum, trust_coefficient=self.trust_coefficient,
            seed=self.seed, augment=aug,
        )
        return train, aug

    def _batch_views(self, pool, indices, variant, rng, aug):
        v1, v2 = [], []
        for i in indices:
            a, b = make_view_pair(pool, int(i), variant, rng, aug)
            v1.append(a)
            v2.append(b)
        return np.stack(v1), np.stack(v2)

    def _forward_loss(self, state, v1, v2, training):
        x = Tensor(np.concatenate([v1, v2]))
        reps = encoder_forward(state.params, state.buffers, state.config, x,
                               training=training, update_stats=training)
        proj = projector_forward(state.params, state.buffers, reps,
                                 training=training, update_stats=training)
        pred = predictor_forward(state.params, state.buffers, proj,
                                 training=training, update_stats=training)
        with no_grad():
            tparams = {k: Tensor(v) for k, v in state.target_params.items()}
            t_reps = encoder_forward(tparams, state.target_buffers, state.config, x,
                                     training=True, update_stats=False)
            t_proj = projector_forward(tparams, state.target_buffers, t_reps,
                                       training=True, update_stats=False)
        b = len(v1)
        # swapping the two target halves symmetrizes the loss in one pass:
        # mean over 2b rows = average of (view1 vs view2') and (view2 vs view1')
        swapped = np.concatenate([t_proj.data[b:], t_proj.data[:b]])
        return byol_loss(pred, Tensor(swapped))

    def fit(self, pool: SpectrogramPool, y=None, stats: ChannelStats | None = None):
        cfg, aug = self._configs()
        if len(pool) == 0:
            raise ValueError("cannot pretrain on an empty pool")
        if cfg.variant in ("BYOL_ACT", "BYOL_AA"):
            for i in range(len(pool)):
                if not pool.siblings(i):
                    raise ValueError(
                        f"variant {cfg.variant} requires >= 2 repeats per behavior; "
                        f"behavior {int(pool.behavior_ids[i])} has one record"
                    )
        enc_cfg = EncoderConfig(
            in_channels=pool.channels, block_widths=tuple(self.block_widths),
            repr_dim=self.repr_dim, proj_dim=self.proj_dim,
            pred_hidden=self.pred_hidden,
        )
        state = init_encoder_state(enc_cfg, seed=cfg.seed)
        if stats is not None:
            state.with_stats(stats.mean, stats.std)
        optimizer = Lars(
            state.parameters(),
            lr=cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum,
            trust_coefficient=cfg.trust_coefficient,
        )
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        trace = []
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(pool))
            total, weight = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                if len(batch) < 2:
                    continue  # batch norm needs at least two samples
                v1, v2 = self._batch_views(pool, batch, cfg.variant, rng, aug)
                loss = self._forward_loss(state, v1, v2, training=True)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"non-finite pretraining loss {value} at epoch {epoch}, "
                        f"step {state.step}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                ema_update(state.target_params, state.params, cfg.ema_tau)
                ema_update(state.target_buffers, state.buffers, cfg.ema_tau)
                state.step += 1
                total += value * len(batch)
                weight += len(batch)
            if weight:
                trace.append((epoch, total / weight))
        state.meta["variant"] = cfg.variant
        state.meta["pretrain_epochs"] = cfg.epochs
        self.state_ = state
        self.loss_trace_ = trace
        return self

    def evaluate_loss(self, pool: SpectrogramPool, state: EncoderState | None = None,
                      seed: int | None = None) -> float:
        """Mean symmetrized loss over one deterministic pass (no updates)."""
        cfg, aug = self._configs()
        state = state if state is not None else self.state_
        if state.target_params is None:
            raise ValueError("state has no target network; call init_target first")
        rng = np.random.Generator(np.random.PCG64(self.seed if seed is None else seed))
        total, weight = 0.0, 0
        with no_grad():
            for start in range(0, len(pool), cfg.batch_size):
                batch = np.arange(start, min(start + cfg.batch_size, len(pool)))
                if len(batch) < 2:
                    continue
                v1, v2 = self._batch_views(pool, batch, cfg.variant, rng, aug)
                loss = self._forward_loss(state, v1, v2, training=False)
                total += float(loss.data) * len(batch)
                weight += len(batch)
        return total / weight if weight else float("nan")
