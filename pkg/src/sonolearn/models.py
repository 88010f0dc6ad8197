"""Action-space scaling, the linear probe, end-to-end supervised baselines,
and the random/oracle reference methods, plus one bundle type that carries
everything needed to turn audio into an action.

Conventions: models train and predict in the task's normalized action space
(min-max over the train split, except rattle/tambourine which stay raw);
raw-space predictions are denormalized and clipped to the action bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dsp import AudioClip, mel_spectrogram, preprocess_clip
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn.encoder import EncoderConfig, EncoderState, encoder_forward, init_encoder_state
from .nn.optim import Adam
from .nn.tensor import Tensor, linear, no_grad
from .ssl import AugmentationConfig, random_resize_crop
from .synth import TASKS
from .validation import as_float_array, check_action_batch, check_spectrogram_batch

# the shaking tasks train in raw action units; everything else is min-max
# normalized from the train split
TASK_NORMALIZATION = {
    "rattle": "none",
    "tambourine": "none",
    "swatter": "minmax",
    "strike_h": "minmax",
    "strike_v": "minmax",
}

MODEL_KINDS = ("probe", "supervised", "supervised_aug", "random", "oracle")


class ActionScaler(BaseEstimator, TransformerMixin):
    """Per-dimension min-max normalization with bound clipping on inversion.

    mode "none" keeps values raw but still clips on inverse_transform, so
    every prediction path ends inside the action bounds.
    """

    def __init__(self, mode="minmax", clip_lo=None, clip_hi=None, dim_names=None):
        self.mode = mode
        self.clip_lo = clip_lo
        self.clip_hi = clip_hi
        self.dim_names = dim_names

    @classmethod
    def for_task(cls, task_id):
        spec = TASKS[task_id]
        return cls(
            mode=TASK_NORMALIZATION[task_id],
            clip_lo=[b[0] for b in spec.bounds],
            clip_hi=[b[1] for b in spec.bounds],
            dim_names=list(spec.names),
        )

    def fit(self, X, y=None):
        X = check_action_batch(X, "train actions")
        if self.mode not in ("minmax", "none"):
            raise ValueError(f"mode must be 'minmax' or 'none', got {self.mode!r}")
        self.n_dims_ = X.shape[1]
        if self.mode == "minmax":
            self.min_ = X.min(axis=0)
            self.max_ = X.max(axis=0)
            for d in range(self.n_dims_):
                if self.max_[d] <= self.min_[d]:
                    name = (self.dim_names[d] if self.dim_names
                            and d < len(self.dim_names) else f"dim {d}")
                    raise ValueError(
                        f"degenerate action dimension {name!r}: min == max "
                        f"== {self.min_[d]} on the train split"
                    )
        else:
            self.min_ = np.zeros(self.n_dims_)
            self.max_ = np.ones(self.n_dims_)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_dims_")
        X = check_action_batch(X, "actions")
        if self.mode == "none":
            return X.copy()
        return (X - self.min_) / (self.max_ - self.min_)

    def inverse_transform(self, Y, clip=True):
        check_is_fitted(self, "n_dims_")
        Y = check_action_batch(Y, "normalized actions")
        raw = Y.copy() if self.mode == "none" else self.min_ + Y * (self.max_ - self.min_)
        if clip and self.clip_lo is not None:
            raw = np.clip(raw, np.asarray(self.clip_lo, dtype=raw.dtype),
                          np.asarray(self.clip_hi, dtype=raw.dtype))
        return raw


def fit_normalizer(train_actions, task_id) -> ActionScaler:
    return ActionScaler.for_task(task_id).fit(train_actions)


class LinearProbe(BaseEstimator, RegressorMixin):
    """Linear map (with bias) from frozen representations to normalized
    actions, trained with Adam on the squared loss.

    Representations are cached by the caller; full batches are used when the
    split fits in one. Training runs until the epoch loss plateaus (relative
    improvement below tol for `patience` epochs) or max_epochs, whichever
    comes first, which brings the loss within a percent of the closed-form
    least-squares optimum. train_loss_ is the final mean per-sample squared
    L2 error on the training set, measured from the stored weights.

    The optimizer never sees the raw representations: their Gram matrix is
    ill-conditioned enough (condition numbers around 1e7 are typical) that
    Adam at this learning rate cannot traverse it in any bounded number of
    epochs, and the weight-decay fixed point would sit far above the
    least-squares optimum. fit therefore whitens the inputs and standardizes
    each target dimension before optimizing. Both are fixed linear
    reparameterizations, so the function class and the per-dimension argmin
    are unchanged; the fitted map is folded back into coef_ / intercept_ in
    raw coordinates before returning.
    """

    def __init__(self, lr=1e-4, weight_decay=1e-4, batch_size=1024,
                 max_epochs=30000, tol=1e-9, patience=1000, seed=0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.tol = tol
        self.patience = patience
        self.seed = seed

    def fit(self, Z, Y):
        Z = as_float_array(Z, "representations", ndim=2)
        Y = check_action_batch(Y, "targets")
        if len(Z) != len(Y):
            raise ValueError(f"got {len(Z)} representations but {len(Y)} targets")
        if len(Z) == 0:
            raise ValueError("cannot fit a probe on an empty split")
        n = len(Z)
        d = Y.shape[1]

        # Whiten inputs / standardize targets in float64; directions with no
        # variance carry no signal and are dropped rather than floored so the
        # fold-back below cannot amplify optimizer noise along them.
        z_mean = Z.mean(axis=0, dtype=np.float64)
        centered = Z.astype(np.float64) - z_mean
        cov = centered.T @ centered / n
        eigvals, eigvecs = np.linalg.eigh(cov)
        # Relative cutoff for rank, absolute cutoff for pure roundoff junk:
        # float32 representations cannot carry real variance below 1e-20.
        keep = eigvals > max(float(eigvals[-1]) * 1e-10, 1e-20)
        whiten = eigvecs[:, keep] / np.sqrt(eigvals[keep])
        y_mean = Y.mean(axis=0, dtype=np.float64)
        y_scale = np.maximum(Y.std(axis=0, dtype=np.float64), 1e-6)
        Zw = (centered @ whiten).astype(np.float32)
        Yw = ((Y - y_mean) / y_scale).astype(np.float32)

        k = Zw.shape[1]
        w = Tensor(np.zeros((k, d), dtype=np.float32), requires_grad=True)
        b = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True, tag="bias")
        optimizer = Adam([("probe.w", w), ("probe.b", b)],
                         lr=self.lr, weight_decay=self.weight_decay)
        batch = min(self.batch_size, n)
        rng = np.random.Generator(np.random.PCG64(self.seed))
        full_z = Tensor(Zw)

        best = np.inf
        stale = 0
        for epoch in range(self.max_epochs):
            if batch == n:
                order_batches = [None]
            else:
                order = rng.permutation(n)
                order_batches = [order[s : s + batch] for s in range(0, n, batch)]
            total, weight = 0.0, 0
            for idx in order_batches:
                if idx is None:
                    zb, yb = full_z, Yw
                    m = n
                else:
                    zb = Tensor(Zw[idx])
                    yb = Yw[idx]
                    m = len(idx)
                pred = linear(zb, w, b)
                err = pred - Tensor(yb)
                loss = (err ** 2).sum() * (1.0 / m)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise RuntimeError(f"non-finite probe loss at epoch {epoch}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += value * m
                weight += m
            last = total / weight
            if last < best * (1.0 - self.tol):
                best = last
                stale = 0
            else:
                stale += 1
                if stale >= self.patience:
                    break

        # Fold the reparameterizations back into a raw-coordinate affine map.
        coef = whiten @ (w.data.astype(np.float64) * y_scale)
        intercept = (y_mean + b.data.astype(np.float64) * y_scale
                     - z_mean @ coef)
        self.coef_ = coef.astype(np.float32)
        self.intercept_ = intercept.astype(np.float32)
        self.n_epochs_ = epoch + 1
        with no_grad():
            resid = (Z.astype(np.float64) @ self.coef_.astype(np.float64)
                     + self.intercept_.astype(np.float64) - Y)
        self.train_loss_ = float(np.mean(np.sum(resid ** 2, axis=1)))
        return self

    def predict(self, Z):
        check_is_fitted(self, "coef_")
        Z = as_float_array(Z, "representations", ndim=2)
        return Z.astype(np.float32) @ self.coef_ + self.intercept_


def least_squares_loss(Z, Y):
    """Closed-form optimum of the probe objective via normal equations:
    the reference the trained probe is measured against.

    The Gram system is solved in the least-norm sense so rank-deficient
    representations (whose predictions are still unique) are handled.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    Zb = np.concatenate([Z, np.ones((len(Z), 1))], axis=1)
    gram = Zb.T @ Zb
    w, *_ = np.linalg.lstsq(gram, Zb.T @ Y, rcond=None)
    resid = Zb @ w - Y
    return float(np.mean(np.sum(resid ** 2, axis=1)))


class SupervisedAudioRegressor(BaseEstimator, RegressorMixin):
    """End-to-end baseline: the same conv encoder trained from scratch with
    a linear head on the MSE objective, optionally with the identical
    random-resize-crop augmentation used for pretraining."""

    def __init__(self, epochs=40, batch_size=128, lr=1e-4, weight_decay=1e-4,
                 augment=False, crop_scale_time=(0.6, 1.0), crop_scale_mel=(0.6, 1.0),
                 seed=0, block_widths=(8, 16, 32, 64), repr_dim=64):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.augment = augment
        self.crop_scale_time = crop_scale_time
        self.crop_scale_mel = crop_scale_mel
        self.seed = seed
        self.block_widths = block_widths
        self.repr_dim = repr_dim

    def fit(self, X, Y):
        X = check_spectrogram_batch(X, "spectrograms")
        Y = check_action_batch(Y, "targets")
        if len(X) != len(Y):
            raise ValueError(f"got {len(X)} spectrograms but {len(Y)} targets")
        if len(X) == 0:
            raise ValueError("cannot train on an empty split")
        d = Y.shape[1]
        config = EncoderConfig(in_channels=X.shape[1],
                               block_widths=tuple(self.block_widths),
                               repr_dim=self.repr_dim)
        state = init_encoder_state(config, seed=self.seed)
        state.drop_target()
        # the projector/predictor heads exist only for pretraining
        for key in [k for k in state.params if k.startswith(("proj.", "pred."))]:
            del state.params[key]
        for key in [k for k in state.buffers if k.startswith(("proj.", "pred."))]:
            del state.buffers[key]
        head_rng = np.random.Generator(np.random.PCG64(self.seed ^ 0x5EED))
        head_w = Tensor(
            (head_rng.standard_normal((self.repr_dim, d))
             * np.sqrt(1.0 / self.repr_dim)).astype(np.float32),
            requires_grad=True,
        )
        head_b = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True, tag="bias")
        state.params["head.w"] = head_w
        state.params["head.b"] = head_b
        named = state.parameters(prefixes=("enc.", "head."))
        optimizer = Adam(named, lr=self.lr, weight_decay=self.weight_decay)
        aug = AugmentationConfig(crop_scale_time=tuple(self.crop_scale_time),
                                 crop_scale_mel=tuple(self.crop_scale_mel))
        rng = np.random.Generator(np.random.PCG64(self.seed))
        yf = Y.astype(np.float32)
        trace = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            total, weight = 0.0, 0
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                if len(idx) < 2:
                    continue  # batch norm needs at least two samples
                xb = X[idx]
                if self.augment:
                    xb = np.stack([
                        random_resize_crop(xb[i], rng, aug) for i in range(len(idx))
                    ]).astype(np.float32)
                reps = encoder_forward(state.params, state.buffers, config,
                                       Tensor(xb), training=True)
                pred = linear(reps, head_w, head_b)
                err = pred - Tensor(yf[idx])
                loss = (err ** 2).sum() * (1.0 / len(idx))
                value = float(loss.data)
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"non-finite supervised loss at epoch {epoch}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += value * len(idx)
                weight += len(idx)
            if weight:
                trace.append((epoch, total / weight))
        self.state_ = state
        self.config_ = config
        self.loss_trace_ = trace
        return self

    def predict(self, X):
        check_is_fitted(self, "state_")
        X = check_spectrogram_batch(X, "spectrograms")
        with no_grad():
            reps = encoder_forward(self.state_.params, self.state_.buffers,
                                   self.config_, Tensor(X.astype(np.float32)),
                                   training=False)
            out = linear(reps, self.state_.params["head.w"],
                         self.state_.params["head.b"])
        return out.data.copy()


@dataclass
class AudioBehaviorModel:
    """Everything needed to map a raw clip (or its label, for the oracle)
    to an action: kind, task, scaler, and either an encoder+head or the
    stored train actions."""

    kind: str
    task_id: str
    scaler: ActionScaler
    encoder_state: EncoderState | None = None
    head_w: np.ndarray | None = None
    head_b: np.ndarray | None = None
    train_actions: np.ndarray | None = None
    train_behavior_ids: np.ndarray | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")

    # ---- audio-driven predictions (probe / supervised) ---------------------

    def _check_audio_kind(self):
        if self.kind not in ("probe", "supervised", "supervised_aug"):
            raise ValueError(f"model kind {self.kind!r} does not predict from audio")

    def normalize_specs(self, specs):
        state = self.encoder_state
        mean = state.channel_mean.reshape(1, -1, 1, 1)
        std = state.channel_std.reshape(1, -1, 1, 1)
        return ((specs - mean) / std).astype(np.float32)

    def representations(self, specs_normalized):
        state = self.encoder_state
        with no_grad():
            reps = encoder_forward(state.params, state.buffers, state.config,
                                   Tensor(np.asarray(specs_normalized,
                                                     dtype=np.float32)),
                                   training=False)
        return reps.data.copy()

    def predict_normalized(self, specs_normalized):
        self._check_audio_kind()
        reps = self.representations(specs_normalized)
        return reps @ self.head_w + self.head_b

    def predict(self, specs_normalized):
        """Normalized spectrogram batch -> raw actions, clipped to bounds."""
        return self.scaler.inverse_transform(
            self.predict_normalized(specs_normalized).astype(np.float64)
        )

    def predict_clip(self, clip: AudioClip):
        """Raw audio -> action (preprocess, mel, normalize, forward)."""
        self._check_audio_kind()
        expected = self.encoder_state.config.in_channels
        if clip.channels != expected:
            raise ValueError(
                f"clip has {clip.channels} channels but the {self.task_id} model "
                f"expects {expected}"
            )
        spec = mel_spectrogram(preprocess_clip(clip)).values.astype(np.float32)
        batch = self.normalize_specs(spec[None])
        return self.predict(batch)[0]

    # ---- label/seed-driven predictions (random / oracle) -------------------

    def predict_random(self, n: int):
        """n independent train-action draws; a pure function of (seed, n)."""
        if self.kind != "random":
            raise ValueError(f"predict_random called on kind {self.kind!r}")
        rng = np.random.Generator(np.random.PCG64(self.seed))
        idx = rng.integers(0, len(self.train_actions), size=n)
        return self.train_actions[idx].copy()

    def predict_oracle(self, test_actions):
        """Nearest train action by L2; ties resolved to the lowest behavior_id
        (train actions are stored sorted by behavior_id, argmin keeps the
        first minimum)."""
        if self.kind != "oracle":
            raise ValueError(f"predict_oracle called on kind {self.kind!r}")
        test_actions = check_action_batch(test_actions, "test actions")
        diffs = test_actions[:, None, :] - self.train_actions[None, :, :]
        dist = np.einsum("ntd,ntd->nt", diffs, diffs)
        nearest = dist.argmin(axis=1)
        return self.train_actions[nearest].copy()


def random_baseline(train_actions, task_id, seed) -> AudioBehaviorModel:
    train_actions = check_action_batch(train_actions, "train actions")
    return AudioBehaviorModel(
        kind="random", task_id=task_id, scaler=fit_normalizer(train_actions, task_id),
        train_actions=np.array(train_actions), seed=int(seed),
    )


def oracle_baseline(train_actions, train_behavior_ids, task_id) -> AudioBehaviorModel:
    train_actions = check_action_batch(train_actions, "train actions")
    order = np.argsort(np.asarray(train_behavior_ids, dtype=np.int64), kind="stable")
    return AudioBehaviorModel(
        kind="oracle", task_id=task_id, scaler=fit_normalizer(train_actions, task_id),
        train_actions=np.array(train_actions)[order],
        train_behavior_ids=np.asarray(train_behavior_ids, dtype=np.int64)[order],
    )


def fit_probe_model(encoder_state: EncoderState, specs_normalized, actions_raw,
                    task_id, **probe_kwargs):
    """Freeze the encoder, cache representations once, and fit the probe in
    the task's normalized action space. Returns (model, probe)."""
    scaler = fit_normalizer(actions_raw, task_id)
    targets = scaler.transform(actions_raw)
    with no_grad():
        reps = encoder_forward(
            encoder_state.params, encoder_state.buffers, encoder_state.config,
            Tensor(np.asarray(specs_normalized, dtype=np.float32)), training=False,
        ).data.copy()
    probe = LinearProbe(**probe_kwargs).fit(reps, targets)
    model = AudioBehaviorModel(
        kind="probe", task_id=task_id, scaler=scaler, encoder_state=encoder_state,
        head_w=probe.coef_, head_b=probe.intercept_,
        meta={"probe_epochs": probe.n_epochs_,
              "probe_train_loss": probe.train_loss_,
              "variant": encoder_state.meta.get("variant", "BYOL")},
    )
    return model, probe


def fit_supervised_model(specs_normalized, actions_raw, task_id, stats,
                         augment=False, **regressor_kwargs) -> AudioBehaviorModel:
    """Train the end-to-end baseline; stats ride along so the bundled model
    can preprocess raw clips on its own."""
    scaler = fit_normalizer(actions_raw, task_id)
    targets = scaler.transform(actions_raw)
    reg = SupervisedAudioRegressor(augment=augment, **regressor_kwargs).fit(
        np.asarray(specs_normalized, dtype=np.float32), targets
    )
    state = reg.state_
    state.with_stats(stats.mean, stats.std)
    head_w = state.params.pop("head.w")
    head_b = state.params.pop("head.b")
    kind = "supervised_aug" if augment else "supervised"
    return AudioBehaviorModel(
        kind=kind, task_id=task_id, scaler=scaler, encoder_state=state,
        head_w=head_w.data.copy(), head_b=head_b.data.copy(),
        meta={"epochs": reg.epochs,
              "final_train_loss": reg.loss_trace_[-1][1] if reg.loss_trace_ else None},
    )


# ---- persistence -----------------------------------------------------------


def _scaler_tensors(scaler: ActionScaler):
    return {
        "scaler.min": scaler.min_,
        "scaler.max": scaler.max_,
        "scaler.clip_lo": np.asarray(scaler.clip_lo, dtype=np.float64),
        "scaler.clip_hi": np.asarray(scaler.clip_hi, dtype=np.float64),
    }


def _scaler_from(tensors, meta):
    scaler = ActionScaler(
        mode=meta["scaler_mode"],
        clip_lo=tensors["scaler.clip_lo"].astype(np.float64),
        clip_hi=tensors["scaler.clip_hi"].astype(np.float64),
        dim_names=meta.get("dim_names"),
    )
    scaler.min_ = tensors["scaler.min"].astype(np.float64)
    scaler.max_ = tensors["scaler.max"].astype(np.float64)
    scaler.n_dims_ = len(scaler.min_)
    return scaler


def save_model(model: AudioBehaviorModel, path):
    tensors = _scaler_tensors(model.scaler)
    meta = {
        "task_id": model.task_id,
        "scaler_mode": model.scaler.mode,
        "dim_names": list(model.scaler.dim_names or []),
        "seed": model.seed,
    }
    meta.update(model.meta)
    if model.kind in ("probe", "supervised", "supervised_aug"):
        state = model.encoder_state
        tensors.update({f"param.{k}": v.data for k, v in state.params.items()})
        tensors.update({f"buffer.{k}": v for k, v in state.buffers.items()})
        tensors["stats.mean"] = state.channel_mean
        tensors["stats.std"] = state.channel_std
        tensors["head.w"] = model.head_w
        tensors["head.b"] = model.head_b
        meta["config"] = state.config.to_dict()
        meta["step"] = state.step
    else:
        tensors["train.actions"] = model.train_actions
        if model.train_behavior_ids is not None:
            tensors["train.behavior_ids"] = model.train_behavior_ids.astype(np.float64)
    save_checkpoint(tensors, path, model_kind=model.kind, meta=meta)


def load_model(path, expected_in_channels=None) -> AudioBehaviorModel:
    kind, tensors, meta = load_checkpoint(path)
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"{path}: unknown model_kind {kind!r}")
    scaler = _scaler_from(tensors, meta)
    task_id = meta["task_id"]
    extra = {k: v for k, v in meta.items()
             if k not in ("task_id", "scaler_mode", "dim_names", "seed",
                          "config", "step")}
    if kind in ("probe", "supervised", "supervised_aug"):
        config = EncoderConfig.from_dict(meta["config"])
        if expected_in_channels is not None and config.in_channels != expected_in_channels:
            raise CheckpointError(
                f"{path}: checkpoint in_channels={config.in_channels} does not "
                f"match the task's in_channels={expected_in_channels}"
            )
        params, buffers = {}, {}
        for name, arr in tensors.items():
            if name.startswith("param."):
                key = name[len("param."):]
                tag = ("bias" if key.endswith(".b")
                       else "norm" if key.endswith((".gamma", ".beta")) else None)
                params[key] = Tensor(arr, requires_grad=True, tag=tag)
            elif name.startswith("buffer."):
                buffers[name[len("buffer."):]] = arr
        state = EncoderState(config=config, params=params, buffers=buffers,
                             channel_mean=tensors["stats.mean"],
                             channel_std=tensors["stats.std"],
                             step=int(meta.get("step", 0)))
        return AudioBehaviorModel(
            kind=kind, task_id=task_id, scaler=scaler, encoder_state=state,
            head_w=tensors["head.w"], head_b=tensors["head.b"],
            seed=int(meta.get("seed", 0)), meta=extra,
        )
    ids = tensors.get("train.behavior_ids")
    return AudioBehaviorModel(
        kind=kind, task_id=task_id, scaler=scaler,
        train_actions=tensors["train.actions"].astype(np.float64),
        train_behavior_ids=None if ids is None else ids.astype(np.int64),
        seed=int(meta.get("seed", 0)), meta=extra,
    )
