"""Convolutional audio encoder plus the projector/predictor heads.

The encoder maps a normalized mel-spectrogram batch (n, channels, mels,
frames) to an embedding (n, repr_dim) through four conv blocks (3x3 conv ->
batch norm -> relu -> 2x2 max pool), global average pooling, and a linear
layer. Projector and predictor are two-layer heads (linear -> batch norm ->
relu -> linear) used only during self-supervised pretraining.

Parameters live in a flat name -> Tensor dict; batch-norm running statistics
live in a parallel name -> array dict so they never enter the autodiff
graph. The EMA target network keeps plain-array copies of the encoder and
projector entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import (
    Tensor,
    batch_norm,
    conv2d_3x3,
    global_avg_pool,
    linear,
    maxpool_2x2,
    relu,
)

DESK_BLOCK_WIDTHS = (8, 16, 32, 64)
DESK_REPR_DIM = 64
PAPER_REPR_DIM = 512


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture sizes; in_channels equals the task's microphone count."""

    in_channels: int
    block_widths: tuple = DESK_BLOCK_WIDTHS
    repr_dim: int = DESK_REPR_DIM
    proj_dim: int = 32
    pred_hidden: int = 128

    def __post_init__(self):
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.repr_dim < 1:
            raise ValueError(f"repr_dim must be >= 1, got {self.repr_dim}")
        if any(w < 1 for w in self.block_widths) or not self.block_widths:
            raise ValueError(f"block_widths must be positive, got {self.block_widths}")

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "block_widths": list(self.block_widths),
            "repr_dim": self.repr_dim,
            "proj_dim": self.proj_dim,
            "pred_hidden": self.pred_hidden,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            in_channels=int(d["in_channels"]),
            block_widths=tuple(d["block_widths"]),
            repr_dim=int(d["repr_dim"]),
            proj_dim=int(d["proj_dim"]),
            pred_hidden=int(d["pred_hidden"]),
        )


@dataclass
class EncoderState:
    """Online parameters, running stats, EMA target copies, channel stats."""

    config: EncoderConfig
    params: dict
    buffers: dict
    target_params: dict | None = None
    target_buffers: dict | None = None
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)

    def parameters(self, prefixes=("enc.", "proj.", "pred.")):
        """Named trainable tensors under the given prefixes, sorted by name."""
        return [(k, v) for k, v in sorted(self.params.items())
                if k.startswith(tuple(prefixes))]

    def init_target(self):
        """(Re)copy the online encoder+projector into the target network."""
        self.target_params = {
            k: v.data.copy() for k, v in self.params.items()
            if k.startswith(("enc.", "proj."))
        }
        self.target_buffers = {
            k: v.copy() for k, v in self.buffers.items()
            if k.startswith(("enc.", "proj."))
        }

    def drop_target(self):
        self.target_params = None
        self.target_buffers = None

    def with_stats(self, mean, std):
        self.channel_mean = np.asarray(mean, dtype=np.float32)
        self.channel_std = np.asarray(std, dtype=np.float32)
        return self


def _he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _add_bn(params, buffers, name, width, dtype):
    params[f"{name}.gamma"] = Tensor(np.ones(width, dtype=dtype),
                                     requires_grad=True, tag="norm")
    params[f"{name}.beta"] = Tensor(np.zeros(width, dtype=dtype),
                                    requires_grad=True, tag="norm")
    buffers[f"{name}.running_mean"] = np.zeros(width, dtype=dtype)
    buffers[f"{name}.running_var"] = np.ones(width, dtype=dtype)


def _add_linear(params, rng, name, d_in, d_out, dtype):
    params[f"{name}.w"] = Tensor(_he_init(rng, (d_in, d_out), d_in, dtype),
                                 requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(d_out, dtype=dtype),
                                 requires_grad=True, tag="bias")


def init_encoder_state(config: EncoderConfig, seed: int,
                       dtype=np.float32) -> EncoderState:
    """He-initialized online network plus a fresh target copy."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params, buffers = {}, {}
    c_prev = config.in_channels
    for i, width in enumerate(config.block_widths):
        fan_in = c_prev * 9
        params[f"enc.block{i}.conv.w"] = Tensor(
            _he_init(rng, (width, c_prev, 3, 3), fan_in, dtype), requires_grad=True
        )
        params[f"enc.block{i}.conv.b"] = Tensor(
            np.zeros(width, dtype=dtype), requires_grad=True, tag="bias"
        )
        _add_bn(params, buffers, f"enc.block{i}.bn", width, dtype)
        c_prev = width
    _add_linear(params, rng, "enc.fc", c_prev, config.repr_dim, dtype)

    _add_linear(params, rng, "proj.fc1", config.repr_dim, config.pred_hidden, dtype)
    _add_bn(params, buffers, "proj.bn", config.pred_hidden, dtype)
    _add_linear(params, rng, "proj.fc2", config.pred_hidden, config.proj_dim, dtype)

    _add_linear(params, rng, "pred.fc1", config.proj_dim, config.pred_hidden, dtype)
    _add_bn(params, buffers, "pred.bn", config.pred_hidden, dtype)
    _add_linear(params, rng, "pred.fc2", config.pred_hidden, config.proj_dim, dtype)

    state = EncoderState(config=config, params=params, buffers=buffers)
    state.init_target()
    return state


def count_parameters(params, prefixes=("enc.",)):
    return sum(v.data.size for k, v in params.items() if k.startswith(tuple(prefixes)))


def encoder_forward(params, buffers, config, x: Tensor, training: bool,
                    update_stats: bool = True) -> Tensor:
    """Spectrogram batch (n, in_channels, mels, frames) -> (n, repr_dim)."""
    if x.ndim != 4:
        raise ValueError(f"encoder expects (n, channels, mels, frames), got {x.shape}")
    if x.shape[1] != config.in_channels:
        raise ValueError(
            f"encoder in_channels mismatch: input has {x.shape[1]} channels, "
            f"config expects {config.in_channels}"
        )
    h = x
    for i in range(len(config.block_widths)):
        h = conv2d_3x3(h, params[f"enc.block{i}.conv.w"], params[f"enc.block{i}.conv.b"])
        h = batch_norm(
            h,
            params[f"enc.block{i}.bn.gamma"],
            params[f"enc.block{i}.bn.beta"],
            buffers[f"enc.block{i}.bn.running_mean"],
            buffers[f"enc.block{i}.bn.running_var"],
            training=training,
            update_stats=update_stats,
        )
        h = relu(h)
        h = maxpool_2x2(h)
    h = global_avg_pool(h)
    return linear(h, params["enc.fc.w"], params["enc.fc.b"])


def _head_forward(params, buffers, prefix, x, training, update_stats):
    h = linear(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"])
    h = batch_norm(
        h,
        params[f"{prefix}.bn.gamma"],
        params[f"{prefix}.bn.beta"],
        buffers[f"{prefix}.bn.running_mean"],
        buffers[f"{prefix}.bn.running_var"],
        training=training,
        update_stats=update_stats,
    )
    h = relu(h)
    return linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def projector_forward(params, buffers, x: Tensor, training: bool,
                      update_stats: bool = True) -> Tensor:
    return _head_forward(params, buffers, "proj", x, training, update_stats)


def predictor_forward(params, buffers, x: Tensor, training: bool,
                      update_stats: bool = True) -> Tensor:
    return _head_forward(params, buffers, "pred", x, training, update_stats)


def make_target_tensors(target_params):
    """Wrap target arrays as constant Tensors for a no-gradient forward."""
    return {k: Tensor(v) for k, v in target_params.items()}


def small_test_config(in_channels=2):
    """Narrow instance of the same architecture for finite-difference checks."""
    return EncoderConfig(in_channels=in_channels, block_widths=(2, 3, 4, 5),
                         repr_dim=4, proj_dim=3, pred_hidden=6)


def clone_state(state: EncoderState) -> EncoderState:
    """Deep copy (used when a training run must not mutate its input)."""
    new = EncoderState(
        config=replace(state.config),
        params={k: Tensor(v.data.copy(), requires_grad=v.requires_grad, tag=v.tag)
                for k, v in state.params.items()},
        buffers={k: v.copy() for k, v in state.buffers.items()},
        channel_mean=None if state.channel_mean is None else state.channel_mean.copy(),
        channel_std=None if state.channel_std is None else state.channel_std.copy(),
        step=state.step,
        meta=dict(state.meta),
    )
    if state.target_params is not None:
        new.target_params = {k: v.copy() for k, v in state.target_params.items()}
        new.target_buffers = {k: v.copy() for k, v in state.target_buffers.items()}
    return new
