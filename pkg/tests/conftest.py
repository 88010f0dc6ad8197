"""Shared fixtures: a tiny synthesized dataset, small encoder states, and the
central-difference gradient checker used by the tensor and acceptance tests."""

import sys

import numpy as np
import pytest

from sonolearn.dsp import fit_channel_stats
from sonolearn.nn.encoder import init_encoder_state, small_test_config
from sonolearn.nn.tensor import Tensor
from sonolearn.ssl import mel_batch
from sonolearn.synth import generate_dataset


def gradcheck(build, arrays, h=1e-3):
    """Max relative error between backprop and central finite differences.

    build(tensors) must return a scalar Tensor and be a pure function of the
    float64 input arrays. Relative error uses max(|analytic|, |numeric|, 1)
    as denominator so near-zero gradients are compared absolutely.
    """
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    loss = build(tensors)
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for a, ga in zip(arrays, analytic):
        numeric = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(build([Tensor(x.astype(np.float64)) for x in arrays]).data)
            flat[i] = orig - h
            lo = float(build([Tensor(x.astype(np.float64)) for x in arrays]).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(numeric)), 1.0)
        worst = max(worst, float(np.max(np.abs(ga - numeric) / denom)))
    return worst


@pytest.fixture(scope="session")
def tiny_rattle(tmp_path_factory):
    """8 behaviors x 2 repeats of the one-microphone shaking task."""
    out = tmp_path_factory.mktemp("data") / "rattle"
    return generate_dataset("rattle", n_behaviors=8, repeats=2, out_dir=out,
                            master_seed=0)


@pytest.fixture(scope="session")
def tiny_swatter(tmp_path_factory):
    """4 behaviors x 2 repeats of the two-microphone swatting task."""
    out = tmp_path_factory.mktemp("data") / "swatter"
    return generate_dataset("swatter", n_behaviors=4, repeats=2, out_dir=out,
                            master_seed=0)


@pytest.fixture(scope="session")
def rattle_train(tiny_rattle):
    """Raw train mel spectrograms, raw actions, and the fitted channel stats."""
    records = tiny_rattle.train_records
    specs = mel_batch(tiny_rattle, records)
    stats = fit_channel_stats(specs)
    actions = np.stack([r.action for r in records])
    return specs, actions, stats


@pytest.fixture
def small_state():
    return init_encoder_state(small_test_config(in_channels=1), seed=0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the per-criterion result lines after the run, if any were taken."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
