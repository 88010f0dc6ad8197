"""Float32 RIFF/WAVE reading and writing.

All dataset audio lives on disk as 32-bit IEEE float WAV, interleaved
channels. Readers reject anything else (integer PCM in particular), so a
dataset can never silently mix encodings.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile


class WavFormatError(ValueError):
    """Raised when a WAV file is not 32-bit float or is structurally broken."""


def write_wav(path, samples, sample_rate):
    """Write (channels, n) float samples as a float32 WAV file."""
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 2:
        raise ValueError(f"samples must be (channels, n), got shape {samples.shape}")
    data = samples.T  # scipy expects (n, channels)
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(str(path), int(sample_rate), np.ascontiguousarray(data))


def read_wav(path):
    """Read a float32 WAV file, returning ((channels, n) float32 array, rate)."""
    rate, data = wavfile.read(str(path))
    if data.dtype != np.float32:
        raise WavFormatError(
            f"{path}: expected 32-bit float samples, got dtype {data.dtype}"
        )
    if data.ndim == 1:
        data = data[:, None]
    return np.ascontiguousarray(data.T), int(rate)


def read_wav_info(path):
    """Read only the header of a WAV file: (channels, n_samples, sample_rate).

    Scans RIFF chunks without loading sample data; rejects non-float
    encodings (format tag must be 3, IEEE float, 32-bit).
    """
    path = Path(path)
    with open(path, "rb") as fh:
        riff = fh.read(12)
        if len(riff) < 12 or riff[:4] != b"RIFF" or riff[8:12] != b"WAVE":
            raise WavFormatError(f"{path}: not a RIFF/WAVE file")
        fmt = None
        while True:
            head = fh.read(8)
            if len(head) < 8:
                break
            chunk_id, size = head[:4], struct.unpack("<I", head[4:])[0]
            if chunk_id == b"fmt ":
                fmt = fh.read(size)
                if size % 2:
                    fh.read(1)
            elif chunk_id == b"data":
                if fmt is None:
                    raise WavFormatError(f"{path}: data chunk before fmt chunk")
                tag, channels, rate = struct.unpack("<HHI", fmt[:8])
                bits = struct.unpack("<H", fmt[14:16])[0]
                if tag != 3 or bits != 32:
                    raise WavFormatError(
                        f"{path}: expected 32-bit IEEE float (format 3), "
                        f"got format {tag} with {bits} bits"
                    )
                n = size // (channels * 4)
                return channels, n, rate
            else:
                fh.seek(size + (size % 2), 1)
    raise WavFormatError(f"{path}: no data chunk found")
