"""Corpus ingestion, byte-level tokenization, and calibration sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import atomic_write
from .errors import DataError

CALIB_MAGIC = b"SPDCAL1\x00"


def load_and_tokenize(path):
    """Byte-level token ids (vocab 256) of a file's raw bytes."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def tokenize_bytes(data):
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids):
    return bytes(np.asarray(ids, dtype=np.int64).astype(np.uint8).tolist())


_WORDS = [
    b"sync", b"drop", b"block", b"head", b"device", b"tensor", b"shard",
    b"reduce", b"layer", b"token", b"model", b"latency", b"bandwidth",
    b"attention", b"residual", b"partial", b"output", b"input", b"scale",
    b"group", b"match", b"order", b"trace", b"plan",
]


def synthetic_corpus(n_bytes, seed=0):
    """Deterministic word-like byte text, enough structure to pretrain on."""
    rng = np.random.default_rng(seed)
    chunks = []
    total = 0
    while total < n_bytes:
        w = _WORDS[int(rng.integers(0, len(_WORDS)))]
        sep = b". " if rng.random() < 0.1 else b" "
        chunks.append(w + sep)
        total += len(w) + len(sep)
    return b"".join(chunks)[:n_bytes]


@dataclass
class CalibrationSet:
    samples: list = field(default_factory=list)  # fixed-length int64 arrays
    seed: int = 0
    source: str = ""

    @property
    def seq_len(self):
        return int(self.samples[0].shape[0]) if self.samples else 0


def sample_calibration(stream, n_samples, seq_len, seed=0, source=""):
    """Seeded windows at offsets drawn without replacement when possible."""
    stream = np.asarray(stream, dtype=np.int64)
    if stream.size < seq_len:
        raise DataError(
            f"stream length {stream.size} shorter than seq_len {seq_len}")
    n_offsets = stream.size - seq_len + 1
    rng = np.random.default_rng(seed)
    replace = n_offsets < n_samples
    offsets = rng.choice(n_offsets, size=n_samples, replace=replace)
    samples = [stream[o:o + seq_len].copy() for o in offsets]
    return CalibrationSet(samples=samples, seed=seed, source=source)


def save_calibration(path, calib):
    def writer(f):
        f.write(CALIB_MAGIC)
        f.write(struct.pack("<IIq", len(calib.samples), calib.seq_len, calib.seed))
        for s in calib.samples:
            f.write(s.astype("<u4").tobytes())
    atomic_write(path, writer)


def load_calibration(path):
    with open(path, "rb") as f:
        if f.read(8) != CALIB_MAGIC:
            raise DataError(f"{path}: not a calibration file")
        n, seq_len, seed = struct.unpack("<IIq", f.read(16))
        samples = []
        for _ in range(n):
            buf = f.read(4 * seq_len)
            samples.append(np.frombuffer(buf, dtype="<u4").astype(np.int64))
    return CalibrationSet(samples=samples, seed=seed, source=path)
