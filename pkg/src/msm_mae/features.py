"""Frozen-encoder features: per-time-frame embeddings, scene embeddings, long-input segmentation."""

import math
from dataclasses import dataclass

import numpy as np

from .frontend import FrontendConfig, FrontendError, PcmSignal, log_mel_spectrogram
from .model import full_encode


class FeatureError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    values: np.ndarray  # (rows, n_f * D)
    frame_hop_ms: float

    def __len__(self):
        return self.values.shape[0]

    @property
    def timestamps_ms(self):
        """Center time of each row's patch column."""
        return (np.arange(len(self)) + 0.5) * self.frame_hop_ms


def timestamp_embeddings(z, grid):
    """Rearrange encoder output ``z`` (N, D), frequency-major, into ``(n_t, n_f * D)``.

    Row ``t`` concatenates the embeddings of patches ``(0, t), (1, t), ...``.
    """
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[0] != grid.n:
        raise FeatureError(f"expected {grid.n} encoder tokens, got {z.shape}")
    D = z.shape[1]
    return z.reshape(grid.n_f, grid.n_t, D).transpose(1, 0, 2).reshape(grid.n_t, grid.n_f * D)


def scene_embedding(zp):
    values = zp.values if isinstance(zp, EmbeddingMatrix) else np.asarray(zp)
    if values.ndim != 2 or values.shape[0] == 0:
        raise FeatureError("scene embedding needs at least one row")
    return values.mean(axis=0)


def encode_spectrogram(spec, params):
    """Timestamp embeddings for one normalized ``(F, T)`` spectrogram matching the model."""
    return timestamp_embeddings(full_encode(spec, params), params.grid)


def encode_frames(spec, params):
    """Encode a normalized spectrogram of any length by chunks of the model's ``T``.

    The last partial chunk is zero-padded (the dataset mean after
    normalization) and only the rows covering real frames are kept.
    """
    spec = np.asarray(spec)
    F, total = spec.shape
    T = params.grid.n_t * params.patch.p_t
    if total < 1:
        raise FeatureError("spectrogram has no frames")
    rows = []
    for start in range(0, total, T):
        chunk = spec[:, start:start + T]
        valid = chunk.shape[1]
        if valid < T:
            chunk = np.concatenate([chunk, np.zeros((F, T - valid), dtype=chunk.dtype)], axis=1)
        emb = encode_spectrogram(chunk, params)
        rows.append(emb[: math.ceil(valid / params.patch.p_t)])
    return np.concatenate(rows, axis=0)


def segment_and_encode(signal, params, norm, cfg=FrontendConfig()):
    """Frontend -> dataset normalization -> chunked encoding -> concatenated timestamp rows."""
    if not isinstance(signal, PcmSignal):
        signal = PcmSignal(signal)
    try:
        spec = log_mel_spectrogram(signal, cfg)
    except FrontendError as exc:
        raise FeatureError(str(exc)) from None
    values = encode_frames(norm.apply(spec), params)
    return EmbeddingMatrix(values, params.patch.p_t * 1000.0 * cfg.hop / cfg.sample_rate)


def write_embeddings_csv(path, emb):
    """One line per row: timestamp in ms followed by the embedding values."""
    with open(path, "w") as fh:
        for ts, row in zip(emb.timestamps_ms, emb.values):
            fh.write(f"{ts:g}," + ",".join(repr(float(v)) for v in row) + "\n")
