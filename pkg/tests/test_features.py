import numpy as np
import pytest

from msm_mae.features import (EmbeddingMatrix, FeatureError, encode_frames, encode_spectrogram, scene_embedding,
                              segment_and_encode, timestamp_embeddings, write_embeddings_csv)
from msm_mae.frontend import NormStats, log_mel_spectrogram
from msm_mae.model import build_model, full_encode
from msm_mae.patches import Grid, PatchConfig

NORM = NormStats(-5.0, 4.0)


def test_two_by_two_enumeration():
    z = np.array([["a"], ["b"], ["c"], ["d"]])
    assert timestamp_embeddings(z, Grid(2, 2)).tolist() == [["a", "c"], ["b", "d"]]


def test_width_at_paper_dims():
    assert timestamp_embeddings(np.zeros((65, 768)), Grid(5, 13)).shape == (13, 3840)


def test_single_frequency_row_is_identity():
    z = np.random.default_rng(0).standard_normal((7, 3))
    assert np.array_equal(timestamp_embeddings(z, Grid(1, 7)), z)


def test_index_formula():
    rng = np.random.default_rng(1)
    g, D = Grid(3, 4), 5
    z = rng.standard_normal((g.n, D))
    out = timestamp_embeddings(z, g)
    for t in range(g.n_t):
        for f in range(g.n_f):
            assert np.array_equal(out[t, f * D:(f + 1) * D], z[f * g.n_t + t])


def test_size_mismatch():
    with pytest.raises(FeatureError):
        timestamp_embeddings(np.zeros((10, 4)), Grid(3, 4))


def test_scene_embedding():
    v = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(scene_embedding(v[None]), v)
    assert np.all(scene_embedding(np.stack([v, -v])) == 0)
    assert scene_embedding(np.array([[1.0, 3.0], [3.0, 5.0]])).tolist() == [2.0, 4.0]
    rows = np.random.default_rng(2).standard_normal((6, 4))
    np.testing.assert_allclose(scene_embedding(rows[::-1]), scene_embedding(rows), rtol=1e-14)
    with pytest.raises(FeatureError):
        scene_embedding(np.zeros((0, 4)))


@pytest.fixture(scope="module")
def m208():
    return build_model(208, PatchConfig())


def test_row_counts(m208):
    x = np.random.default_rng(3).standard_normal(48000) * 0.1  # 3.0 s
    emb = segment_and_encode(x, m208, NORM)
    assert emb.values.shape == (19, 5 * 64)
    assert emb.frame_hop_ms == 160.0
    assert emb.timestamps_ms[0] == 80.0


def test_two_full_chunks_at_512():
    params = build_model(512, PatchConfig())
    emb = segment_and_encode(np.random.default_rng(4).standard_normal(163840) * 0.1, params, NORM)
    assert len(emb) == 64


def test_exact_length_matches_single_pass(m208):
    x = np.random.default_rng(5).standard_normal(208 * 160) * 0.1
    spec = NORM.apply(log_mel_spectrogram(x))
    emb = segment_and_encode(x, m208, NORM)
    np.testing.assert_array_equal(emb.values, timestamp_embeddings(full_encode(spec, m208), m208.grid))


def test_chunked_equals_presplit(m208):
    spec = np.random.default_rng(6).standard_normal((80, 3 * 208 + 50))
    whole = encode_frames(spec, m208)
    parts = np.concatenate([encode_spectrogram(spec[:, i * 208:(i + 1) * 208], m208) for i in range(3)])
    np.testing.assert_array_equal(whole[:39], parts)
    assert whole.shape[0] == 39 + 4


def test_too_short_signal(m208):
    with pytest.raises(FeatureError):
        segment_and_encode(np.zeros(100), m208, NORM)


def test_csv(tmp_path):
    emb = EmbeddingMatrix(np.arange(6, dtype=float).reshape(2, 3), 160.0)
    write_embeddings_csv(tmp_path / "e.csv", emb)
    assert (tmp_path / "e.csv").read_text().splitlines() == ["80,0.0,1.0,2.0", "240,3.0,4.0,5.0"]
