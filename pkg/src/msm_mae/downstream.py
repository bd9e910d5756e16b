"""Synthetic proxy tasks and a shallow probe trained on frozen embeddings."""

import json
from dataclasses import dataclass, field

import numpy as np

from .frontend import FrontendConfig, log_mel_spectrogram

SR = 16000


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# signal generators
# ---------------------------------------------------------------------------

def harmonic_tone(f0, n_samples, rng, n_partials=4, jitter=0.2, noise=0.01):
    """Fundamental plus ``n_partials - 1`` harmonics with random phases and jittered 1/h amplitudes."""
    t = np.arange(n_samples) / SR
    x = np.zeros(n_samples)
    for h in range(1, n_partials + 1):
        if h * f0 >= SR / 2:
            break
        amp = (1.0 / h) * (1.0 + jitter * rng.uniform(-1, 1))
        x += amp * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    fade = min(n_samples // 10, 160)
    if fade:
        ramp = np.linspace(0.0, 1.0, fade)
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    x /= np.max(np.abs(x)) + 1e-12
    return 0.5 * x + noise * rng.standard_normal(n_samples)


def _rms_normalize(x, rms=0.1):
    return x * (rms / (np.sqrt(np.mean(x ** 2)) + 1e-12))


def pitch_class_hz(k, base_midi=69):
    return 440.0 * 2.0 ** ((base_midi + k - 69) / 12.0)


@dataclass
class TaskDataset:
    name: str
    audio: list
    labels: np.ndarray
    split: np.ndarray  # "train" / "valid" / "test" per item
    label_space: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.audio)

    def indices(self, split):
        return np.flatnonzero(self.split == split)

    def manifest_lines(self):
        return [json.dumps({"id": i, "label": self.label_space[int(y)], "split": str(s)})
                for i, (y, s) in enumerate(zip(self.labels, self.split))]


def _stratified_split(labels, rng):
    split = np.empty(labels.size, dtype=object)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n = idx.size
        n_test = max(1, int(round(0.2 * n)))
        n_valid = max(1, int(round(0.2 * n)))
        split[idx[:n_test]] = "test"
        split[idx[n_test:n_test + n_valid]] = "valid"
        split[idx[n_test + n_valid:]] = "train"
    return split.astype(str)


def make_sine_pitch_task(n_per_class, classes=8, seed=0, seconds=1.0, base_midi=69,
                         detune_cents=25.0, jitter=0.8, noise=0.02):
    """1-s harmonic tones labelled by one of ``classes`` consecutive semitones.

    Each item is detuned uniformly within +-``detune_cents`` of its class pitch
    and gets its own partial balance (``jitter``), so items of a class share
    only the nominal fundamental.
    """
    if n_per_class < 3:
        raise ProbeError("need at least 3 items per class for a 60/20/20 split")
    rng = np.random.default_rng(seed)
    n = int(round(seconds * SR))
    audio, labels = [], []
    for k in range(classes):
        for _ in range(n_per_class):
            f0 = pitch_class_hz(k, base_midi) * 2.0 ** (rng.uniform(-detune_cents, detune_cents) / 1200.0)
            audio.append(harmonic_tone(f0, n, rng, jitter=jitter, noise=noise))
            labels.append(k)
    labels = np.array(labels)
    return TaskDataset("pitch", audio, labels, _stratified_split(labels, rng),
                       [f"{pitch_class_hz(k, base_midi):.2f}Hz" for k in range(classes)],
                       {"f0": [pitch_class_hz(k, base_midi) for k in range(classes)]})


def make_polyphony_task(n_per_class, classes=(1, 2, 3), seed=0, seconds=1.0):
    """Mixtures of ``k`` random-pitch tones labelled by ``k``; every clip has RMS 0.1."""
    if n_per_class < 3:
        raise ProbeError("need at least 3 items per class for a 60/20/20 split")
    rng = np.random.default_rng(seed)
    n = int(round(seconds * SR))
    audio, labels, fund = [], [], []
    for ci, k in enumerate(classes):
        for _ in range(n_per_class):
            f0s = np.exp(rng.uniform(np.log(150.0), np.log(1500.0), size=k))
            x = sum(harmonic_tone(f, n, rng) for f in f0s)
            audio.append(_rms_normalize(x))
            labels.append(ci)
            fund.append(f0s.tolist())
    labels = np.array(labels)
    return TaskDataset("polyphony", audio, labels, _stratified_split(labels, rng),
                       [str(k) for k in classes], {"f0s": fund})


def make_pretrain_clip(n_samples, rng):
    """Random scene: 1-3 tones with random onsets/offsets, optional chirp and noise burst."""
    x = np.zeros(n_samples)
    for _ in range(rng.integers(1, 4)):
        f0 = np.exp(rng.uniform(np.log(100.0), np.log(2000.0)))
        start = rng.integers(0, n_samples // 2)
        stop = rng.integers(start + n_samples // 4, n_samples + 1)
        x[start:stop] += rng.uniform(0.3, 1.0) * harmonic_tone(f0, stop - start, rng)
    if rng.random() < 0.3:
        t = np.arange(n_samples) / SR
        f_a, f_b = np.exp(rng.uniform(np.log(200.0), np.log(4000.0), size=2))
        phase = 2 * np.pi * (f_a * t + (f_b - f_a) * t ** 2 / (2 * t[-1]))
        x += 0.3 * np.sin(phase)
    if rng.random() < 0.3:
        start = rng.integers(0, n_samples)
        length = rng.integers(n_samples // 20, n_samples // 5)
        x[start:start + length] += 0.2 * rng.standard_normal(min(length, n_samples - start))
    return _rms_normalize(x, rms=rng.uniform(0.05, 0.2))


def synthetic_corpus(n_clips, frames, seed=0, cfg=FrontendConfig()):
    """``(n_clips, n_mels, frames)`` raw log-mel spectrograms of generated scenes."""
    rng = np.random.default_rng(seed)
    n = frames * cfg.hop
    return np.stack([log_mel_spectrogram(make_pretrain_clip(n, rng), cfg) for _ in range(n_clips)])


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 1024  # 0 = linear probe
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 0 or self.epochs <= 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ProbeError("probe hyperparameters must be positive")


@dataclass
class Metrics:
    accuracy: float
    per_class: dict
    n_test: int

    def to_json(self):
        return json.dumps({"accuracy": self.accuracy, "per_class": self.per_class, "n_test": self.n_test})


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class _MLP:
    def __init__(self, d_in, hidden, n_out, rng):
        dims = [d_in, hidden, n_out] if hidden else [d_in, n_out]
        self.W = [rng.standard_normal((a, b)) * np.sqrt(2.0 / (a + b)) for a, b in zip(dims[:-1], dims[1:])]
        if not hidden:
            self.W[0][...] = 0.0  # plain multinomial logistic regression starts from zero
        self.b = [np.zeros(b) for b in dims[1:]]
        self.params = self.W + self.b
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def forward(self, x):
        acts = [x]
        for i, (w, b) in enumerate(zip(self.W, self.b)):
            x = x @ w + b
            if i < len(self.W) - 1:
                x = np.maximum(x, 0.0)
            acts.append(x)
        return acts

    def step(self, x, onehot, lr, wd):
        acts = self.forward(x)
        dz = (_softmax(acts[-1]) - onehot) / x.shape[0]
        gW, gb = [None] * len(self.W), [None] * len(self.W)
        for i in reversed(range(len(self.W))):
            gW[i] = acts[i].T @ dz + wd * self.W[i]
            gb[i] = dz.sum(axis=0)
            if i:
                dz = (dz @ self.W[i].T) * (acts[i] > 0)
        self.t += 1
        for p, g, m, v in zip(self.params, gW + gb, self.m, self.v):
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            p -= lr * (m / (1 - 0.9 ** self.t)) / (np.sqrt(v / (1 - 0.999 ** self.t)) + 1e-8)

    def predict(self, x):
        return self.forward(x)[-1].argmax(axis=1)


def run_probe(train_x, train_y, test_x, test_y, cfg=ProbeConfig(), n_classes=None, valid=None):
    """Fit a shallow classifier on frozen embeddings and score it on the test split.

    With ``valid=(x, y)`` the epoch with the best validation accuracy is kept.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if train_x.ndim != 2 or test_x.ndim != 2 or train_x.shape[1] != test_x.shape[1]:
        raise ProbeError("train/test embeddings must be 2-D with equal widths")
    if np.unique(train_y).size < 2:
        raise ProbeError("training split has a single class")
    n_classes = n_classes or int(max(train_y.max(), test_y.max())) + 1
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-8
    xs, xt = (train_x - mu) / sd, (test_x - mu) / sd
    rng = np.random.default_rng(cfg.seed)
    net = _MLP(xs.shape[1], cfg.hidden, n_classes, rng)
    onehot = np.eye(n_classes)[train_y]
    best, best_acc = None, -1.0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(xs))
        for i in range(0, len(xs), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            net.step(xs[idx], onehot[idx], cfg.lr, cfg.weight_decay)
        if valid is not None:
            vx = (np.asarray(valid[0], dtype=np.float64) - mu) / sd
            acc = float(np.mean(net.predict(vx) == np.asarray(valid[1])))
            if acc > best_acc:
                best_acc, best = acc, [p.copy() for p in net.params]
    if best is not None:
        for p, b in zip(net.params, best):
            p[...] = b
    pred = net.predict(xt)
    per_class = {int(c): float(np.mean(pred[test_y == c] == c)) for c in np.unique(test_y)}
    return Metrics(float(np.mean(pred == test_y)), per_class, int(test_y.size))


def evaluate_task(task, embed, cfg=ProbeConfig()):
    """Embed every clip with ``embed(audio) -> vector`` and probe train -> test (valid for selection)."""
    X = np.stack([embed(a) for a in task.audio])
    tr, va, te = task.indices("train"), task.indices("valid"), task.indices("test")
    return run_probe(X[tr], task.labels[tr], X[te], task.labels[te], cfg,
                     n_classes=len(task.label_space), valid=(X[va], task.labels[va]))


def logmel_baseline_embedding(audio, cfg=FrontendConfig()):
    """Time-averaged raw log-mel vector, a model-free reference embedding."""
    return log_mel_spectrogram(audio, cfg).mean(axis=1)
