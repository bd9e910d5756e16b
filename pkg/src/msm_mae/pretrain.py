"""Masked-reconstruction pre-training: loss, schedule, AdamW, grad check, checkpoints."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .frontend import NormStats
from .model import ModelParams, init_params, mae_backward, mae_forward, no_decay
from .patches import patchify, random_mask_plan
from .tensorio import TensorFileError, load_tensors, save_tensors


class NumericError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 8
    base_lr: float = 6e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    mask_ratio: float = 0.75
    normalize_target: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.base_lr <= 0 or self.batch_size <= 0:
            raise ValueError("base_lr and batch_size must be positive")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(t) for k, t in params.tensors.items()},
                   {k: np.zeros_like(t) for k, t in params.tensors.items()})


@dataclass
class LossReport:
    step: int
    epoch: int
    masked_mse: float
    lr: float


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _norm_target(target):
    mean = target.mean(axis=-1, keepdims=True)
    var = target.var(axis=-1, keepdims=True)
    return (target - mean) / np.sqrt(var + 1e-6)


def masked_mse_and_grad(pred, target, mask, normalize_target=False):
    """Loss over masked tokens only, and its gradient w.r.t. ``pred``.

    ``mask`` is boolean with the token shape ``pred.shape[:-1]``; True = masked.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != pred.shape[:-1]:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    count = int(mask.sum()) * pred.shape[-1]
    if count == 0:
        raise ValueError("no masked tokens; masked MSE undefined")
    if normalize_target:
        target = _norm_target(target)
    diff = (pred - target) * mask[..., None]
    loss = float(np.sum(diff.astype(np.float64) ** 2) / count)
    return loss, (2.0 / count) * diff


def masked_mse(pred, target, plan, normalize_target=False):
    """Mean squared error over the plan's masked tokens (``pred``/``target`` are ``(N, d)``)."""
    if isinstance(plan, (list, tuple)):
        mask = np.stack([p.mask_vector() for p in plan])
    else:
        mask = plan.mask_vector()
    return masked_mse_and_grad(pred, target, mask, normalize_target)[0]


# ---------------------------------------------------------------------------
# schedule / optimizer
# ---------------------------------------------------------------------------

def lr_at(step, steps_per_epoch, cfg):
    """Linear warmup to ``base_lr``, then half-cosine down to 0 at ``epochs * steps_per_epoch``."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * step / warm
    frac = min(1.0, (step - warm) / max(1, total - warm))
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_step(params, grads, opt, lr, cfg):
    opt.step += 1
    for name, p in params.tensors.items():
        wd = 0.0 if no_decay(name) else cfg.weight_decay
        K.adamw_update(p, grads[name], opt.m[name], opt.v[name], lr,
                       cfg.beta1, cfg.beta2, 1e-8, wd, opt.step)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def plan_seed(run_seed, step, index):
    """Per-sample mask seed derived from counters, independent of execution order."""
    return int(np.random.SeedSequence([run_seed, step, index]).generate_state(1)[0])


def sample_plans(n, batch, ratio, run_seed, step):
    return [random_mask_plan(n, ratio, plan_seed(run_seed, step, b)) for b in range(batch)]


def loss_and_grads(params, tokens, plans, normalize_target=False):
    """Forward + reverse pass for a batch of ``(B, N, p_f*p_t)`` tokens."""
    vis = np.stack([p.visible for p in plans])
    mask = np.stack([p.mask_vector() for p in plans])
    pred, cache = mae_forward(params, tokens, vis)
    loss, dpred = masked_mse_and_grad(pred, tokens, mask, normalize_target)
    grads, dtokens = mae_backward(params, cache, dpred)
    return loss, grads, dtokens


def train_step(batch, params, opt, cfg, steps_per_epoch):
    """One update on a ``(B, F, T)`` batch of normalized spectrograms (params/opt updated in place)."""
    batch = np.asarray(batch, dtype=params.dtype)
    tokens, grid = patchify(batch, params.patch)
    if grid != params.grid:
        raise ValueError("batch spectrogram shape does not match the model grid")
    step = opt.step
    plans = sample_plans(grid.n, tokens.shape[0], cfg.mask_ratio, cfg.seed, step)
    loss, grads, _ = loss_and_grads(params, tokens, plans, cfg.normalize_target)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite masked MSE ({loss}) at step {step}")
    lr = lr_at(step, steps_per_epoch, cfg)
    adamw_step(params, grads, opt, lr, cfg)
    return params, opt, LossReport(step, step // steps_per_epoch, loss, lr)


def iterate_epoch(n_items, batch_size, seed, epoch):
    """Shuffled mini-batch index lists; the last short batch is dropped."""
    order = np.random.default_rng([seed, epoch]).permutation(n_items)
    n_batches = n_items // batch_size
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(n_batches)]


def pretrain(specs, params, cfg, on_epoch=None, log=None):
    """Run the full schedule over a ``(K, F, T)`` corpus of normalized spectrograms.

    ``on_epoch(epoch, params, opt)`` is called after each epoch; ``log(report)``
    after each step.  Returns ``(params, opt, reports)``.
    """
    specs = np.asarray(specs, dtype=params.dtype)
    spe = len(specs) // cfg.batch_size
    if spe == 0:
        raise ValueError(f"corpus of {len(specs)} clips is smaller than one batch of {cfg.batch_size}")
    opt = OptimizerState.zeros_like(params)
    reports = []
    for epoch in range(cfg.epochs):
        for idx in iterate_epoch(len(specs), cfg.batch_size, cfg.seed, epoch):
            _, _, rep = train_step(specs[idx], params, opt, cfg, spe)
            reports.append(rep)
            if log is not None:
                log(rep)
        if on_epoch is not None:
            on_epoch(epoch, params, opt)
    return params, opt, reports


def write_metrics_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss", "lr"])
        for r in reports:
            w.writerow([r.step, r.epoch, repr(r.masked_mse), repr(r.lr)])


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    worst: tuple = ()
    structural_zeros: int = 0
    max_zero_abs: float = 0.0
    rows: list = field(default_factory=list, repr=False)


def conditioned_params(params, seed=0):
    """Copy of ``params`` in float64 moved to a generic point for finite differencing.

    At the 0.02-std initialisation most gradients are ~1e-9 and drown in
    finite-difference roundoff, so weights get fan-in scaled unit-normal
    values, LayerNorm gains ~1 +- 0.3 and biases ~0.1.
    """
    rng = np.random.default_rng(seed)
    out = params.astype(np.float64)
    for name, t in out.tensors.items():
        if name.endswith(".g"):
            t[...] = 1.0 + 0.3 * rng.standard_normal(t.shape)
        elif name.endswith(".b") or t.ndim == 1:
            t[...] = 0.1 * rng.standard_normal(t.shape)
        else:
            t[...] = rng.standard_normal(t.shape) / np.sqrt(t.shape[0])
    return out


def grad_check(params, tokens, plans, names=None, n_samples=200, eps=1e-5, seed=0,
               normalize_target=False, zero_tol=1e-9):
    """Analytic gradient vs central finite differences on sampled scalar parameters.

    Relative error is ``|a - n| / max(|a|, |n|)``.  Entries whose analytic
    gradient is zero up to roundoff (``|a| <= zero_tol``; e.g. attention key
    biases, which the softmax cancels) are checked by absolute size of the
    numerical gradient against ``zero_tol`` instead and reported separately.
    """
    if params.dtype != np.float64:
        raise ValueError("grad_check needs float64 parameters")
    tokens = np.asarray(tokens, dtype=np.float64)
    _, grads, _ = loss_and_grads(params, tokens, plans, normalize_target)
    rng = np.random.default_rng(seed)
    names = list(names or params.tensors)
    worst, max_rel, zeros, max_zero = (), 0.0, 0, 0.0
    rows = []
    for _ in range(n_samples):
        name = names[rng.integers(len(names))]
        t = params.tensors[name]
        idx = tuple(int(rng.integers(0, s)) for s in t.shape)
        old = t[idx]
        t[idx] = old + eps
        lp = loss_value(params, tokens, plans, normalize_target)
        t[idx] = old - eps
        lm = loss_value(params, tokens, plans, normalize_target)
        t[idx] = old
        num = (lp - lm) / (2 * eps)
        ana = float(grads[name][idx])
        rows.append((name, idx, ana, num))
        if abs(ana) <= zero_tol:
            zeros += 1
            max_zero = max(max_zero, abs(num))
            continue
        rel = abs(ana - num) / max(abs(ana), abs(num))
        if rel > max_rel:
            max_rel, worst = rel, (name, idx, ana, num)
    if max_zero > zero_tol:
        max_rel = math.inf
    return GradCheckReport(max_rel, n_samples, worst, zeros, max_zero, rows)


def loss_value(params, tokens, plans, normalize_target=False):
    vis = np.stack([p.visible for p in plans])
    mask = np.stack([p.mask_vector() for p in plans])
    pred, _ = mae_forward(params, tokens, vis)
    return masked_mse_and_grad(pred, tokens, mask, normalize_target)[0]


def desk_grad_check(depth=1, n_samples=200, seed=0):
    """Grad check on a float64 desk model (D=64) with a tiny batch."""
    from .model import DecoderConfig, EncoderConfig
    from .patches import Grid, PatchConfig

    patch = PatchConfig(16, 16)
    grid = Grid(5, 2)
    params = conditioned_params(init_params(EncoderConfig(64, depth, 4, 4), DecoderConfig(32, 1, 4, 4),
                                            patch, grid, seed, np.float64), seed)
    rng = np.random.default_rng(seed + 1)
    spec = rng.standard_normal((2, grid.n_f * patch.p_f, grid.n_t * patch.p_t))
    tokens, _ = patchify(spec, patch)
    plans = sample_plans(grid.n, 2, 0.5, seed, 0)
    return grad_check(params, tokens, plans, n_samples=n_samples, seed=seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, opt=None, norm=None):
    tensors = dict(params.all_tensors())
    if opt is not None:
        tensors["opt.step"] = np.array(opt.step, dtype=np.float32)
        for k in params.tensors:
            tensors["opt.m." + k] = opt.m[k]
            tensors["opt.v." + k] = opt.v[k]
    if norm is not None:
        tensors["norm.stats"] = np.array([norm.mean, norm.std])
    save_tensors(path, tensors)


def load_checkpoint(path, template):
    """Load into the layout of ``template`` (a ModelParams for the current config).

    Returns ``(params, opt or None, NormStats or None)``.
    """
    try:
        data = load_tensors(path)
    except TensorFileError as exc:
        raise CheckpointError(str(exc)) from None
    expected = template.all_tensors()
    for name, ref in expected.items():
        if name not in data:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if data[name].shape != ref.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {data[name].shape}, "
                                  f"config expects {ref.shape}")
    extra = [k for k in data if k not in expected and not k.startswith(("opt.", "norm."))]
    if extra:
        raise CheckpointError(f"checkpoint has tensors unknown to this config: {extra[:3]}")
    params = ModelParams(template.enc, template.dec, template.patch, template.grid,
                         {k: data[k].copy() for k in template.tensors},
                         data["pos.enc"].copy(), data["pos.dec"].copy())
    opt = None
    if "opt.step" in data:
        opt = OptimizerState({k: data["opt.m." + k].copy() for k in template.tensors},
                             {k: data["opt.v." + k].copy() for k in template.tensors},
                             int(data["opt.step"]))
    norm = None
    if "norm.stats" in data:
        mean, std = (float(v) for v in data["norm.stats"])
        norm = NormStats(mean, std)
    return params, opt, norm


def checkpoint_roundtrip(params, opt, path):
    save_checkpoint(path, params, opt)
    params2, opt2, _ = load_checkpoint(path, params)
    return params2, opt2


# ---------------------------------------------------------------------------
# overfit-one-batch sanity run
# ---------------------------------------------------------------------------

def tonal_batch(n=4, frames=96, seed=0):
    """``n`` normalized spectrograms of harmonic tones a whole tone apart (the overfit batch)."""
    from .downstream import make_sine_pitch_task
    from .frontend import compute_and_apply_norm, log_mel_spectrogram

    task = make_sine_pitch_task(3, classes=2 * n, seed=seed)
    raw = [log_mel_spectrogram(task.audio[6 * i])[:, :frames] for i in range(n)]
    return np.stack(compute_and_apply_norm(raw)[1])


def overfit_one_batch(params, batch, steps=200, lr=1e-2, warmup=10, seed=0):
    """Train on one fixed batch (fresh random masks each step); returns the per-step losses."""
    cfg = TrainConfig(epochs=steps, warmup_epochs=warmup, batch_size=len(batch), base_lr=lr, seed=seed)
    opt = OptimizerState.zeros_like(params)
    return [train_step(batch, params, opt, cfg, 1)[2].masked_mse for _ in range(steps)]
