"""Patch lattice geometry, mask plans and fixed 2-D sin-cos positional tables.

Patch index convention is frequency-major: patch ``(f, t)`` has index
``f * n_t + t``, and each token is the row-major flattening of its
``p_f x p_t`` sub-rectangle.
"""

from dataclasses import dataclass

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    p_f: int = 16
    p_t: int = 16

    def __post_init__(self):
        if self.p_f <= 0 or self.p_t <= 0:
            raise GridError("patch dimensions must be positive")

    @property
    def size(self):
        return self.p_f * self.p_t


@dataclass(frozen=True)
class Grid:
    n_f: int
    n_t: int

    @property
    def n(self):
        return self.n_f * self.n_t

    def index(self, f, t):
        if not (0 <= f < self.n_f and 0 <= t < self.n_t):
            raise GridError(f"patch ({f}, {t}) outside {self.n_f}x{self.n_t} grid")
        return f * self.n_t + t

    def coords(self, i):
        return divmod(int(i), self.n_t)


def grid_dims(F, T, cfg):
    if F % cfg.p_f or T % cfg.p_t:
        raise GridError(f"{F}x{T} spectrogram is not divisible by {cfg.p_f}x{cfg.p_t} patches")
    return Grid(F // cfg.p_f, T // cfg.p_t)


def patchify(spec, cfg):
    """Split ``(..., F, T)`` into ``(..., N, p_f * p_t)`` tokens; returns ``(tokens, grid)``."""
    spec = np.asarray(spec)
    *lead, F, T = spec.shape
    g = grid_dims(F, T, cfg)
    x = spec.reshape(*lead, g.n_f, cfg.p_f, g.n_t, cfg.p_t)
    x = np.swapaxes(x, -3, -2)  # (..., n_f, n_t, p_f, p_t)
    return np.ascontiguousarray(x).reshape(*lead, g.n, cfg.size), g


def unpatchify(tokens, grid, cfg):
    tokens = np.asarray(tokens)
    *lead, n, d = tokens.shape
    if n != grid.n or d != cfg.size:
        raise GridError(f"expected {grid.n} tokens of length {cfg.size}, got {n}x{d}")
    x = tokens.reshape(*lead, grid.n_f, grid.n_t, cfg.p_f, cfg.p_t)
    x = np.swapaxes(x, -3, -2)
    return np.ascontiguousarray(x).reshape(*lead, grid.n_f * cfg.p_f, grid.n_t * cfg.p_t)


# ---------------------------------------------------------------------------
# mask plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MaskPlan:
    """Patch order ``permutation``; its first ``keep`` entries are visible."""

    permutation: np.ndarray
    keep: int
    seed: int = -1

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        n = perm.size
        if n == 0 or not np.array_equal(np.sort(perm), np.arange(n)):
            raise GridError("permutation is not a bijection on 0..N-1")
        if not 1 <= self.keep <= n:
            raise GridError(f"keep={self.keep} outside [1, {n}]")
        perm.setflags(write=False)
        object.__setattr__(self, "permutation", perm)

    @property
    def n(self):
        return self.permutation.size

    @property
    def visible(self):
        return self.permutation[: self.keep]

    @property
    def masked(self):
        return self.permutation[self.keep:]

    @property
    def ratio(self):
        return 1.0 - self.keep / self.n

    def mask_vector(self):
        """Boolean ``(N,)`` array, True where the patch is masked."""
        m = np.ones(self.n, dtype=bool)
        m[self.visible] = False
        return m

    def __eq__(self, other):
        return (isinstance(other, MaskPlan) and self.keep == other.keep and self.seed == other.seed
                and np.array_equal(self.permutation, other.permutation))

    def to_text(self):
        return " ".join(str(v) for v in (self.seed, self.keep, *self.permutation.tolist()))

    @classmethod
    def from_text(cls, line):
        vals = [int(v) for v in line.split()]
        if len(vals) < 3:
            raise GridError("mask plan line needs 'seed keep perm...'")
        return cls(np.array(vals[2:]), vals[1], vals[0])


def keep_count(n, ratio):
    if not 0.0 < ratio < 1.0:
        raise GridError(f"mask ratio must lie in (0, 1), got {ratio}")
    # half-up with slack: 95 * (1 - 0.9) is 9.4999... in binary and must give 10
    return max(1, int(np.floor(n * (1.0 - ratio) + 0.5 + 1e-9)))


def random_mask_plan(n, ratio, seed):
    """Visible set = the ``keep`` indices with the smallest seeded uniform noise."""
    if n < 1:
        raise GridError("need at least one patch")
    keep = keep_count(n, ratio)
    noise = np.random.default_rng(seed).random(n)
    return MaskPlan(np.argsort(noise, kind="stable"), keep, int(seed))


def patterned_mask_plan(grid, pattern):
    """Deterministic 50% patterns; index-0 coordinates stay visible."""
    f, t = np.divmod(np.arange(grid.n), grid.n_t)
    if pattern == "vertical":
        masked = t % 2 == 1
    elif pattern == "horizontal":
        masked = f % 2 == 1
    elif pattern == "chessboard":
        masked = (f + t) % 2 == 1
    else:
        raise GridError(f"unknown mask pattern {pattern!r}")
    vis = np.flatnonzero(~masked)
    if vis.size == grid.n:
        raise GridError(f"{pattern} pattern masks nothing on a {grid.n_f}x{grid.n_t} grid")
    return MaskPlan(np.concatenate([vis, np.flatnonzero(masked)]), vis.size)


def full_plan(n):
    return MaskPlan(np.arange(n), n)


# ---------------------------------------------------------------------------
# positional embeddings
# ---------------------------------------------------------------------------

def sincos_1d(pos, dim):
    """Transformer sinusoid table for integer positions, interleaved ``sin, cos`` pairs."""
    if dim % 2:
        raise GridError("1-D sin-cos dimension must be even")
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    ang = np.asarray(pos, dtype=np.float64).reshape(-1, 1) * omega
    return np.stack([np.sin(ang), np.cos(ang)], axis=2).reshape(ang.shape[0], dim)


def sincos_pos_embed(grid, dim):
    """``(N, dim)`` table; row ``f * n_t + t`` = [enc(f, dim/2) | enc(t, dim/2)]."""
    if dim % 4:
        raise GridError(f"positional dim {dim} must be divisible by 4")
    f, t = np.divmod(np.arange(grid.n), grid.n_t)
    return np.concatenate([sincos_1d(f, dim // 2), sincos_1d(t, dim // 2)], axis=1)
