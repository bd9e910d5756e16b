"""Asymmetric MAE encoder/decoder in plain numpy, with hand-written backward passes.

Layers are pre-norm transformer blocks (LN -> MHSA -> residual, LN -> GELU MLP
-> residual).  Forward functions return ``(output, cache)`` and the matching
``*_bwd`` functions consume the cache and accumulate parameter gradients into
a dict keyed by parameter name.  The row-wise nonlinearities run through
:mod:`msm_mae._kernels` (numba or numpy).
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .patches import Grid, GridError, PatchConfig, grid_dims, patchify, sincos_pos_embed

LN_EPS = 1e-6
INIT_STD = 0.02


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ModelError(f"encoder dim {self.dim} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 384
    depth: int = 4
    heads: int = 6
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ModelError(f"decoder dim {self.dim} not divisible by {self.heads} heads")


# ViT-Base encoder + 384-d/4-block decoder, and the small config used on a desk.
PAPER_ENCODER = EncoderConfig()
PAPER_DECODER = DecoderConfig()
DESK_ENCODER = EncoderConfig(dim=64, depth=2, heads=4, mlp_ratio=4)
DESK_DECODER = DecoderConfig(dim=32, depth=1, heads=4, mlp_ratio=4)

# name -> (input frames T, patch config); F is always 80.
MODEL_CONFIGS = {
    "MSM-MAE-96": (96, PatchConfig(16, 16)),
    "MSM-MAE-208": (208, PatchConfig(16, 16)),
    "MSM-MAE-304": (304, PatchConfig(16, 16)),
    "MSM-MAE-400": (400, PatchConfig(16, 16)),
    "MSM-MAE-512": (512, PatchConfig(16, 16)),
    "MSM-MAE-200 (16x8)": (200, PatchConfig(16, 8)),
    "MSM-MAE-200 (16x4)": (200, PatchConfig(16, 4)),
    "MSM-MAE-208 (8x16)": (208, PatchConfig(8, 16)),
    "MSM-MAE-304 (80x4)": (304, PatchConfig(80, 4)),
}

# name -> published (total, freq, time) patch counts
PATCH_COUNTS = {
    "MSM-MAE-96": (30, 5, 6),
    "MSM-MAE-208": (65, 5, 13),
    "MSM-MAE-304": (95, 5, 19),
    "MSM-MAE-400": (125, 5, 25),
    "MSM-MAE-512": (160, 5, 32),
    "MSM-MAE-200 (16x8)": (125, 5, 25),
    "MSM-MAE-200 (16x4)": (250, 5, 50),
    "MSM-MAE-208 (8x16)": (130, 10, 13),
    "MSM-MAE-304 (80x4)": (76, 1, 76),
}


def config_conformance(F=80):
    """``[(name, expected, got)]`` for every named config; all should match."""
    out = []
    for name, (T, patch) in MODEL_CONFIGS.items():
        g = grid_dims(F, T, patch)
        out.append((name, PATCH_COUNTS[name], (g.n, g.n_f, g.n_t)))
    return out


@dataclass
class ModelParams:
    """Trainable tensors by name plus the fixed positional tables."""

    enc: EncoderConfig
    dec: DecoderConfig
    patch: PatchConfig
    grid: Grid
    tensors: dict = field(default_factory=dict)
    enc_pos: np.ndarray = None
    dec_pos: np.ndarray = None

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["patch_embed.w"].dtype

    @property
    def num_parameters(self):
        return int(sum(t.size for t in self.tensors.values()))

    def astype(self, dtype):
        return ModelParams(self.enc, self.dec, self.patch, self.grid,
                           {k: v.astype(dtype) for k, v in self.tensors.items()},
                           self.enc_pos.astype(dtype), self.dec_pos.astype(dtype))

    def copy(self):
        return self.astype(self.dtype)

    def all_tensors(self):
        """Trainable tensors followed by the positional tables (checkpoint order)."""
        out = dict(self.tensors)
        out["pos.enc"] = self.enc_pos
        out["pos.dec"] = self.dec_pos
        return out


def _trunc_normal(rng, shape, std=INIT_STD):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _block_shapes(prefix, dim, mlp_ratio):
    hid = dim * mlp_ratio
    return {
        prefix + "ln1.g": (dim,), prefix + "ln1.b": (dim,),
        prefix + "attn.qkv.w": (dim, 3 * dim), prefix + "attn.qkv.b": (3 * dim,),
        prefix + "attn.proj.w": (dim, dim), prefix + "attn.proj.b": (dim,),
        prefix + "ln2.g": (dim,), prefix + "ln2.b": (dim,),
        prefix + "mlp.fc1.w": (dim, hid), prefix + "mlp.fc1.b": (hid,),
        prefix + "mlp.fc2.w": (hid, dim), prefix + "mlp.fc2.b": (dim,),
    }


def param_shapes(enc, dec, patch):
    shapes = {"patch_embed.w": (patch.size, enc.dim), "patch_embed.b": (enc.dim,)}
    for i in range(enc.depth):
        shapes.update(_block_shapes(f"enc.{i}.", enc.dim, enc.mlp_ratio))
    shapes.update({"enc_norm.g": (enc.dim,), "enc_norm.b": (enc.dim,),
                   "dec_embed.w": (enc.dim, dec.dim), "dec_embed.b": (dec.dim,),
                   "mask_token": (dec.dim,)})
    for i in range(dec.depth):
        shapes.update(_block_shapes(f"dec.{i}.", dec.dim, dec.mlp_ratio))
    shapes.update({"dec_norm.g": (dec.dim,), "dec_norm.b": (dec.dim,),
                   "dec_pred.w": (dec.dim, patch.size), "dec_pred.b": (patch.size,)})
    return shapes


def _xavier_uniform(rng, shape):
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, shape)


def init_params(enc, dec, patch, grid, seed, dtype=np.float32):
    """Xavier-uniform weight matrices, truncated-normal(0.02) mask token, zero biases, identity LayerNorms."""
    if enc.dim % 4 or dec.dim % 4:
        raise ModelError("encoder and decoder dims must be divisible by 4 for sin-cos positions")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(enc, dec, patch).items():
        if name.endswith(".g"):
            t = np.ones(shape)
        elif name.endswith(".b"):
            t = np.zeros(shape)
        elif name == "mask_token":
            t = _trunc_normal(rng, shape)
        else:
            t = _xavier_uniform(rng, shape)
        tensors[name] = t.astype(dtype)
    return ModelParams(enc, dec, patch, grid, tensors,
                       sincos_pos_embed(grid, enc.dim).astype(dtype),
                       sincos_pos_embed(grid, dec.dim).astype(dtype))


def no_decay(name):
    """Parameters excluded from weight decay: biases, LayerNorm affine, mask token."""
    return name.endswith(".b") or name.endswith(".g") or name == "mask_token"


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def _linear_fwd(x, w, b):
    return x @ w + b


def _linear_bwd(dy, x, w, grads, prefix):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads[prefix + "w"] = grads.get(prefix + "w", 0) + x2.T @ dy2
    grads[prefix + "b"] = grads.get(prefix + "b", 0) + dy2.sum(axis=0)
    return dy @ w.T


def _ln_fwd(x, g, b):
    shape = x.shape
    x2 = np.ascontiguousarray(x.reshape(-1, shape[-1]))
    y, mean, rstd = K.layernorm_fwd(x2, g, b, LN_EPS)
    return y.reshape(shape), (x2, mean, rstd)


def _ln_bwd(dy, cache, g, grads, prefix):
    x2, mean, rstd = cache
    dx, dg, db = K.layernorm_bwd(np.ascontiguousarray(dy.reshape(x2.shape)), x2, mean, rstd, g)
    grads[prefix + "g"] = grads.get(prefix + "g", 0) + dg
    grads[prefix + "b"] = grads.get(prefix + "b", 0) + db
    return dx.reshape(dy.shape)


def _attn_fwd(p, pre, x, heads):
    B, L, D = x.shape
    dh = D // heads
    scale = dh ** -0.5
    qkv = _linear_fwd(x, p[pre + "qkv.w"], p[pre + "qkv.b"])
    q, k, v = qkv.reshape(B, L, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    s = (q @ k.swapaxes(-1, -2)) * scale
    a = K.softmax_fwd(np.ascontiguousarray(s.reshape(-1, L))).reshape(B, heads, L, L)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
    y = _linear_fwd(o, p[pre + "proj.w"], p[pre + "proj.b"])
    return y, (x, q, k, v, a, o)


def _attn_bwd(dy, cache, p, pre, grads):
    x, q, k, v, a, o = cache
    B, H, L, dh = q.shape
    scale = dh ** -0.5
    do = _linear_bwd(dy, o, p[pre + "proj.w"], grads, pre + "proj.")
    do = do.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    da = do @ v.swapaxes(-1, -2)
    dv = a.swapaxes(-1, -2) @ do
    ds = K.softmax_bwd(np.ascontiguousarray(a.reshape(-1, L)),
                       np.ascontiguousarray(da.reshape(-1, L))).reshape(a.shape) * scale
    dq = ds @ k
    dk = ds.swapaxes(-1, -2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, L, 3 * H * dh)
    return _linear_bwd(dqkv, x, p[pre + "qkv.w"], grads, pre + "qkv.")


def _mlp_fwd(p, pre, x):
    h = _linear_fwd(x, p[pre + "fc1.w"], p[pre + "fc1.b"])
    shape = h.shape
    h2 = np.ascontiguousarray(h.reshape(-1, shape[-1]))
    act = K.gelu_fwd(h2).reshape(shape)
    y = _linear_fwd(act, p[pre + "fc2.w"], p[pre + "fc2.b"])
    return y, (x, h2, act)


def _mlp_bwd(dy, cache, p, pre, grads):
    x, h2, act = cache
    dact = _linear_bwd(dy, act, p[pre + "fc2.w"], grads, pre + "fc2.")
    dh = K.gelu_bwd(h2, np.ascontiguousarray(dact.reshape(h2.shape))).reshape(dact.shape)
    return _linear_bwd(dh, x, p[pre + "fc1.w"], grads, pre + "fc1.")


def _block_fwd(p, pre, x, heads):
    h, c1 = _ln_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    a, c2 = _attn_fwd(p, pre + "attn.", h, heads)
    x = x + a
    h, c3 = _ln_fwd(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
    m, c4 = _mlp_fwd(p, pre + "mlp.", h)
    return x + m, (c1, c2, c3, c4)


def _block_bwd(dy, cache, p, pre, grads):
    c1, c2, c3, c4 = cache
    dh = _mlp_bwd(dy, c4, p, pre + "mlp.", grads)
    dx = dy + _ln_bwd(dh, c3, p[pre + "ln2.g"], grads, pre + "ln2.")
    dh = _attn_bwd(dx, c2, p, pre + "attn.", grads)
    return dx + _ln_bwd(dh, c1, p[pre + "ln1.g"], grads, pre + "ln1.")


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------

def encoder_fwd(params, tokens, vis_idx, trace=None):
    """Encode the visible tokens only.

    ``tokens`` is ``(B, N, p_f*p_t)``, ``vis_idx`` is ``(B, keep)`` integer
    indices into N.  Returns latents ``(B, keep, D)`` and a cache.  If
    ``trace`` is a list, each attention call appends its sequence length.
    """
    p = params.tensors
    xv = np.take_along_axis(tokens, vis_idx[..., None], axis=1)
    x = _linear_fwd(xv, p["patch_embed.w"], p["patch_embed.b"]) + params.enc_pos[vis_idx]
    blocks = []
    for i in range(params.enc.depth):
        if trace is not None:
            trace.append(("enc", x.shape[1]))
        x, c = _block_fwd(p, f"enc.{i}.", x, params.enc.heads)
        blocks.append(c)
    y, cn = _ln_fwd(x, p["enc_norm.g"], p["enc_norm.b"])
    return y, (xv, blocks, cn)


def encoder_bwd(params, cache, dy, grads):
    """Backprop latents gradient; returns gradient w.r.t. the gathered visible tokens."""
    p = params.tensors
    xv, blocks, cn = cache
    dx = _ln_bwd(dy, cn, p["enc_norm.g"], grads, "enc_norm.")
    for i in reversed(range(params.enc.depth)):
        dx = _block_bwd(dx, blocks[i], p, f"enc.{i}.", grads)
    return _linear_bwd(dx, xv, p["patch_embed.w"], grads, "patch_embed.")


def decoder_fwd(params, latents, vis_idx, trace=None):
    """Fill masked slots with the mask token, add positions, return ``(B, N, p_f*p_t)``."""
    p = params.tensors
    B, keep, _ = latents.shape
    n = params.grid.n
    y = _linear_fwd(latents, p["dec_embed.w"], p["dec_embed.b"])
    x = np.broadcast_to(p["mask_token"], (B, n, params.dec.dim)).copy()
    np.put_along_axis(x, vis_idx[..., None], y, axis=1)
    x += params.dec_pos
    blocks = []
    for i in range(params.dec.depth):
        if trace is not None:
            trace.append(("dec", x.shape[1]))
        x, c = _block_fwd(p, f"dec.{i}.", x, params.dec.heads)
        blocks.append(c)
    h, cn = _ln_fwd(x, p["dec_norm.g"], p["dec_norm.b"])
    out = _linear_fwd(h, p["dec_pred.w"], p["dec_pred.b"])
    return out, (latents, vis_idx, blocks, cn, h)


def decoder_bwd(params, cache, dout, grads):
    """Returns gradient w.r.t. the encoder latents."""
    p = params.tensors
    latents, vis_idx, blocks, cn, h = cache
    dh = _linear_bwd(dout, h, p["dec_pred.w"], grads, "dec_pred.")
    dx = _ln_bwd(dh, cn, p["dec_norm.g"], grads, "dec_norm.")
    for i in reversed(range(params.dec.depth)):
        dx = _block_bwd(dx, blocks[i], p, f"dec.{i}.", grads)
    masked = np.ones(dx.shape[:2], dtype=bool)
    np.put_along_axis(masked, vis_idx, False, axis=1)
    grads["mask_token"] = grads.get("mask_token", 0) + dx[masked].sum(axis=0)
    dy = np.take_along_axis(dx, vis_idx[..., None], axis=1)
    return _linear_bwd(dy, latents, p["dec_embed.w"], grads, "dec_embed.")


def mae_forward(params, tokens, vis_idx, trace=None):
    latents, ec = encoder_fwd(params, tokens, vis_idx, trace)
    pred, dc = decoder_fwd(params, latents, vis_idx, trace)
    return pred, (ec, dc, tokens.shape, vis_idx)


def mae_backward(params, cache, dpred):
    """Parameter gradients (dict) and the gradient w.r.t. the input tokens."""
    ec, dc, tok_shape, vis_idx = cache
    grads = {}
    dlat = decoder_bwd(params, dc, dpred, grads)
    dxv = encoder_bwd(params, ec, dlat, grads)
    dtokens = np.zeros(tok_shape, dtype=dxv.dtype)
    np.put_along_axis(dtokens, vis_idx[..., None], dxv, axis=1)
    out = {}
    for name, t in params.tensors.items():
        g = grads.get(name)
        out[name] = np.zeros_like(t) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    return out, dtokens


# ---------------------------------------------------------------------------
# user-facing helpers over spectrograms and plans
# ---------------------------------------------------------------------------

def _as_batch(spec, params):
    spec = np.asarray(spec, dtype=params.dtype)
    single = spec.ndim == 2
    if single:
        spec = spec[None]
    try:
        tokens, grid = patchify(spec, params.patch)
    except GridError as exc:
        raise ModelError(str(exc)) from None
    if grid != params.grid:
        raise ModelError(f"spectrogram gives a {grid.n_f}x{grid.n_t} grid, model expects "
                         f"{params.grid.n_f}x{params.grid.n_t}")
    return tokens, single


def _vis_index(plans, batch, n):
    if not isinstance(plans, (list, tuple)):
        plans = [plans] * batch
    if len(plans) != batch:
        raise ModelError(f"{len(plans)} mask plans for a batch of {batch}")
    keep = plans[0].keep
    for pl in plans:
        if pl.n != n:
            raise ModelError(f"mask plan covers {pl.n} patches, grid has {n}")
        if pl.keep != keep:
            raise ModelError("all plans in a batch must share the same keep count")
    return np.stack([pl.visible for pl in plans])


def encode_visible(spec, plan, params, trace=None):
    """Latents ``(keep, D)`` (or ``(B, keep, D)``) for the plan's visible patches."""
    tokens, single = _as_batch(spec, params)
    vis = _vis_index(plan, tokens.shape[0], params.grid.n)
    lat, _ = encoder_fwd(params, tokens, vis, trace)
    return lat[0] if single else lat


def decode(latents, plan, params, trace=None):
    """Predicted tokens for all N positions in canonical grid order."""
    latents = np.asarray(latents, dtype=params.dtype)
    single = latents.ndim == 2
    if single:
        latents = latents[None]
    vis = _vis_index(plan, latents.shape[0], params.grid.n)
    if latents.shape[1] != vis.shape[1]:
        raise ModelError(f"{latents.shape[1]} latents for a plan keeping {vis.shape[1]} patches")
    pred, _ = decoder_fwd(params, latents, vis, trace)
    return pred[0] if single else pred


def full_encode(spec, params):
    """Encoder output ``z`` of shape ``(N, D)`` over all patches, canonical order."""
    tokens, single = _as_batch(spec, params)
    vis = np.broadcast_to(np.arange(params.grid.n), (tokens.shape[0], params.grid.n))
    z, _ = encoder_fwd(params, tokens, np.ascontiguousarray(vis))
    return z[0] if single else z


def reconstruct(spec, plan, params):
    """Decoder output for every patch, as tokens ``(N, p_f*p_t)``."""
    return decode(encode_visible(spec, plan, params), plan, params)


def attention_last_layer(spec, params, ref):
    """Head-averaged last encoder block attention from patch ``ref=(f, t)``, shape ``(n_f, n_t)``."""
    f, t = ref
    try:
        qi = params.grid.index(f, t)
    except GridError as exc:
        raise ModelError(str(exc)) from None
    if params.enc.depth == 0:
        raise ModelError("model has no encoder blocks")
    tokens, _ = _as_batch(spec, params)
    tokens = tokens[:1]
    p = params.tensors
    x = _linear_fwd(tokens, p["patch_embed.w"], p["patch_embed.b"]) + params.enc_pos
    for i in range(params.enc.depth - 1):
        x, _ = _block_fwd(p, f"enc.{i}.", x, params.enc.heads)
    h, _ = _ln_fwd(x, p[f"enc.{params.enc.depth - 1}.ln1.g"], p[f"enc.{params.enc.depth - 1}.ln1.b"])
    _, (_, _, _, _, a, _) = _attn_fwd(p, f"enc.{params.enc.depth - 1}.attn.", h, params.enc.heads)
    return a[0, :, qi, :].mean(axis=0).reshape(params.grid.n_f, params.grid.n_t)


def build_model(T, patch, enc=DESK_ENCODER, dec=DESK_DECODER, seed=0, F=80, dtype=np.float32):
    return init_params(enc, dec, patch, grid_dims(F, T, patch), seed, dtype)
