"""Reconstruction triptychs, mask-ratio sweeps and attention heatmaps as binary PPM images.

Values are mapped to pixels by a per-panel affine ``round(255 * (v - lo) / (hi - lo))``;
``lo``/``hi`` go to a ``.meta`` sidecar so panels can be compared or inverted.
Images are drawn with low frequencies at the bottom.
"""

from dataclasses import dataclass, field

import numpy as np

from .model import ModelError, attention_last_layer, reconstruct
from .patches import patchify, random_mask_plan, unpatchify

GUTTER = 4
DEFAULT_RATIOS = (0.40, 0.50, 0.60, 0.75, 0.90, 0.95, 0.98, 0.99)


def to_pixels(values, lo=None, hi=None):
    """Affine map to uint8; returns ``(pixels, lo, hi)``."""
    values = np.asarray(values, dtype=np.float64)
    lo = float(values.min()) if lo is None else lo
    hi = float(values.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8), lo, hi
    pix = np.rint(255.0 * (values - lo) / (hi - lo))
    return np.clip(pix, 0, 255).astype(np.uint8), lo, hi


def from_pixels(pix, lo, hi):
    return lo + (hi - lo) * np.asarray(pix, dtype=np.float64) / 255.0


def _gray(pix):
    return np.repeat(pix[..., None], 3, axis=2)


def _hot(pix):
    v = pix.astype(np.float64) / 255.0
    rgb = np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)
    return np.rint(255 * rgb).astype(np.uint8)


def _outline(img, r0, r1, c0, c1, color=(255, 255, 255)):
    """Draw a 1-px rectangle on an image in array (row 0 = top) coordinates."""
    img[r0, c0:c1] = color
    img[r1 - 1, c0:c1] = color
    img[r0:r1, c0] = color
    img[r0:r1, c1 - 1] = color


def _patch_rows(F, f, p_f):
    """Array rows spanned by frequency patch ``f`` once the image is flipped upright."""
    return F - (f + 1) * p_f, F - f * p_f


def hstack_panels(panels, gutter=GUTTER):
    h = panels[0].shape[0]
    gap = np.zeros((h, gutter, 3), dtype=np.uint8)
    out = [panels[0]]
    for p in panels[1:]:
        out += [gap, p]
    return np.concatenate(out, axis=1)


def write_ppm(path, rgb, meta=None):
    """Binary P6 PPM; ``meta`` (dict of panel -> (lo, hi)) goes to ``path + '.meta'``."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
    if meta:
        with open(str(path) + ".meta", "w") as fh:
            for name, (lo, hi) in meta.items():
                fh.write(f"{name} min={lo!r} max={hi!r}\n")


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval = data.split(maxsplit=4)[:4]
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError("not a binary 8-bit PPM")
    w, h = int(w), int(h)
    return np.frombuffer(data[-w * h * 3:], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

@dataclass
class Triptych:
    input: np.ndarray
    recon: np.ndarray
    error: np.ndarray
    visible: list = field(default_factory=list)  # (f, t) patch coords to outline
    patch: tuple = (16, 16)
    show_visible: bool = True

    @property
    def mse(self):
        return float(np.mean((self.recon - self.input) ** 2))

    def image(self):
        """``(rgb, meta)`` with panels input | reconstruction | error."""
        F = self.input.shape[0]
        lo = float(min(self.input.min(), self.recon.min()))
        hi = float(max(self.input.max(), self.recon.max()))
        pin, _, _ = to_pixels(self.input[::-1], lo, hi)
        prec, _, _ = to_pixels(self.recon[::-1], lo, hi)
        perr, elo, ehi = to_pixels(self.error[::-1], 0.0, float(self.error.max()))
        rec_img = _gray(prec)
        if self.show_visible:
            p_f, p_t = self.patch
            for f, t in self.visible:
                r0, r1 = _patch_rows(F, f, p_f)
                _outline(rec_img, r0, r1, t * p_t, (t + 1) * p_t)
        err_img = _gray(255 - perr)  # darker = larger error
        meta = {"input": (lo, hi), "reconstruction": (lo, hi), "error": (elo, ehi)}
        return hstack_panels([_gray(pin), rec_img, err_img]), meta

    def save(self, path):
        rgb, meta = self.image()
        write_ppm(path, rgb, meta)


def render_reconstruction(spec, params, plan, show_visible=True, decoder_everywhere=False):
    """Input, reconstruction and per-pixel RMS error for one spectrogram and mask plan.

    By default the reconstruction shows the original patches at visible
    positions and decoder output at masked ones.
    """
    spec = np.asarray(spec, dtype=np.float64)
    tokens, grid = patchify(spec, params.patch)
    if grid != params.grid or plan.n != grid.n:
        raise ModelError("mask plan / spectrogram do not match the model grid")
    pred = reconstruct(spec, plan, params).astype(np.float64)
    if not decoder_everywhere:
        pred = np.where(plan.mask_vector()[:, None], pred, tokens)
    recon = unpatchify(pred, grid, params.patch)
    error = np.sqrt((recon - spec) ** 2)
    visible = [grid.coords(i) for i in sorted(plan.visible.tolist())]
    return Triptych(spec, recon, error, visible, (params.patch.p_f, params.patch.p_t), show_visible)


@dataclass
class SweepEntry:
    ratio: float
    mse: float
    triptych: Triptych


@dataclass
class SweepReport:
    entries: list

    @property
    def ratios(self):
        return [e.ratio for e in self.entries]

    @property
    def mses(self):
        return [e.mse for e in self.entries]


def mask_ratio_sweep(spec, params, ratios=DEFAULT_RATIOS, seed=0):
    """One random plan per ratio; MSE is averaged over the entire spectrogram."""
    ratios = sorted(float(r) for r in ratios)
    if len(set(ratios)) != len(ratios):
        raise ValueError("ratios must be distinct")
    entries = []
    for r in ratios:
        plan = random_mask_plan(params.grid.n, r, seed)
        tri = render_reconstruction(spec, params, plan, show_visible=r > 0.75)
        entries.append(SweepEntry(r, tri.mse, tri))
    return SweepReport(entries)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionImage:
    ref: tuple
    weights: np.ndarray  # (n_f, n_t), sums to 1
    rgb: np.ndarray
    meta: dict

    def save(self, path):
        write_ppm(path, self.rgb, self.meta)


def render_attention(spec, params, refs):
    """Spectrogram | attention heatmap (upsampled patchwise), reference patch outlined."""
    spec = np.asarray(spec, dtype=np.float64)
    F = spec.shape[0]
    p_f, p_t = params.patch.p_f, params.patch.p_t
    spix, slo, shi = to_pixels(spec[::-1])
    out = []
    for ref in refs:
        f, t = int(ref[0]), int(ref[1])
        w = attention_last_layer(spec, params, (f, t)).astype(np.float64)
        up = np.kron(w, np.ones((p_f, p_t)))
        hpix, hlo, hhi = to_pixels(up[::-1], 0.0, float(w.max()))
        heat = _hot(hpix)
        r0, r1 = _patch_rows(F, f, p_f)
        _outline(heat, r0, r1, t * p_t, (t + 1) * p_t, color=(0, 255, 255))
        spec_img = _gray(spix)
        _outline(spec_img, r0, r1, t * p_t, (t + 1) * p_t, color=(0, 255, 255))
        rgb = hstack_panels([spec_img, heat])
        out.append(AttentionImage((f, t), w, rgb, {"spectrogram": (slo, shi), "attention": (hlo, hhi)}))
    return out
