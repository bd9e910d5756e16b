"""``msm-mae`` command line: prep, pretrain, extract, probe, viz-recon, viz-sweep, viz-attn, selftest.

Every subcommand takes ``--config FILE`` plus one ``--<key>`` flag per config
key.  Precedence is file < ``MSM_SEED`` env var < flags.  The effective config
is written to ``<out_dir>/config.txt``.
"""

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import FIELD_TYPES, ConfigError, RunConfig, load_config, parse_value
from .downstream import (ProbeError, make_polyphony_task, make_sine_pitch_task, run_probe,
                         synthetic_corpus)
from .features import FeatureError, scene_embedding, segment_and_encode, write_embeddings_csv
from .frontend import (FrontendError, NormStats, PcmSignal, compute_norm_stats, log_mel_spectrogram,
                       read_wav_file)
from .model import ModelError, config_conformance
from .patches import GridError, patterned_mask_plan, random_mask_plan
from .pretrain import (CheckpointError, NumericError, desk_grad_check, load_checkpoint, pretrain,
                       save_checkpoint, write_metrics_csv)
from .tensorio import TensorFileError, load_tensors, save_tensors

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

CORPUS_FILE = "corpus.msmm"
CHECKPOINT_FILE = "checkpoint.msmm"


class UsageError(Exception):
    """Bad command-line input; exits with the config error code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _add_config_flags(p):
    p.add_argument("--config", metavar="FILE", help="key = value config file")
    p.add_argument("--threads", type=int, default=None, metavar="N", help="cap BLAS/numba worker threads")
    keys = p.add_argument_group("config keys (override the file)")
    defaults = RunConfig()
    for key, typ in FIELD_TYPES.items():
        keys.add_argument(f"--{key}", dest=f"key_{key}", metavar=getattr(typ, "__name__", str(typ)).upper(),
                          default=None, help=f"default: {getattr(defaults, key)!r}")


def _effective_config(args):
    overrides = {}
    if "MSM_SEED" in os.environ:
        overrides["seed"] = parse_value("seed", os.environ["MSM_SEED"])
    for key in FIELD_TYPES:
        raw = getattr(args, f"key_{key}", None)
        if raw is not None:
            overrides[key] = parse_value(key, raw)
    try:
        return load_config(args.config, overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    try:
        import numba

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # threading-layer probe noise
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass
    return threadpool_limits(limits=n)


def _out_dir(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return out


def _checkpoint_path(cfg):
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / CHECKPOINT_FILE


def _load_model(cfg):
    path = _checkpoint_path(cfg)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, _, norm = load_checkpoint(path, cfg.build_params())
    if norm is None:
        raise CheckpointError(f"checkpoint {path} carries no normalization stats")
    return params, norm


def _wav_spectrogram(path, cfg):
    return log_mel_spectrogram(read_wav_file(path), cfg.frontend)


def _fit_frames(spec, T):
    """Crop or zero-pad (in normalized space) to exactly ``T`` frames."""
    if spec.shape[1] >= T:
        return spec[:, :T]
    return np.concatenate([spec, np.zeros((spec.shape[0], T - spec.shape[1]), dtype=spec.dtype)], axis=1)


def build_corpus(cfg):
    """Raw log-mel corpus ``(K, F, T)``: WAV chunks from ``data_dir`` or the synthetic generator."""
    T = cfg.input_frames
    if not cfg.data_dir:
        return synthetic_corpus(cfg.corpus_clips, T, cfg.seed, cfg.frontend)
    wavs = sorted(Path(cfg.data_dir).glob("*.wav"))
    if not wavs:
        raise FileNotFoundError(f"no .wav files in {cfg.data_dir}")
    chunks = []
    for w in wavs:
        spec = _wav_spectrogram(w, cfg)
        chunks += [spec[:, s:s + T] for s in range(0, spec.shape[1] - T + 1, T)]
    if not chunks:
        raise FrontendError(f"no clip in {cfg.data_dir} spans {T} frames")
    return np.stack(chunks)


def _corpus_and_norm(cfg, out):
    cache = out / CORPUS_FILE
    if cache.exists():
        data = load_tensors(cache)
        specs = data["specs"]
        if specs.shape[1:] == (cfg.n_mels, cfg.input_frames):
            mean, std = (float(v) for v in data["norm.stats"])
            return specs, NormStats(mean, std)
    specs = build_corpus(cfg)
    return specs, compute_norm_stats(specs)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_prep(args, cfg):
    out = _out_dir(cfg)
    specs = build_corpus(cfg)
    norm = compute_norm_stats(specs)
    save_tensors(out / CORPUS_FILE, {"specs": specs, "norm.stats": np.array([norm.mean, norm.std])})
    print(f"cached {len(specs)} spectrograms {specs.shape[1:]} -> {out / CORPUS_FILE}; "
          f"mean={norm.mean:.6g} std={norm.std:.6g}")


def cmd_pretrain(args, cfg):
    out = _out_dir(cfg)
    specs, norm = _corpus_and_norm(cfg, out)
    specs = norm.apply(specs).astype(np.float32)
    params = cfg.build_params()
    ckpt = out / CHECKPOINT_FILE
    reports = []

    def on_epoch(epoch, p, opt):
        save_checkpoint(ckpt, p, opt, norm)
        write_metrics_csv(out / "metrics.csv", reports)
        last = reports[-1]
        print(f"epoch {epoch + 1}/{cfg.epochs} loss={last.masked_mse:.5f} lr={last.lr:.3g}")

    pretrain(specs, params, cfg.train, on_epoch=on_epoch, log=reports.append)
    print(f"wrote {ckpt} and {out / 'metrics.csv'}")


def cmd_extract(args, cfg):
    out = _out_dir(cfg)
    params, norm = _load_model(cfg)
    for wav in args.wavs:
        emb = segment_and_encode(read_wav_file(wav), params, norm, cfg.frontend)
        stem = out / Path(wav).stem
        save_tensors(stem.with_suffix(".msmm"), {"embeddings": emb.values,
                                                 "frame_hop_ms": np.array(emb.frame_hop_ms)})
        write_embeddings_csv(stem.with_suffix(".csv"), emb)
        print(f"{wav}: {emb.values.shape[0]} rows x {emb.values.shape[1]} -> {stem}.msmm")


def _scene_embedder(params, norm, cfg):
    def embed(audio):
        return scene_embedding(segment_and_encode(PcmSignal(audio), params, norm, cfg.frontend))
    return embed


def cmd_probe(args, cfg):
    out = _out_dir(cfg)
    if args.random_init:
        params = cfg.build_params()
        norm = _load_model(cfg)[1] if _checkpoint_path(cfg).exists() else None
        if norm is None:
            norm = compute_norm_stats(build_corpus(cfg))
    else:
        params, norm = _load_model(cfg)
    maker = make_sine_pitch_task if cfg.probe_task == "pitch" else make_polyphony_task
    task = maker(cfg.probe_items, seed=cfg.seed)
    embed = _scene_embedder(params, norm, cfg)
    X = np.stack([embed(a) for a in task.audio])
    tr, va, te = task.indices("train"), task.indices("valid"), task.indices("test")
    runs = []
    for s in range(cfg.probe_seeds):
        m = run_probe(X[tr], task.labels[tr], X[te], task.labels[te], cfg.probe(s),
                      n_classes=len(task.label_space), valid=(X[va], task.labels[va]))
        runs.append({"seed": s, "accuracy": m.accuracy, "per_class": m.per_class})
    mean = float(np.mean([r["accuracy"] for r in runs]))
    result = {"task": task.name, "model": "random-init" if args.random_init else str(_checkpoint_path(cfg)),
              "mean_accuracy": mean, "chance": 1.0 / len(task.label_space), "runs": runs}
    (out / "metrics.json").write_text(json.dumps(result, indent=2) + "\n")
    (out / "manifest.jsonl").write_text("\n".join(task.manifest_lines()) + "\n")
    print(f"{task.name}: mean accuracy {mean:.4f} over {cfg.probe_seeds} seeds (chance {result['chance']:.3f})")


def _viz_input(path, cfg, norm):
    return _fit_frames(norm.apply(_wav_spectrogram(path, cfg)), cfg.input_frames)


def cmd_viz_recon(args, cfg):
    from .viz import render_reconstruction

    out = _out_dir(cfg)
    params, norm = _load_model(cfg)
    spec = _viz_input(args.wav, cfg, norm)
    if args.pattern == "random":
        plan = random_mask_plan(params.grid.n, cfg.mask_ratio, cfg.seed)
    else:
        plan = patterned_mask_plan(params.grid, args.pattern)
    tri = render_reconstruction(spec, params, plan, show_visible=not args.no_outline,
                                decoder_everywhere=args.decoder_everywhere)
    path = out / f"{Path(args.wav).stem}_recon_{args.pattern}.ppm"
    tri.save(path)
    print(f"{path}: mse={tri.mse:.6f}")


def cmd_viz_sweep(args, cfg):
    from .viz import DEFAULT_RATIOS, mask_ratio_sweep

    out = _out_dir(cfg)
    params, norm = _load_model(cfg)
    spec = _viz_input(args.wav, cfg, norm)
    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else DEFAULT_RATIOS
    report = mask_ratio_sweep(spec, params, ratios, cfg.seed)
    for e in report.entries:
        path = out / f"{Path(args.wav).stem}_sweep_{e.ratio:.2f}.ppm"
        e.triptych.save(path)
        print(f"ratio={e.ratio:.2f} mse={e.mse:.6f} -> {path}")


def _parse_ref(text):
    try:
        f, t = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"reference must be 'f,t', got {text!r}") from None
    return f, t


def cmd_viz_attn(args, cfg):
    from .viz import render_attention

    out = _out_dir(cfg)
    params, norm = _load_model(cfg)
    spec = _viz_input(args.wav, cfg, norm)
    for img in render_attention(spec, params, args.ref):
        path = out / f"{Path(args.wav).stem}_attn_{img.ref[0]}_{img.ref[1]}.ppm"
        img.save(path)
        print(f"ref={img.ref} -> {path}")


def cmd_selftest(args, cfg):
    bad = [(n, e, g) for n, e, g in config_conformance() if e != g]
    for n, e, g in bad:
        print(f"patch-count mismatch for {n}: expected {e}, got {g}")
    print(f"patch-count conformance: {9 - len(bad)}/9 configs match")
    rep = desk_grad_check(depth=args.depth, n_samples=args.samples)
    print(f"grad check: max rel err {rep.max_rel_err:.3e} over {rep.n_checked} parameters "
          f"({rep.structural_zeros} structural zeros, max |fd| {rep.max_zero_abs:.1e})")
    if bad or not rep.max_rel_err < 1e-5:
        raise NumericError("selftest failed")
    print("selftest ok")


COMMANDS = {
    "prep": (cmd_prep, "cache the pretraining spectrograms and normalization stats"),
    "pretrain": (cmd_pretrain, "masked-spectrogram pretraining with per-epoch checkpoints"),
    "extract": (cmd_extract, "timestamp embeddings for WAV files"),
    "probe": (cmd_probe, "shallow probe on a synthetic task"),
    "viz-recon": (cmd_viz_recon, "input / reconstruction / error triptych"),
    "viz-sweep": (cmd_viz_sweep, "reconstructions across mask ratios"),
    "viz-attn": (cmd_viz_attn, "last-layer attention heatmaps"),
    "selftest": (cmd_selftest, "gradient check and patch-count conformance"),
}


def build_parser():
    parser = _Parser(prog="msm-mae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}
    for name, (_, help_) in COMMANDS.items():
        subs[name] = p = sub.add_parser(name, help=help_, description=help_)
        _add_config_flags(p)
    subs["extract"].add_argument("wavs", nargs="+", metavar="WAV")
    subs["probe"].add_argument("--random-init", action="store_true",
                               help="probe an untrained model built from the config instead of the checkpoint")
    for name in ("viz-recon", "viz-sweep", "viz-attn"):
        subs[name].add_argument("wav", metavar="WAV")
    subs["viz-recon"].add_argument("--pattern", default="random",
                                   choices=("random", "vertical", "horizontal", "chessboard"))
    subs["viz-recon"].add_argument("--no-outline", action="store_true")
    subs["viz-recon"].add_argument("--decoder-everywhere", action="store_true")
    subs["viz-sweep"].add_argument("--ratios", default=None, help="comma-separated mask ratios")
    subs["viz-attn"].add_argument("--ref", type=_parse_ref, action="append", required=True,
                                  help="reference patch 'f,t' (repeatable)")
    subs["selftest"].add_argument("--depth", type=int, default=1, choices=(1, 2))
    subs["selftest"].add_argument("--samples", type=int, default=200)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = _effective_config(args)
        limiter = _limit_threads(args.threads)
        try:
            COMMANDS[args.command][0](args, cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except SystemExit as exc:  # --help
        return exc.code or 0
    except (UsageError, ConfigError, CheckpointError, GridError, ModelError, ProbeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TensorFileError, FrontendError, FeatureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
