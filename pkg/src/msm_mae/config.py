"""Flat ``key = value`` run configuration shared by every CLI subcommand."""

import dataclasses
from dataclasses import dataclass, fields

from .downstream import ProbeConfig
from .frontend import FrontendConfig, FrontendError
from .model import DecoderConfig, EncoderConfig, ModelError, init_params
from .patches import GridError, PatchConfig, grid_dims
from .pretrain import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # frontend
    sample_rate: int = 16000
    win_length: int = 400
    hop: int = 160
    n_fft: int = 512
    n_mels: int = 80
    f_min: float = 50.0
    f_max: float = 8000.0
    log_floor: float = 1e-6
    # patches (input_frames is T)
    input_frames: int = 96
    patch_f: int = 16
    patch_t: int = 16
    # encoder / decoder (desk scale by default)
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    enc_mlp_ratio: int = 4
    dec_dim: int = 32
    dec_depth: int = 1
    dec_heads: int = 4
    dec_mlp_ratio: int = 4
    # training
    epochs: int = 20
    warmup_epochs: int = 2
    batch_size: int = 8
    base_lr: float = 6e-4
    weight_decay: float = 0.05
    mask_ratio: float = 0.75
    normalize_target: bool = False
    seed: int = 0
    # data and paths
    data_dir: str = ""
    corpus_clips: int = 1024
    checkpoint: str = ""
    out_dir: str = "out"
    # probe
    probe_task: str = "pitch"
    probe_items: int = 20
    probe_hidden: int = 1024
    probe_epochs: int = 50
    probe_lr: float = 1e-3
    probe_seeds: int = 5

    def __post_init__(self):
        self.validate()

    # -- derived configs ---------------------------------------------------
    @property
    def frontend(self):
        return FrontendConfig(self.sample_rate, self.win_length, self.hop, self.n_fft, self.n_mels,
                              self.f_min, self.f_max, self.log_floor)

    @property
    def patch(self):
        return PatchConfig(self.patch_f, self.patch_t)

    @property
    def encoder(self):
        return EncoderConfig(self.enc_dim, self.enc_depth, self.enc_heads, self.enc_mlp_ratio)

    @property
    def decoder(self):
        return DecoderConfig(self.dec_dim, self.dec_depth, self.dec_heads, self.dec_mlp_ratio)

    @property
    def train(self):
        return TrainConfig(self.epochs, self.warmup_epochs, self.batch_size, self.base_lr, self.weight_decay,
                           mask_ratio=self.mask_ratio, normalize_target=self.normalize_target, seed=self.seed)

    @property
    def grid(self):
        return grid_dims(self.n_mels, self.input_frames, self.patch)

    def probe(self, seed):
        return ProbeConfig(self.probe_hidden, self.probe_epochs, self.probe_lr, seed=seed)

    def build_params(self):
        return init_params(self.encoder, self.decoder, self.patch, self.grid, self.seed)

    def validate(self):
        try:
            self.frontend, self.patch, self.encoder, self.decoder, self.train, self.grid
        except (FrontendError, GridError, ModelError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.sample_rate != 16000:
            raise ConfigError("only 16 kHz input is supported")
        if self.enc_dim % 4 or self.dec_dim % 4:
            raise ConfigError("enc_dim and dec_dim must be divisible by 4")
        if self.probe_task not in ("pitch", "polyphony"):
            raise ConfigError(f"unknown probe_task {self.probe_task!r}")
        if self.corpus_clips < 1 or self.probe_items < 3 or self.probe_seeds < 1:
            raise ConfigError("corpus_clips >= 1, probe_items >= 3 and probe_seeds >= 1 required")

    # -- text form ---------------------------------------------------------
    def to_text(self):
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(key, raw):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    typ = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text):
    """``key = value`` lines, ``#`` comments, blank lines ignored; returns a dict of typed values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def load_config(path=None, overrides=None):
    values = {}
    if path:
        try:
            with open(path) as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    values.update(overrides or {})
    return RunConfig(**values)


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
