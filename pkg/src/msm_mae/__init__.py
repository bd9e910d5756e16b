"""Masked spectrogram modeling with an asymmetric masked autoencoder, in numpy (+ numba kernels)."""

from ._kernels import backend
from .config import RunConfig, load_config
from .features import EmbeddingMatrix, scene_embedding, segment_and_encode, timestamp_embeddings
from .frontend import FrontendConfig, NormStats, PcmSignal, log_mel_spectrogram, read_wav_file
from .model import (DESK_DECODER, DESK_ENCODER, MODEL_CONFIGS, DecoderConfig, EncoderConfig, ModelParams,
                    build_model, full_encode, init_params, reconstruct)
from .patches import Grid, MaskPlan, PatchConfig, grid_dims, patchify, random_mask_plan, unpatchify
from .pretrain import TrainConfig, load_checkpoint, pretrain, save_checkpoint

__version__ = "0.1.0"
