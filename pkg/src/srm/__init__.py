"""Structured Recurrent Mixer: a causal token mixer with a parallel form for
training and a constant-memory recurrent form for decoding."""

from .config import BOS_ID, BYTE_VOCAB, PAD_ID, ConfigError, HeadMode, RunConfig, SrmConfig, TrainConfig, load_config
from .generation import GREEDY, SamplerSpec, generate
from .mixing import HeadKind, KernelMixerParams, MixerHeadParams, build_structured_matrix, parallel_mix, parallel_mix_kernel
from .model import SrmModel
from .recurrent import step_col, step_head, step_kernel, step_row

__all__ = [
    "BOS_ID", "BYTE_VOCAB", "PAD_ID", "ConfigError", "HeadMode", "RunConfig", "SrmConfig", "TrainConfig",
    "load_config", "GREEDY", "SamplerSpec", "generate", "HeadKind", "KernelMixerParams", "MixerHeadParams",
    "build_structured_matrix", "parallel_mix", "parallel_mix_kernel", "SrmModel",
    "step_col", "step_head", "step_kernel", "step_row",
]
