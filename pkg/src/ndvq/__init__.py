"""Residual vector quantization with normal-distribution codebooks for a toy audio codec."""

from .codec import CodecConfig, ToyCodecModel, bandwidth_to_nq, pack_bitstream, unpack_bitstream
from .metrics import EvalReport, evaluate, si_sdr
from .quantizer import (
    EuclideanCodebook,
    NormalCodebook,
    ResidualQuantizer,
    init_codebooks,
    quantize_infer,
    quantize_train,
    select_code,
)
from .signal import AudioBuffer, load_wav, save_wav
from .training import TrainConfig, compare_quantizers, toy_config, train

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "CodecConfig",
    "EuclideanCodebook",
    "EvalReport",
    "NormalCodebook",
    "ResidualQuantizer",
    "ToyCodecModel",
    "TrainConfig",
    "bandwidth_to_nq",
    "compare_quantizers",
    "evaluate",
    "init_codebooks",
    "load_wav",
    "pack_bitstream",
    "quantize_infer",
    "quantize_train",
    "save_wav",
    "select_code",
    "si_sdr",
    "toy_config",
    "train",
    "unpack_bitstream",
]
