"""Scale- and spatially-Markovian next-scale image generation at desk scale."""
from .attention import count_ops, full_attention, spatial_markov_attention
from .errors import MVARError
from .model import MVAR, ModelConfig
from .quantizer import Codebook, ResidualPyramid, ScaleSchedule, decode_pyramid, encode_pyramid, fit_codebook
from .sampler import SamplerConfig, generate

__all__ = [
    "MVAR",
    "Codebook",
    "MVARError",
    "ModelConfig",
    "ResidualPyramid",
    "SamplerConfig",
    "ScaleSchedule",
    "count_ops",
    "decode_pyramid",
    "encode_pyramid",
    "fit_codebook",
    "full_attention",
    "generate",
    "spatial_markov_attention",
]

__version__ = "0.1.0"
