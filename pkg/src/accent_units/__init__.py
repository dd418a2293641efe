"""Unsupervised accent correction of discrete speech-unit sequences."""

from .adapt import AcousticEncoderSpec, AdaptedEncoder, continual_pretrain, insert_adapters, pretrain_base
from .config import PipelineConfig, load_config
from .corpus import LexiconSpec, ShiftSpec, apply_accent_shift, generate_standard, make_lexicon
from .corrector import AccentCorrector, CorrectionVariant, MaskSchedule, build_schedule, correct
from .exceptions import ContractError, NotFittedError
from .mlm import CountScorer, MaskedUnitLM, SpanMaskPolicy
from .phonemap import PhoneMap, PhoneMapper, learn_phone_map, phone_error_rate
from .quantizer import Codebook, KMeansQuantizer, fit_kmeans
from .seqcore import ClusterSequence, GroupedSequence, group_runs

__version__ = "0.1.0"

__all__ = [
    "AccentCorrector", "AcousticEncoderSpec", "AdaptedEncoder", "ClusterSequence", "Codebook",
    "ContractError", "CorrectionVariant", "CountScorer", "GroupedSequence", "KMeansQuantizer",
    "LexiconSpec", "MaskSchedule", "MaskedUnitLM", "NotFittedError", "PhoneMap", "PhoneMapper",
    "PipelineConfig", "ShiftSpec", "SpanMaskPolicy", "apply_accent_shift", "build_schedule",
    "continual_pretrain", "correct", "fit_kmeans", "generate_standard", "group_runs",
    "insert_adapters", "learn_phone_map", "load_config", "make_lexicon", "phone_error_rate",
    "pretrain_base",
]
