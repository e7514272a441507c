"""Match-mismatch auditory EEG decoding toolkit.

Given a short EEG segment and two candidate stimulus-feature segments, the
decoders in this package classify which candidate is time-aligned with the
EEG. Two stimulus features are supported end to end: the compressed
broadband speech envelope at 64 Hz and the high-frequency envelope
modulations feature at 512 Hz. The package covers feature extraction, EEG
preprocessing, decoder training from scratch, ensembling, fine-tuning, a
linear composite of the two decoder families, and the evaluation harness,
plus a synthetic-data generator that makes the whole pipeline testable
without any recorded data.
"""

__version__ = "0.1.0"

from .model import (
    DecoderConfig,
    DecoderParams,
    FEATURE_ENVELOPE,
    FEATURE_MODULATIONS,
    FEATURE_RATES,
    forward,
    init_glorot,
    load_checkpoint,
    receptive_field,
    save_checkpoint,
)

__all__ = [
    "DecoderConfig",
    "DecoderParams",
    "FEATURE_ENVELOPE",
    "FEATURE_MODULATIONS",
    "FEATURE_RATES",
    "forward",
    "init_glorot",
    "load_checkpoint",
    "receptive_field",
    "save_checkpoint",
    "__version__",
]
