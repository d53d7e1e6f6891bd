from cemat.decoding.beam import banned_ids, beam_search, beam_search_core
from cemat.decoding.hypothesis import DecodeConfig, Hypothesis
from cemat.decoding.mask_predict import (
    mask_predict,
    mask_predict_core,
    predict_length,
    remask_schedule,
    rerank,
)
from cemat.decoding.translate import surface, translate

__all__ = [
    "DecodeConfig",
    "Hypothesis",
    "banned_ids",
    "beam_search",
    "beam_search_core",
    "mask_predict",
    "mask_predict_core",
    "predict_length",
    "remask_schedule",
    "rerank",
    "surface",
    "translate",
]
