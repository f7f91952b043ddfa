"""Streaming speech recognition with a decoder-only model that reads speech
chunks and words interleaved, emitting BLANK to ask for more audio."""

from .inference import DecodeResult, Emission, StreamSession, beam_decode, decode_chunks, greedy_decode, stream_session
from .model import InputItem, ModelConfig, ReaLLM, decoder_step, forward_teacher_forced, init_params
from .synthdata import SynthSpec, gen_corpus, generate_split, load_split
from .targets import AlignedUtterance, AlignedWord, build_realm_sample, build_sample
from .training import TrainConfig, Trainer, evaluate, fit, lr_at
from .vocab import BLANK, BOS, EOS, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "BLANK", "BOS", "EOS", "AlignedUtterance", "AlignedWord", "DecodeResult", "Emission", "InputItem",
    "ModelConfig", "ReaLLM", "StreamSession", "SynthSpec", "TrainConfig", "Trainer", "Vocabulary",
    "beam_decode", "build_realm_sample", "build_sample", "decode_chunks", "decoder_step", "evaluate", "fit",
    "forward_teacher_forced", "gen_corpus", "generate_split", "greedy_decode", "init_params", "load_split",
    "lr_at", "stream_session",
]
