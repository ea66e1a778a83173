from .checkpoint import CheckpointError, fingerprint, load, save
from .decoding import Hypothesis, beam_search, greedy_decode, sample_decode
from .model import GrammarError, RewriteOutput, RewritePolicy, SequenceSample, parse_output
from .network import RNNParams
from .vocab import Vocab

__all__ = [
    "CheckpointError",
    "GrammarError",
    "Hypothesis",
    "RNNParams",
    "RewriteOutput",
    "RewritePolicy",
    "SequenceSample",
    "Vocab",
    "beam_search",
    "fingerprint",
    "greedy_decode",
    "load",
    "parse_output",
    "sample_decode",
    "save",
]
