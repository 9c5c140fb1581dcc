"""CTC sequence recognition toolkit: BLSTM acoustic models trained with
the CTC objective, WFST search-graph compilation, and prior-normalized
frame-synchronous beam-search decoding."""

__version__ = "0.1.0"

from . import ctc, decoder, features, graphs, nnet, trainer, wfst  # noqa: F401
