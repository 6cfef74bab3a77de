"""Larger-context recurrent language modelling.

An LSTM language model conditioned on preceding sentences through BoW,
sequence-of-BoW, or attention context encoders with early or late fusion,
plus a modified Kneser-Ney n-gram baseline, Adadelta training, and
perplexity evaluation (overall and per POS tag).
"""

__version__ = "0.1.0"
