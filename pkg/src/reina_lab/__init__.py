"""Desk-scale lab for adaptive READ/WRITE policy learning in streaming translation.

The package trains a micro encoder-decoder on synthetic stream-translation
tasks, fits a READ/WRITE policy head with a covariance-style information-gain
loss, decodes with chunked policy-gated beam search, and evaluates the
latency/quality tradeoff (AL, LAAL, BLEU, NoSE) against exact enumeration
oracles and fixed-policy baselines.
"""

__version__ = "0.1.0"
