"""Desk-scale GPL / R-GPL domain adaptation for dense retrievers.

Pipeline: pseudo-query generation over a target corpus, MarginMSE
distillation from a teacher scorer into a trainable bi-encoder, hard
negatives mined from a dense index that is either static (GPL) or
refreshed every k steps by the model under adaptation (R-GPL), plus
ranking evaluation and training-diagnostic analysis.
"""

__version__ = "0.1.0"
