"""digrec: a semantic-ID tokenizer trained inside a discriminative ranker.

One training run yields a ranker and a generative retriever. The shared
scoring network ranks items with full user-item cross features, and it runs
beam search over residual-quantized item codes with a learned token-level
substitute for those features.
"""

__version__ = "0.1.0"
