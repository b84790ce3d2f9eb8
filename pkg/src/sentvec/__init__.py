"""Fixed-size sentence embeddings from a bottleneck encoder-decoder trained on
synthetic parallel corpora, with a from-scratch autodiff engine."""

__version__ = "0.1.0"
