"""Contextual masked auto-encoder pre-training for dense passage retrieval.

A deep encoder learns span representations through self-supervised MLM while
a shallow decoder reconstructs each span's neighbor from its masked tokens
plus the encoder's [CLS] embedding.  The package also ships the dual-encoder
contrastive fine-tuning stages (BM25 and mined hard negatives), exact
inner-product retrieval, and the MRR/Recall/nDCG evaluation suite.
"""

__version__ = "0.1.0"
