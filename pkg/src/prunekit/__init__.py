"""prunekit: an iterative filter-pruning trainer.

The engine interleaves pruning and training: per-layer pruning ratios are
driven by each layer's measured weight sparsity, low-norm filters are masked
softly so they may regrow, and a one-batch probe step after each pruning pass
flags masked filters whose weights snap back violently (a symptom of cutting
a channel the network still needs) so they can be restored from backup.
"""

__version__ = "0.1.0"
