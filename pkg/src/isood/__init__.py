"""Incremental-shift OOD benchmark toolkit.

Builds graded OOD benchmarks from precomputed embeddings: trains the
orthogonal semantic/covariate feature decomposition, measures per-sample
shift degrees against an ID corpus, divides test corpora into shift-level
subsets, scores samples with post-hoc detectors, and reports FPR@95 / AUROC /
AUPR plus per-axis trend statistics.
"""

__version__ = "0.1.0"
