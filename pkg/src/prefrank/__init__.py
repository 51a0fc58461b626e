"""prefrank: rank documents from sparse, noisy pairwise comparisons.

Modules:
    corpus        documents, pair/tuple labels, feature files, id subsampling
    bws           best-worst-scaling scores and rankings
    gppl          Gaussian process preference learning (sparse variational)
    directranker  antisymmetric pairwise neural ranker
    stacking      cross-validated stacking of base rankers
    evaluation    Spearman / ranking-distance harness and report files
    synth         synthetic ground-truth corpora
    cli           the `prefrank` command-line tool
"""

__version__ = "0.1.0"
