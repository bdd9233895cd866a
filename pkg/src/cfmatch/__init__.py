"""Distribution matching with empirical characteristic functions.

A generator learns a target distribution by minimizing the distance between
the empirical characteristic functions (ECFs) of real and generated batches.
The query points at which the two ECFs are compared are themselves produced
by a sampler -- fixed Gaussian draws, a pointwise MLP, or a kNN-graph
message-passing network trained to seek the regions of largest discrepancy.
"""

__version__ = "0.1.0"
