"""leafrep — instance-attribution explanations for gradient-boosted trees.

Explains tree-ensemble predictions through the training data: a tree-structure
kernel, a dual kernelized surrogate, and per-training-example contributions.
"""
__version__ = "0.1.0"
