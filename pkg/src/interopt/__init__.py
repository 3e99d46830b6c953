"""Well-level optimization of adjustable features over a neural emulator.

The pipeline trains a small MLP emulator on tabular well data, explains it
with Shapley values, and optimizes each well's adjustable features with an
ensemble randomized maximum likelihood (EnRML) loop whose corrections are
reweighted by those Shapley values.
"""

__version__ = "0.1.0"
