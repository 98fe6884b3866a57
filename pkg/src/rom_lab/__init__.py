"""Desk-scale lab for retrieval-oriented masking.

Weight-biased token masking for MLM pre-training, a tiny from-scratch
transformer encoder, dual-encoder retrieval fine-tuning, and an exact
evaluation harness, all deterministic under a single master seed.
"""

__version__ = "0.1.0"
