"""Confidence-gap routing for pools of LLM experts.

An offline pipeline turns pairwise jury verdicts into per-prompt quality
targets, trains predictors on prompt embeddings, and an online gateway
routes each request to the top predicted expert, consulting a binary
tie-breaker classifier whenever the predicted quality gap is small.
"""

__version__ = "0.1.0"
