"""Elastic prompt and model serving for a toy transformer under latency SLOs.

Offline, a trained model's attention heads and MLP neurons are reordered by
importance so every sub-model is a leading slice of each weight tensor.
Online, a planner picks a (prompt level, model level) pair per request that
fits the request's latency SLO, and the runtime switches sub-models without
copying weights.
"""
__version__ = "0.1.0"
