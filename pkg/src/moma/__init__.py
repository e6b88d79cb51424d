"""Mixture-of-multimodal-agents pipelines for clinical prediction.

Specialist agents turn non-text modalities into text, an aggregator merges
them with the clinical notes, and a trainable head classifies an embedding
of the aggregated summary.
"""

__version__ = "0.1.0"
