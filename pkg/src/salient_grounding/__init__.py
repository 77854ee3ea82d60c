"""Saliency-guided long-video temporal grounding at desk scale.

A cheap sidekick encoder scores every clip against the query, an expert
encoder re-encodes only the top-scoring clips, and a multi-scale grounder
localizes the queried moment from both feature streams.
"""

__version__ = "0.1.0"
