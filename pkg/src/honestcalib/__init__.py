"""Confidence calibration toolkit for logged QA predictions.

Computes entropy/max-probability uncertainty, honesty metrics (H-score and
ECI), mines contrastive triplets with exact Word Mover's Distance, trains a
projection head plus temperature scaler, and applies an abstention policy.
"""

__version__ = "0.1.0"
