"""gazereach: placing/giving motion model with arm GMM/GMR, a gaze state machine and gated anticipation."""

__version__ = "0.1.0"
