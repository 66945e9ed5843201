"""Tracking by instance detection with meta-learned detectors."""
