"""Resonance tracking for nonlinear resonant ultrasound spectroscopy."""

__version__ = "0.1.0"
