"""Controllable generation with dynamically steered prefix activations."""
