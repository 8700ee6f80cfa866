"""Minimal deterministic tensor and neural-network engine."""
