"""Synthetic CCE phantom frames: rendering, augmentation, splitting and storage."""
