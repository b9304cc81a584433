"""Multimodal ECG/IEGM arrhythmia classification with a class-aware contrastive loss."""
from __future__ import annotations

__version__ = "0.1.0"
