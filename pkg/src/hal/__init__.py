"""Heapified bias-aware active learning."""
