"""Patellofemoral OA progression prediction: ROI extraction, attention CNN, boosted trees, stacking and evaluation."""

__version__ = "0.1.0"
