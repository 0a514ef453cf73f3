"""Simulated processor and latency-diversifying co-processor for measuring
timing side-channel capacity of hardened programs."""

__version__ = "0.1.0"
