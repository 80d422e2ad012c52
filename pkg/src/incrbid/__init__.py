"""Incrementality bidding: continuous-time ad stock, causal estimation and bid valuation."""

from __future__ import annotations

__version__ = "0.1.0"
