"""Spatiotemporal engression forecasting toolkit."""
