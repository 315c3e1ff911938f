"""Numerical service layer: model, PDE engines, path simulation, statistics and the gateway."""
