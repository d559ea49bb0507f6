"""Numerical core: graphs, coefficients, integrators, estimators and checks."""
