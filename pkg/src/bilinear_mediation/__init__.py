"""Bilinear-spline longitudinal mediation models fitted by FIML."""
