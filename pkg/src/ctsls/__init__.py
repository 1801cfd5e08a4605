"""Censored two-stage least squares (cTSLS) for IV analysis of right-censored AFT data."""
