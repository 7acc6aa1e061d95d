"""
MPD Sampling - Muestreo adaptativo multiola y estimación Predict-Then-Debias
"""

__version__ = "1.0.0"
