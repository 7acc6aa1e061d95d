"""
Engines - Motores de muestreo, estimación y simulación
"""
