"""
Modules - Pérdidas, inferencia, estrategias y utilidades
"""
