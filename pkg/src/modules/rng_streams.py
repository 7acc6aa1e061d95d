"""
RNG Streams - Flujos aleatorios basados en contador
====================================================
Cada (replicación, canal, ola) obtiene su propio generador Philox derivado de
la semilla maestra. Dentro de una ola el uniforme de la unidad i es la salida
i-ésima del contador, así que el resultado no depende del orden de ejecución
ni del grado de paralelismo.

Versión: 1.0
"""

import numpy as np

# Canales reservados del spawn_key
PHASE_ONE = 0
ADAPTIVE_WAVE = 1
BASELINE_WAVE = 2
SUPERPOPULATION = 3


def stream(master_seed: int, replication: int, channel: int, wave: int = 0) -> np.random.Generator:
    """
    Crea el generador de una (replicación, canal, ola).

    Args:
        master_seed: Semilla maestra del estudio
        replication: Índice de replicación (0 para estudios únicos)
        channel: Uno de los canales de este módulo
        wave: Índice de ola (1..K) o 0 si no aplica

    Returns:
        Generador numpy sobre Philox
    """
    seq = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=(int(replication), int(channel), int(wave)),
    )
    return np.random.Generator(np.random.Philox(seq))


def wave_uniforms(master_seed: int, replication: int, wave: int, n_units: int,
                  channel: int = ADAPTIVE_WAVE) -> np.ndarray:
    """Uniformes U_i^(k) para las n unidades de una ola, en orden de unidad."""
    return stream(master_seed, replication, channel, wave).random(n_units)
