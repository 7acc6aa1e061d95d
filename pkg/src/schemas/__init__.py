"""
Schemas Module - Validación de datos con Pydantic
"""

from .config_schemas import RunConfig
from .result_schemas import Arm, ReplicationResult, ReplicationStatus, StudyMetrics

__all__ = [
    'RunConfig',
    'Arm',
    'ReplicationResult',
    'ReplicationStatus',
    'StudyMetrics',
]
