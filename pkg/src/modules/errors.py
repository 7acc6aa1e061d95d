"""
Errors - Jerarquía de excepciones del toolkit
==============================================
Cada excepción lleva un código estable (``code``) que el CLI imprime y que
las simulaciones guardan como ``reason`` en las replicaciones fallidas.

Versión: 1.0
"""

from typing import Any, Iterable, Optional


class MPDError(Exception):
    """Excepción base. ``code`` identifica el fallo en CSVs y en el CLI."""

    code = "mpd_error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)

    def describe(self) -> str:
        return f"{self.code}: {self}"


class ConfigurationError(MPDError):
    """Configuración inválida (rangos, mezclas c_k, claves desconocidas)."""

    code = "configuration"


class ProtocolError(MPDError):
    """Olas ejecutadas fuera de orden o estudio incompleto."""

    code = "protocol"


class OverlapViolationError(MPDError):
    """Probabilidad de etiquetado fuera de [b_targ, 1 - b_targ]."""

    code = "overlap_violation"


class DivisionSafetyError(MPDError):
    """Probabilidad fuera de (0, 1) en una fórmula de pesos."""

    code = "division_safety"


class UnlabelledAccessError(MPDError):
    """Lectura de variables caras en una unidad nunca etiquetada."""

    code = "unlabelled_access"


class DimensionMismatchError(MPDError):
    code = "dimension_mismatch"


class MissingContextError(MPDError):
    """La pérdida cuantil necesita la muestra ponderada para su Hessiano."""

    code = "missing_context"


class RankDeficiencyError(MPDError):
    code = "rank_deficiency"


class NonConvergenceError(MPDError):
    """El solver iterativo agotó ``max_iter``. Conserva la última iteración."""

    code = "non_convergence"

    def __init__(self, message: str, last_iterate: Any = None, iterations: int = 0):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class InsufficientDataError(MPDError):
    code = "insufficient_data"


class SingularHessianError(MPDError):
    code = "singular_hessian"


class InvalidVarianceError(MPDError):
    code = "invalid_variance"


class BudgetInfeasibleError(MPDError):
    code = "budget_infeasible"


class StratumDegeneracyError(MPDError):
    """Uno o más estratos sin unidades de Fase I."""

    code = "stratum_degeneracy"

    def __init__(self, message: str, strata: Iterable[Any] = ()):
        super().__init__(message)
        self.strata = list(strata)


class EmptyTrainingSetError(MPDError):
    code = "empty_training_set"


class PairingError(MPDError):
    code = "pairing"


class SchemaError(MPDError):
    """Error de esquema CSV. ``row`` es 1-based contando la cabecera como fila 1."""

    code = "schema"

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column
