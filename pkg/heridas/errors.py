"""
Errores del pipeline de severidad de heridas.

Cada error pertenece a una de tres familias (configuración, datos, modelo) y
cada familia lleva el código de salida que usa la línea de comandos.
"""

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL = 4


class HeridasError(Exception):
    """Error base del paquete"""
    exit_code = EXIT_UNEXPECTED


class ConfigError(HeridasError):
    exit_code = EXIT_CONFIG


class DataError(HeridasError):
    exit_code = EXIT_DATA


class ModelError(HeridasError):
    exit_code = EXIT_MODEL


# Configuración
class InvalidConfig(ConfigError):
    pass


class InvalidSpec(ConfigError):
    pass


class UnknownBackbone(ConfigError):
    pass


class DuplicateBackbone(ConfigError):
    pass


class LossClassMismatch(ConfigError):
    pass


class ArtifactSpecMismatch(ConfigError):
    pass


# Datos
class MalformedManifest(DataError):
    pass


class InvalidBox(DataError):
    pass


class UnknownLabel(DataError):
    pass


class DuplicateId(DataError):
    pass


class EmptyDataset(DataError):
    pass


class TooFewGroups(DataError):
    pass


class EmptyResult(DataError):
    pass


class BoxOutOfRange(DataError):
    pass


class AlreadyAugmented(DataError):
    pass


class EmptyValidation(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class MissingPreparedData(DataError):
    pass


class NoResults(DataError):
    pass


class NegativeMeasurement(DataError):
    pass


class MalformedPredictions(DataError):
    pass


class ObservationError(DataError):
    """Registro de observación mal formado; ``line`` es 1-based o None"""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"línea {line}: {message}"
        super().__init__(message)


# Modelo y métricas
class WeightsUnavailable(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class ArityMismatch(ShapeMismatch):
    pass


class EmptyMatrix(ModelError):
    pass


class EmptyHistory(ModelError):
    pass
