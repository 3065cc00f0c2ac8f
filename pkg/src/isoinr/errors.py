"""Exception types. Every error carries a short machine-readable ``code``."""


class IsoInrError(Exception):
    code = "E_RUNTIME"


class NiftiError(IsoInrError, ValueError):
    code = "E_NIFTI"


class GeometryError(IsoInrError, ValueError):
    code = "E_GEOMETRY"


class ModelFormatError(IsoInrError, ValueError):
    code = "E_MODEL_FORMAT"


class TrainingError(IsoInrError, RuntimeError):
    code = "E_TRAINING"


class StatsError(IsoInrError, ValueError):
    code = "E_STATS"


class ThicknessError(IsoInrError, ValueError):
    code = "E_THICKNESS"
