"""Exceptions raised by the calibration toolkit"""


class FairCalibrationError(ValueError):
    """Root of every input or contract error of the toolkit."""


class SpecValidationError(FairCalibrationError):
    pass


class IngestionError(FairCalibrationError):
    pass


class UnknownGroupError(FairCalibrationError):
    pass


class EmptyGroupError(FairCalibrationError):
    pass


class SchemaVersionError(FairCalibrationError):
    pass
