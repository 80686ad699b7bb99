"""Exception hierarchy; each class maps onto a CLI exit code."""


class SegrankError(Exception):
    exit_code = 4


class ConfigError(SegrankError):
    exit_code = 2


class DataError(SegrankError):
    exit_code = 3


class GeometryError(DataError):
    pass


class VolumeFormatError(DataError):
    pass


class CompletenessError(DataError):
    pass


class SingularDesignError(DataError):
    pass


class StaleIntermediateError(DataError):
    pass
