"""Exception hierarchy shared by every stage of the pipeline."""


class TeladError(Exception):
    """Base class; the CLI serialises these to JSON on stderr."""

    kind = "error"


class DimensionError(TeladError, ValueError):
    kind = "dimension_error"


class ConfigurationError(TeladError, ValueError):
    kind = "configuration_error"


class ContractError(TeladError, RuntimeError):
    kind = "contract_error"


class DataError(TeladError, ValueError):
    kind = "data_error"


class SchemaError(DataError):
    kind = "schema_error"


class EmptyDatasetError(DataError):
    kind = "empty_dataset"


class SpecError(TeladError, ValueError):
    kind = "spec_error"


class FitError(TeladError, RuntimeError):
    kind = "fit_error"


class DegenerateFitWarning(UserWarning):
    pass


class SmallSampleWarning(UserWarning):
    pass
