"""Exception types shared across the pipeline."""


class EthnipipeError(Exception):
    """Base class for pipeline failures."""


class ConfigError(EthnipipeError):
    """Bad or inconsistent configuration (CLI exit code 2)."""


class MissingInputError(EthnipipeError):
    """A required file, record, or cache entry is absent (CLI exit code 3)."""


class DetectorLoadError(EthnipipeError):
    """The face detector model could not be loaded (distinct from 'no face found')."""


class FormatError(EthnipipeError):
    """A serialized artifact (manifest, split, archive, report) is malformed."""
