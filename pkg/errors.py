"""
Error types shared by the endonoise modules.

Every error derives from EndoNoiseError plus a built-in category so callers
can catch either the specific class or ValueError / OSError.
"""

from typing import Optional


class EndoNoiseError(Exception):
    """Base class for all endonoise errors"""


class ArgumentError(EndoNoiseError, ValueError):
    """A precondition on an argument was violated (shape, range, contract)"""


class FrameFormatError(EndoNoiseError, ValueError):
    """PGM container missing, truncated or with an unsupported header"""


class MetadataError(EndoNoiseError, ValueError):
    """Sidecar JSON missing a required field or holding an invalid value"""


class SampleRangeError(EndoNoiseError, ValueError):
    """A sample does not fit the declared bit depth"""


class RankDeficiencyError(EndoNoiseError, ValueError):
    """Fewer than two distinct regressor values were supplied to a line fit"""


class CalibrationQualityError(EndoNoiseError, ValueError):
    """A calibration fit produced physically implausible parameters"""


class PbnEstimationError(EndoNoiseError, ValueError):
    """No row retained enough flat pixels to estimate the banding amplitude"""

    def __init__(self, message: str, set_index: Optional[int] = None):
        if set_index is not None:
            message = f"set {set_index}: {message}"
        super().__init__(message)
        self.set_index = set_index


class ExternalDenoiserTimeout(EndoNoiseError, TimeoutError):
    """The external denoiser did not produce its output in time"""
