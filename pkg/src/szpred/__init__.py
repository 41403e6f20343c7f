"""Channel-aware set-attention seizure prediction from EEG band-power features."""

__version__ = "0.1.0"

from .records import EegRecord, SeizureAnnotations  # noqa: F401
