"""Desk-scale self-supervised pretraining for radiology-style volumes."""
from .errors import (ChecksumError, FormatError, GeometryError, HeaderError, RadSSLError,
                     TrainingDiverged, TruncatedPayloadError, ValidationError)
from .kernels import BACKEND

__version__ = "0.1.0"
