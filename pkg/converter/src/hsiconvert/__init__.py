"""One-shot converter from MATLAB-style .mat hyperspectral archives (legacy
and HDF5-backed) to the band-sequential binary cube format."""

from .convert import (
    ConvertError,
    SourceDescriptor,
    VerifyReport,
    convert,
    load_source,
    verify,
)

__version__ = "0.1.0"
