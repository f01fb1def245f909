"""Icosahedral q-space resampling and learned estimators for diffusion MRI."""

__version__ = "0.1.0"

from .geometry import IcosaScheme, SchemeLevel, build_scheme  # noqa: E402
from .volume import DataError, Volume4D  # noqa: E402

__all__ = ["DataError", "IcosaScheme", "SchemeLevel", "Volume4D", "__version__", "build_scheme"]
