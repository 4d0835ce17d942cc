"""Tropical-cyclone landfall location and time forecasting with a CNN + LSTM."""

from tclandfall.errors import (
    DataFormatError,
    LandfallError,
    NotFoundError,
    NumericalError,
    ShapeError,
    UsageError,
)
from tclandfall.geo import GeoPoint, LatLonChannels, build_latlon_channels, haversine_km

__version__ = "0.1.0"

__all__ = [
    "DataFormatError",
    "GeoPoint",
    "LandfallError",
    "LatLonChannels",
    "NotFoundError",
    "NumericalError",
    "ShapeError",
    "UsageError",
    "build_latlon_channels",
    "haversine_km",
]
