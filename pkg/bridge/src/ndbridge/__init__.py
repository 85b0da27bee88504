"""Framed TCP bridge exposing diffusion noise predictors."""

from .adapters import EchoAdapter, make_adapter
from .framing import FramingError, decode, encode
from .server import serve

__version__ = "0.1.0"
