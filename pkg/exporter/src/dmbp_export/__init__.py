"""Export torch models and training fixtures for the attribution toolkit."""

from .errors import ExportError, FixtureError
from .export import ExportManifest, export_model
from .fixtures import ResidualBlock, make_fixtures
from .writer import encode_tensors, write_weight_file

__all__ = [
    "ExportError",
    "ExportManifest",
    "FixtureError",
    "ResidualBlock",
    "encode_tensors",
    "export_model",
    "make_fixtures",
    "write_weight_file",
]
