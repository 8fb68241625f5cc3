"""Error types for the export pipeline."""


class ExportError(RuntimeError):
    """A source model cannot be represented in the target format."""


class FixtureError(RuntimeError):
    """Fixture training failed to reach its quality bar."""
