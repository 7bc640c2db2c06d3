"""Two-stage Schrodinger bridge generative sampling."""

__version__ = "0.1.0"
