from importlib.metadata import version as _v
__all__ = ["__version__"]
try:
    __version__ = _v("artifact")
except Exception:  # pragma: no cover - running from a source tree
    __version__ = "0.1.0"
