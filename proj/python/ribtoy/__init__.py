"""Toy localization pipeline: synthetic two-class data, a small conv
classifier, per-image margin-loss adaptation, and seed metrics.

The heavy lifting lives in the compiled ``_ribtoy`` module; this package
re-exports its surface. When built in-tree (plain CMake), the compiled
module sits on ``PYTHONPATH`` as a top-level module; an installed wheel
places it inside the package instead. Both layouts are accepted here.
"""

try:
    from ._ribtoy import *  # noqa: F401,F403  (wheel layout)
    from . import _ribtoy as _impl
except ImportError:
    from _ribtoy import *  # noqa: F401,F403  (in-tree build layout)
    import _ribtoy as _impl

__version__ = "0.1.0"
__all__ = [name for name in dir(_impl) if not name.startswith("_")]
