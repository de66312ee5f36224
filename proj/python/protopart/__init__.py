"""Case-based image classifier built on prototypical parts.

The heavy lifting lives in the compiled ``_protopart`` extension: model
construction, the three-stage training loop, prototype projection, case-based
explanations, pruning, ensembling, and the projection stability check.
"""

try:
    # Installed layout: the extension sits inside this package.
    from ._protopart import *  # noqa: F401,F403
    from . import _protopart as _core
except ImportError:
    # Development layout: the extension is on sys.path next to the build tree.
    from _protopart import *  # noqa: F401,F403
    import _protopart as _core

__all__ = [name for name in dir(_core) if not name.startswith("_")]
__version__ = "1.0.0"
