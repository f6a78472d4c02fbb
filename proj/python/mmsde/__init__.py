"""Python interface to the multiscale multivalued SDE engine."""

try:
    from ._mmsde import *  # noqa: F401,F403  (installed package layout)
except ImportError:  # build-tree layout: the module sits next to the package
    from _mmsde import *  # noqa: F401,F403
