"""Train-free MoE expert-pool consolidation toolkit (python bindings)."""

from ._conmoe import *  # noqa: F401,F403
from ._conmoe import __version__  # noqa: F401
