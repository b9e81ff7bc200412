"""Distributed co-simulation over reverse TCP connections.

The orchestrating side never dials out: each simulation unit is a proxy that
listens for its model backend, which connects outward from wherever the model
actually lives.  Lifecycle and data calls then flow over a compact binary
protocol.
"""

from .wire import MessageKind, Status

__version__ = "0.1.0"

__all__ = ["MessageKind", "Status", "__version__"]
