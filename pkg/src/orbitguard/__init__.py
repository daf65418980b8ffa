"""Spacecraft proximity-operations simulator with run-time assurance.

Deterministic Hill-frame dynamics, a constraint catalog enforced by a
minimally-invasive QP filter plus switching backup controllers, scripted
and neural primary policies, mission episodes with byte-stable telemetry,
and a session gateway with an operator wire protocol.
"""

from .backend import USING_NUMBA, backend_name

__version__ = "0.1.0"

__all__ = ["USING_NUMBA", "backend_name", "__version__"]
