"""(N-1)-secure redispatch under RES forecast uncertainty.

Deterministic and chance-constrained redispatch on DC power-flow models,
with polynomial chaos expansions of the forecast errors, critical-outage
constraint generation and a Monte-Carlo reference pipeline.
"""

from __future__ import annotations

from .errors import RedispatchError

__all__ = ["RedispatchError"]
__version__ = "0.1.0"
