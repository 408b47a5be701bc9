"""Reference perception adapter: proves the wire protocol end to end.

Implements three ops behind the newline-delimited JSON stdio protocol
(docs/adapter-protocol.md in the gateway repo): an energy-based VAD, a
rule-based text classifier, and an echo LLM.  Standard library only.
"""

from .vad import EnergyVadConfig, energy_vad

__all__ = ["EnergyVadConfig", "energy_vad"]
__version__ = "0.1.0"
