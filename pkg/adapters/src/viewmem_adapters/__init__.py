"""Model adapters for the viewmem engine.

Bridges real (or stub) vision models to the engine's public surfaces:
EMB1 embedding files, the /segment mask protocol, and the /rerank verdict
protocol. The engine itself is never imported; only its documented file
formats and wire protocols are produced.
"""

__version__ = "0.1.0"
