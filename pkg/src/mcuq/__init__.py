"""mcuq: memory-constrained mixed-precision quantization for MCU-class CNNs.

Searches per-tensor 2/4/8-bit policies under ROM/RAM budgets with a
DDPG-style agent, trains them quantization-aware, and executes the packed
result with integer-only arithmetic.
"""

__version__ = "0.1.0"
