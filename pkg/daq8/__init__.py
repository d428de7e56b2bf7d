"""
daq8 - Distribution Adaptive INT8 quantized-training engine.

Simulates INT8 training of small CNNs: symmetric 8-bit quantization of weights,
activations and gradients, per-channel gradient scales chosen by a
magnitude-aware clipping rule, and an FP32 twin for comparison.
"""

__version__ = "1.0.0"
