# Core package initialization
"""
Quantization, model, loss and search functionality of the evolq toolkit.
"""
