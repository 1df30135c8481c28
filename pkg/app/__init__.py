# App package initialization
"""
Command-line application for the evolq toolkit.
"""
