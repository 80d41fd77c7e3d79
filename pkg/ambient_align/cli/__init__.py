"""
Command Line Interface for Ambient Align
"""

from .cli import cli

__all__ = ["cli"]
