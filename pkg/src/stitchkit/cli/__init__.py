"""CLI components for stitchkit."""

from .commands import cli, exit_code_for

__all__ = ["cli", "exit_code_for"]
