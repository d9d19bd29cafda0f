"""
Core module for shared context and exception types.
"""

from .context import PipelineContext

__all__ = ['PipelineContext']
