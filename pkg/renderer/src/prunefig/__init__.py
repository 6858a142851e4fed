"""Batch figure renderer for prunelens report bundles."""

from .figures import FigureSpec, RenderError, render, render_all, standard_specs

__version__ = "0.1.0"
