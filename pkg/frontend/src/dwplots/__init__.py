"""Figure renderer for dwmest simulation and estimation outputs."""

from .render import PlotRequest, render, ColumnError, PlotError, SchemaVersionError

__version__ = "0.1.0"
