"""Figure renderer for metakernels sweep and diagnostic output files."""

from .figures import (
    FigureSpec,
    SchemaError,
    read_inverse_gap,
    read_spectra,
    read_sweep_summary,
    render_diagnostics,
    render_sweeps,
)

__version__ = "0.1.0"
