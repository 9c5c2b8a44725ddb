"""Static figures from federated-run metrics CSVs."""

from .errors import DataError, PlotkitError, SchemaError
from .figures import CurveSpec, plot_curves, plot_sweep
from .io import read_compare_csv, read_run_csv

__all__ = ["CurveSpec", "DataError", "PlotkitError", "SchemaError",
           "plot_curves", "plot_sweep", "read_compare_csv", "read_run_csv"]

__version__ = "0.1.0"
