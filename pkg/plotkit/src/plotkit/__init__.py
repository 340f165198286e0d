"""Paper-style figures from flatfed's JSON exports and metric CSVs."""

from .figures import FigureJob, render, sidecar_path
from .schema import CSV_COLUMNS, EXPORT_KINDS, SchemaError, load_export, load_metrics_csv

__version__ = "0.1.0"
