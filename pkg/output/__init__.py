from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .report import MetricReport, MetricEntry, write_report_csv
from .plots import emit_plot, render_heatmap_png
from .layout import RunLayout
