import glob
import io
import logging
import math
import os

from reportlab.graphics.charts.lineplots import LinePlot
from reportlab.graphics.shapes import Drawing, String
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from samlab.utils.data_utils import read_metrics

MAX_TABLE_ROWS = 40
MAX_TABLE_COLUMNS = 8
SERIES_COLORS = [("blue", colors.blue), ("red", colors.red), ("green", colors.green), ("orange", colors.orange),
                 ("purple", colors.purple)]

# (file prefix, section title, x column, y columns)
SECTIONS = [
    ("train", "Training metrics", "epoch", ["train_loss", "eval_loss", "eval_metric"]),
    ("attack", "Parameter corruption attack", "epsilon", ["loss_increase", "metric_drop"]),
    ("spectrum", "Fisher spectrum", "rank", ["eigenvalue"]),
    ("strengths", "Gradient strengths", None, []),
    ("shift-trial-summary", "Shift trial fit", None, []),
    ("shift-trial", "Shift trials", "mix", ["delta_norm"]),
    ("interp-curve", "Interpolation curve", "alpha", ["train_loss", "shifted_train_loss", "test_loss"]),
    ("compare-summary", "Comparison (seed means)", None, []),
    ("compare", "Comparison", None, []),
]


def _number(text):
    try:
        value = float(text)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


def _short(text):
    value = _number(text)
    if value is None:
        return str(text)
    return f"{value:.6g}"


def line_chart(rows, x_column, y_columns, width=440, height=180):
    """Line chart of the given columns; non-finite points are skipped."""
    series, names = [], []
    for column in y_columns:
        points = []
        for row in rows:
            x, y = _number(row.get(x_column)), _number(row.get(column))
            if x is not None and y is not None:
                points.append((x, y))
        if len(points) >= 2:
            series.append(sorted(points))
            names.append(column)
    if not series:
        return None

    drawing = Drawing(width, height + 30)
    plot = LinePlot()
    plot.x, plot.y = 40, 30
    plot.width, plot.height = width - 60, height - 20
    plot.data = series
    for i in range(len(series)):
        plot.lines[i].strokeColor = SERIES_COLORS[i % len(SERIES_COLORS)][1]
    drawing.add(plot)
    legend = ", ".join(f"{name} ({SERIES_COLORS[i % len(SERIES_COLORS)][0]})"
                       for i, name in enumerate(names))
    drawing.add(String(40, height + 15, f"x: {x_column}; {legend}", fontSize=8))
    return drawing


def metrics_table(rows):
    if not rows:
        return None
    columns = list(rows[0].keys())[:MAX_TABLE_COLUMNS]
    data = [columns] + [[_short(row.get(c, "")) for c in columns] for row in rows[:MAX_TABLE_ROWS]]
    table = Table(data, repeatRows=1)
    table.setStyle(TableStyle([
        ("BACKGROUND", (0, 0), (-1, 0), colors.lightgrey),
        ("FONTSIZE", (0, 0), (-1, -1), 7),
        ("GRID", (0, 0), (-1, -1), 0.25, colors.grey),
    ]))
    return table


def collect_artifacts(directory, run_id):
    """CSV files of one run, keyed by section prefix."""
    found = {}
    for prefix, _, _, _ in SECTIONS:
        path = os.path.join(directory, f"{prefix}-{run_id}.csv")
        if os.path.exists(path):
            found[prefix] = path
    if not found:
        logging.warning(f"No CSV artifacts for run '{run_id}' in {directory}; "
                        f"present: {sorted(os.path.basename(p) for p in glob.glob(os.path.join(directory, '*.csv')))}")
    return found


def generate_run_report(directory, run_id, title=None):
    """
    Render the CSV artifacts of a run into a PDF: one section per artifact
    with a line chart where the artifact has a natural x axis and a table
    of its first rows. Returns the PDF as bytes.
    """
    logging.info(f"Generating PDF report for run {run_id}")
    artifacts = collect_artifacts(directory, run_id)
    title_text = title or f"Run report: {run_id}"

    buffer = io.BytesIO()
    doc = SimpleDocTemplate(buffer, pagesize=letter, title=title_text)
    styles = getSampleStyleSheet()
    title_style = ParagraphStyle("Title", parent=styles["Heading1"], fontSize=16, alignment=TA_CENTER,
                                 spaceAfter=12)
    header_style = ParagraphStyle("Header", parent=styles["Heading2"], fontSize=12, textColor=colors.blue,
                                  spaceAfter=6)
    normal_style = styles["Normal"]

    elements = [Paragraph(title_text, title_style), Spacer(1, 12)]
    if not artifacts:
        elements.append(Paragraph("No artifacts were found for this run.", normal_style))
    for prefix, section_title, x_column, y_columns in SECTIONS:
        if prefix not in artifacts:
            continue
        rows = read_metrics(artifacts[prefix])
        elements.append(Paragraph(section_title, header_style))
        elements.append(Paragraph(f"{os.path.basename(artifacts[prefix])}: {len(rows)} rows", normal_style))
        elements.append(Spacer(1, 6))
        if x_column:
            chart = line_chart(rows, x_column, y_columns)
            if chart is not None:
                elements.append(chart)
                elements.append(Spacer(1, 6))
        table = metrics_table(rows)
        if table is not None:
            elements.append(table)
        elements.append(Spacer(1, 12))

    doc.build(elements)
    pdf_data = buffer.getvalue()
    buffer.close()
    return pdf_data
