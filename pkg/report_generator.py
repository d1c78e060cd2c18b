import csv
import hashlib
import io
import json
import os
from collections import defaultdict

import numpy as np
from docx import Document
from docx.shared import Pt

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
OUTPUT_DIR = os.getenv("KFP_OUTPUT_DIR") or os.path.join(BASE_DIR, "runs")

try:
    os.makedirs(OUTPUT_DIR, exist_ok=True)
except OSError:
    # read-only deploys
    OUTPUT_DIR = "/tmp"
    os.makedirs(OUTPUT_DIR, exist_ok=True)

CSV_COLUMNS = ("path_id", "eps", "t", "component", "value")
DOCX_MIMETYPE = "application/vnd.openxmlformats-officedocument.wordprocessingml.document"


def run_directory(out_dir=None, name="run"):
    path = out_dir or os.path.join(OUTPUT_DIR, name)
    os.makedirs(path, exist_ok=True)
    return path


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def file_entry(path):
    return {"path": os.path.basename(path), "sha256": sha256_file(path), "bytes": os.path.getsize(path)}


def write_ensemble_csv(path, samples, eps_list, t_points, path_ids=None):
    """Write samples of shape (n_eps, n_t, n_paths, d) in the shared ensemble schema.

    Rows are sorted by (eps, t, path_id, component) and floats use repr, so
    identical arrays give identical bytes. Limit samples use eps = 0.
    """
    samples = np.asarray(samples, dtype=float)
    n_eps, n_t, n_paths, d = samples.shape
    ids = list(range(n_paths)) if path_ids is None else list(path_ids)
    eps_order = np.argsort(eps_list, kind="stable")
    t_order = np.argsort(t_points, kind="stable")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for i in eps_order:
            for j in t_order:
                for p in np.argsort(ids, kind="stable"):
                    for c in range(d):
                        writer.writerow((ids[p], repr(float(eps_list[i])), repr(float(t_points[j])), c,
                                         repr(float(samples[i, j, p, c]))))
    return path


def read_ensemble_csv(path):
    """{eps: {t: array (n_paths, d)}} from an ensemble CSV."""
    cells = defaultdict(lambda: defaultdict(dict))
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["path_id"]), int(row["component"]))
            cells[float(row["eps"])][float(row["t"])][key] = float(row["value"])
    out = {}
    for eps, by_t in cells.items():
        out[eps] = {}
        for t, values in by_t.items():
            n = max(k[0] for k in values) + 1
            d = max(k[1] for k in values) + 1
            arr = np.full((n, d), np.nan)
            for (p, c), v in values.items():
                arr[p, c] = v
            out[eps][t] = arr
    return out


def write_manifest(out_dir, manifest):
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def write_reports_json(path, reports):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
    return path


def write_summary_csv(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("check", "regime", "target", "estimate", "tolerance", "passed", "runtime"))
        for r in reports:
            writer.writerow((r.check, r.regime, json.dumps(r.target, sort_keys=True),
                             json.dumps(r.estimate, sort_keys=True), json.dumps(r.tolerance, sort_keys=True),
                             int(r.passed), f"{r.runtime:.2f}"))
    return path


def _style(paragraph, size=11):
    for run in paragraph.runs:
        run.font.name = 'Calibri'
        run.font.size = Pt(size)


def _fmt(value):
    if isinstance(value, dict) and set(value) == {"value"}:
        value = value["value"]
    if isinstance(value, float):
        return f"{value:.4g}"
    return json.dumps(value, sort_keys=True) if isinstance(value, (dict, list)) else str(value)


def _generate_report_logic(run_info, reports, return_buffer=True, out_dir=None):
    """Build the verification summary document.

    run_info is a dict with command, suite, config_hash, master_seed,
    started_at. Returns (filename, buffer) or (filename, path).
    """
    doc = Document()
    doc.add_heading("Verification report", level=1)
    for label, key in (("Command", "command"), ("Suite", "suite"), ("Config hash", "config_hash"),
                       ("Master seed", "master_seed"), ("Started", "started_at")):
        if run_info.get(key) is not None:
            _style(doc.add_paragraph(f"{label}: {run_info[key]}"))

    passed = sum(1 for r in reports if r.passed)
    summary = doc.add_paragraph(f"{passed} of {len(reports)} checks passed")
    _style(summary, 14)

    table = doc.add_table(rows=1, cols=6)
    table.style = "Table Grid"
    for cell, title in zip(table.rows[0].cells, ("Check", "Regime", "Target", "Estimate", "Tolerance", "Result")):
        cell.text = title
    for r in reports:
        cells = table.add_row().cells
        values = (r.check, r.regime, _fmt(r.target), _fmt(r.estimate), _fmt(r.tolerance),
                  "pass" if r.passed else "FAIL")
        for cell, value in zip(cells, values):
            cell.text = value
            for p in cell.paragraphs:
                _style(p, 9)

    notes = [r for r in reports if r.note]
    if notes:
        doc.add_heading("Notes", level=2)
        for r in notes:
            _style(doc.add_paragraph(f"{r.check}: {r.note}"))

    safe_name = str(run_info.get("suite") or run_info.get("command") or "run").replace(' ', '_').replace('/', '-')
    filename = f"Report_{safe_name}.docx"
    if return_buffer:
        buffer = io.BytesIO()
        doc.save(buffer)
        buffer.seek(0)
        return filename, buffer
    output_path = os.path.join(out_dir or OUTPUT_DIR, "report.docx")
    doc.save(output_path)
    return filename, output_path


def report_buffer(run_info, reports):
    return _generate_report_logic(run_info, reports, return_buffer=True)


def save_report_docx(run_info, reports, out_dir):
    return _generate_report_logic(run_info, reports, return_buffer=False, out_dir=out_dir)[1]
