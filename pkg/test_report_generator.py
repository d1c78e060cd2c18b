import csv
import json
import os
import sys
import tempfile
import unittest

import numpy as np
from docx import Document

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from estimators import RegimeReport
from report_generator import (
    CSV_COLUMNS, file_entry, read_ensemble_csv, report_buffer, save_report_docx, sha256_file, write_ensemble_csv,
    write_manifest, write_reports_json, write_summary_csv,
)


class TestEnsembleCsv(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.samples = np.random.default_rng(0).standard_normal((2, 3, 4, 2))

    def tearDown(self):
        self.tmp.cleanup()

    def test_rows_are_sorted_by_eps_and_time(self):
        path = write_ensemble_csv(os.path.join(self.tmp.name, "e.csv"), self.samples, [0.1, 0.01], [2.0, 1.0, 3.0])
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        self.assertEqual(tuple(rows[0]), CSV_COLUMNS)
        self.assertEqual(len(rows), 1 + 2 * 3 * 4 * 2)
        keys = [(float(r[1]), float(r[2])) for r in rows[1:]]
        self.assertEqual(keys, sorted(keys))

    def test_read_back(self):
        path = write_ensemble_csv(os.path.join(self.tmp.name, "e.csv"), self.samples, [0.1, 0.01], [2.0, 1.0, 3.0])
        data = read_ensemble_csv(path)
        self.assertEqual(sorted(data), [0.01, 0.1])
        np.testing.assert_array_equal(data[0.1][1.0], self.samples[0, 1])
        np.testing.assert_array_equal(data[0.01][3.0], self.samples[1, 2])

    def test_identical_arrays_identical_bytes(self):
        a = write_ensemble_csv(os.path.join(self.tmp.name, "a.csv"), self.samples, [0.1, 0.01], [1.0, 2.0, 3.0])
        b = write_ensemble_csv(os.path.join(self.tmp.name, "b.csv"), self.samples.copy(), [0.1, 0.01],
                               [1.0, 2.0, 3.0])
        self.assertEqual(sha256_file(a), sha256_file(b))
        entry = file_entry(a)
        self.assertEqual(entry["path"], "a.csv")
        self.assertEqual(entry["bytes"], os.path.getsize(a))


class TestReportFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.reports = [
            RegimeReport.compare("diffusive_variance", "Diffusive", 0.3125, 0.31, 0.1, relative=True),
            RegimeReport.compare("stable_index", "Stable", 4.0 / 3.0, 1.7, 0.1, note="heavy bias"),
        ]

    def tearDown(self):
        self.tmp.cleanup()

    def test_json_and_summary(self):
        path = write_reports_json(os.path.join(self.tmp.name, "reports.json"), self.reports)
        with open(path) as fh:
            loaded = json.load(fh)
        self.assertEqual([r["passed"] for r in loaded], [True, False])
        self.assertEqual(RegimeReport(**loaded[1]).note, "heavy bias")
        summary = write_summary_csv(os.path.join(self.tmp.name, "summary.csv"), self.reports)
        with open(summary, newline="") as fh:
            rows = list(csv.DictReader(fh))
        self.assertEqual(rows[0]["passed"], "1")
        self.assertEqual(rows[1]["regime"], "Stable")

    def test_manifest(self):
        path = write_manifest(self.tmp.name, {"command": "verify", "outputs": []})
        self.assertEqual(os.path.basename(path), "manifest.json")

    def test_docx_buffer(self):
        filename, buffer = report_buffer({"command": "verify", "suite": "quick", "config_hash": "abc"}, self.reports)
        self.assertEqual(filename, "Report_quick.docx")
        doc = Document(buffer)
        text = "\n".join(p.text for p in doc.paragraphs)
        self.assertIn("1 of 2 checks passed", text)
        self.assertIn("stable_index: heavy bias", text)
        table = doc.tables[0]
        self.assertEqual(len(table.rows), 3)
        self.assertEqual(table.rows[2].cells[5].text, "FAIL")

    def test_docx_file(self):
        path = save_report_docx({"command": "verify"}, self.reports, self.tmp.name)
        self.assertEqual(path, os.path.join(self.tmp.name, "report.docx"))
        self.assertTrue(os.path.exists(path))


if __name__ == "__main__":
    unittest.main()
