import xml.etree.ElementTree as ET

import numpy as np
import pytest

from kwslab.evaluate import compute_det
from kwslab.svg import det_plot, line_plot, tradeoff_plot

NS = "{http://www.w3.org/2000/svg}"


def parse(svg):
    return ET.fromstring(svg)


class TestLinePlot:
    def test_well_formed(self):
        root = parse(line_plot([("a", [0, 1, 2], [1, 3, 2])], "t", "x", "y"))
        assert root.tag == f"{NS}svg"
        assert len(root.findall(f".//{NS}polyline")) == 1

    def test_one_polyline_per_series(self):
        series = [("a", [1, 2], [1, 2]), ("b", [1, 2], [2, 1]), ("c", [1, 3], [5, 5])]
        root = parse(line_plot(series, "t", "x", "y", markers=True))
        assert len(root.findall(f".//{NS}polyline")) == 3
        assert len(root.findall(f".//{NS}circle")) == 6

    def test_labels_are_escaped(self):
        svg = line_plot([("a<b", [1, 2], [1, 2])], "x & y", "x", "y")
        root = parse(svg)
        texts = [t.text for t in root.iter(f"{NS}text")]
        assert "x & y" in texts and "a<b" in texts

    def test_points_inside_canvas(self):
        root = parse(line_plot([("a", [1, 10, 100], [0.01, 0.1, 1])], "t", "x", "y", logx=True, logy=True))
        pts = root.find(f".//{NS}polyline").get("points").split()
        coords = np.array([[float(v) for v in p.split(",")] for p in pts])
        w, h = float(root.get("width")), float(root.get("height"))
        assert np.all((coords >= 0) & (coords <= [w, h]))

    def test_empty(self):
        with pytest.raises(ValueError):
            line_plot([], "t", "x", "y")


class TestDomainPlots:
    def test_det_plot_handles_zero_counts(self):
        curve = compute_det([0.9, 0.8, 0.2], [0.1, 0.5])
        root = parse(det_plot({"model": curve}))
        assert len(root.findall(f".//{NS}polyline")) == 1

    def test_tradeoff_plot(self):
        rows = [
            {"latency_reduction_ms": 0.0, "relative_fa": 1.0},
            {"latency_reduction_ms": 60.0, "relative_fa": 1.4},
        ]
        root = parse(tradeoff_plot(rows))
        assert len(root.findall(f".//{NS}circle")) == 2
