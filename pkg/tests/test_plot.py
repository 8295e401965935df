import xml.etree.ElementTree as ET

import numpy as np
import pytest

from grain_graph.errors import ValidationError
from grain_graph.plot import loss_svg, plot, scatter_svg
from grain_graph.train_eval import EvalReport

NS = {"s": "http://www.w3.org/2000/svg"}


def _report(t, p, extra=None):
    rows = [{"id": f"s{i}", "y_true": float(a), "y_pred": float(b), "fold": i} for i, (a, b) in enumerate(zip(t, p))]
    return EvalReport.from_rows(rows, {"protocol": "loocv"}, 0, "test", extra=extra)


def _find(root, tag, cls):
    return [e for e in root.iter() if e.tag.endswith(tag) and e.get("class") == cls]


def test_perfect_predictions_lie_on_identity():
    y = np.linspace(100, 200, 7)
    root = ET.fromstring(scatter_svg(_report(y, y)))
    (line,) = _find(root, "line", "identity")
    x1, y1, x2, y2 = (float(line.get(k)) for k in ("x1", "y1", "x2", "y2"))
    points = _find(root, "circle", "point")
    assert len(points) == 7
    for c in points:
        cx, cy = float(c.get("cx")), float(c.get("cy"))
        cross = (x2 - x1) * (cy - y1) - (y2 - y1) * (cx - x1)
        assert abs(cross) / np.hypot(x2 - x1, y2 - y1) < 0.01
    assert "1.000" in _find(root, "text", "r2")[0].text


def test_single_sample_report():
    report = EvalReport([{"id": "only", "y_true": 3.0, "y_pred": 2.0, "fold": 0}], {}, {}, 0)
    root = ET.fromstring(scatter_svg(report))
    assert len(_find(root, "circle", "point")) == 1
    assert _find(root, "text", "r2") == []


def test_random_reports_are_well_formed():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        t, p = rng.normal(0, 10 ** rng.uniform(-3, 3), n), rng.normal(size=n)
        if np.ptp(t) == 0:
            continue
        traces = {str(i): list(rng.uniform(0, 5, int(rng.integers(1, 20)))) for i in range(3)}
        report = _report(t, p, {"loss_traces": traces})
        ET.fromstring(plot(report, "scatter"))
        root = ET.fromstring(plot(report, "loss"))
        assert len(_find(root, "polyline", "loss")) == 3


def test_loss_svg_inputs():
    assert len(_find(ET.fromstring(loss_svg([3.0, 2.0, 1.0])), "polyline", "loss")) == 1
    assert len(_find(ET.fromstring(loss_svg([[3.0, 2.0], [1.0]])), "polyline", "loss")) == 2


def test_empty_inputs_raise():
    with pytest.raises(ValidationError):
        loss_svg([])
    with pytest.raises(ValidationError):
        scatter_svg(EvalReport([], {}, {}, 0))
    with pytest.raises(ValidationError):
        plot(_report([1.0, 2.0], [1.0, 2.0]), "loss")
    with pytest.raises(ValidationError):
        plot(_report([1.0, 2.0], [1.0, 2.0]), "bar")
