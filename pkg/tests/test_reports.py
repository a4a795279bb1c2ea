import csv
import xml.etree.ElementTree as ET

import pytest

from rsnet import metrics as M
from rsnet import reports as R

SVG = "{http://www.w3.org/2000/svg}"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_loss_curve_three_points(tmp_path):
    R.emit_loss_curve([(1, 3.0), (2, 2.0), (3, 1.5)], tmp_path)
    rows = read_csv(tmp_path / "loss_curve.csv")
    assert rows[0] == ["iteration", "loss"]
    assert rows[1:] == [["1", "3"], ["2", "2"], ["3", "1.5"]]
    root = ET.parse(tmp_path / "loss_curve.svg").getroot()
    assert root.tag == SVG + "svg"
    assert len(root.findall(f"{SVG}polyline")) == 1


def test_loss_curve_bytes_deterministic(tmp_path):
    hist = [(i, 1.0 / i) for i in range(1, 50)]
    R.emit_loss_curve(hist, tmp_path / "a")
    R.emit_loss_curve(hist, tmp_path / "b")
    for name in ("loss_curve.csv", "loss_curve.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_history_rejected(tmp_path):
    with pytest.raises(ValueError):
        R.emit_loss_curve([], tmp_path)


def test_single_bar(tmp_path):
    R.emit_counts({"plane": 5}, tmp_path, "counts", "objects")
    assert read_csv(tmp_path / "counts.csv") == [["class", "count"], ["plane", "5"]]
    root = ET.parse(tmp_path / "counts.svg").getroot()
    bars = [r for r in root.iter(SVG + "rect") if r.get("fill") != "white"]
    assert len(bars) == 1
    texts = [t.text for t in root.iter(SVG + "text")]
    assert "5" in texts and "plane" in texts


def test_escaped_labels_stay_well_formed(tmp_path):
    R.emit_counts({"<a&b>": 2}, tmp_path, "c", "t & u")
    ET.parse(tmp_path / "c.svg")


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        R.emit_loss_curve([(1, 1.0)], blocker / "sub")


def fixture_report():
    gts = [M.Truth("a", 0, (0, 0, 10, 10)), M.Truth("b", 1, (0, 0, 4, 4))]
    dets = [M.Detection("a", 0, 0.9, (0, 0, 10, 10)), M.Detection("b", 1, 0.3, (20, 20, 30, 30)),
            M.Detection("b", 2, 0.2, (0, 0, 1, 1))]
    return M.build_report(dets, gts, num_images=2)


def test_write_report_files(tmp_path):
    R.write_report(fixture_report(), tmp_path, ["plane", "ship", "car"])
    rows = read_csv(tmp_path / "per_class_ap.csv")
    assert rows[0] == ["class_id", "name", "ap50", "lamr", "gt", "det", "tp"]
    assert rows[1] == ["0", "plane", "1.000000", "0.000001", "1", "1", "1"]
    assert rows[2][:3] == ["1", "ship", "0.000000"]
    assert rows[3] == ["2", "car", "", "", "0", "1", "0"]
    counts = read_csv(tmp_path / "counts_ground_truth.csv")
    assert counts == [["class", "count"], ["plane", "1"], ["ship", "1"], ["car", "0"]]
    assert read_csv(tmp_path / "pr_plane.csv") == [["recall", "precision"], ["1.000000", "1.000000"]]
    for name in ("counts_ground_truth.svg", "counts_detections.svg"):
        ET.parse(tmp_path / name)
    text = (tmp_path / "report.txt").read_text()
    assert text.splitlines()[0] == "mAP=0.5000"


def test_summary_lines_default_names():
    lines = R.summary_lines(fixture_report())
    assert lines[0] == "mAP=0.5000"
    assert lines[1].startswith("class 0 (class0): AP50=1.0000")
    assert "no ground truth" in lines[3]


def test_emit_plots_dispatch(tmp_path):
    R.emit_plots([(1, 2.0)], tmp_path / "loss")
    R.emit_plots(fixture_report(), tmp_path / "rep")
    assert (tmp_path / "loss" / "loss_curve.csv").exists()
    assert (tmp_path / "rep" / "per_class_ap.csv").exists()
