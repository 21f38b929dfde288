"""Figure rendering sanity: files appear, empty inputs are refused."""

import pytest
from PIL import Image

from denet.errors import InputValidationError
from denet.evaluation import CountReport, ImageResult
from denet.plotting import plot_count_report, plot_loss_curve


def test_loss_curve_renders(tmp_path):
    csv = tmp_path / "loss.csv"
    csv.write_text(
        "step,epoch,lr,loss_e,loss_c,loss_total\n"
        "1,0,0.0001,0.5,9.0,1.4\n"
        "2,0,0.0001,0.4,4.0,0.8\n"
        "3,1,0.0001,0.3,1.0,0.4\n"
    )
    png = tmp_path / "loss.png"
    plot_loss_curve(csv, png)
    with Image.open(png) as im:
        assert im.size[0] > 100 and im.size[1] > 100


def test_loss_curve_rejects_empty_csv(tmp_path):
    csv = tmp_path / "loss.csv"
    csv.write_text("step,epoch,lr,loss_e,loss_c,loss_total\n")
    with pytest.raises(InputValidationError):
        plot_loss_curve(csv, tmp_path / "loss.png")


def test_count_report_renders(tmp_path):
    rows = (
        ImageResult("a", 10, 4, 5.5, 9.5),
        ImageResult("b", 3, 1, 2.4, 3.4),
    )
    report = CountReport(mae=0.45, mse=0.205, per_image=rows)
    png = tmp_path / "report.png"
    plot_count_report(report, png)
    assert png.stat().st_size > 0


def test_count_report_rejects_empty(tmp_path):
    with pytest.raises(InputValidationError):
        plot_count_report(CountReport(mae=0, mse=0, per_image=()),
                          tmp_path / "x.png")
