import csv
import json

import numpy as np
import pytest

from oasis.errors import NoDataError
from oasis.io import write_results
from oasis.plotting import box_figure, emit_plots, plt
from oasis.sim import TrialResult, summarize


def fake_results(deltas=(0.5,), densities=((10, 1),), n=30, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for delta in deltas:
        for d_ba, d_er in densities:
            for method, shift in (("oasis", 0.0), ("cb", 0.2)):
                for k in range(n):
                    est = rng.normal(shift, 0.1)
                    out.append(TrialResult(k, method, est, 0.0, est - 0.2, est + 0.2,
                                           delta, d_ba, d_er))
    return out


def test_empty_results_rejected(tmp_path):
    with pytest.raises(NoDataError):
        emit_plots([], tmp_path)


def test_single_cell_two_boxes(tmp_path):
    results = fake_results()
    files = emit_plots(results, tmp_path)
    assert [f.rsplit("/", 1)[1] for f in files] == ["errors.svg", "coverage.svg", "plot_stats.json"]
    fig, axes = box_figure(summarize(results))
    assert axes.shape == (1, 1)
    labels = [t.get_text() for t in axes[0][0].get_xticklabels()]
    assert labels == ["OASIS", "CB"]
    plt.close(fig)
    svg = (tmp_path / "errors.svg").read_text()
    assert svg.startswith("<?xml") and "<svg" in svg


def test_nine_cell_grid():
    rows = summarize(fake_results(deltas=(0.25, 0.5, 1.0),
                                  densities=((10, 1), (24, 3), (16, 8)), n=10))
    fig, axes = box_figure(rows)
    assert axes.shape == (3, 3)
    assert axes[0][0].get_title() == "delta=0.25, d=10+1"
    # columns run from sparse to dense by total mean degree
    assert axes[2][1].get_title() == "delta=1, d=16+8"
    assert axes[2][2].get_title() == "delta=1, d=24+3"
    plt.close(fig)


def test_drawn_quartiles_match_csv(tmp_path):
    results = fake_results(n=41, seed=3)
    write_results(results, tmp_path / "results.csv")
    emit_plots(results, tmp_path)
    # recompute the quartiles independently from the CSV
    errs = {}
    with open(tmp_path / "results.csv") as fh:
        for row in csv.DictReader(fh):
            errs.setdefault(row["method"], []).append(float(row["error"]))
    stats = {r["method"]: r for r in json.loads((tmp_path / "plot_stats.json").read_text())}
    fig, axes = box_figure(summarize(results))
    ax = axes[0][0]
    # each drawn box outline spans q1..q3 and each median line sits at the median
    boxes = [ln for ln in ax.lines if len(ln.get_ydata()) == 5]
    medians = [ln for ln in ax.lines if len(ln.get_ydata()) == 2
               and ln.get_xdata()[0] != ln.get_xdata()[1]]
    for k, method in enumerate(("oasis", "cb")):
        e = np.asarray(errs[method])
        q1, med, q3 = np.percentile(e, [25, 50, 75])
        assert stats[method]["q1"] == q1 and stats[method]["median"] == med
        assert stats[method]["q3"] == q3
        y = boxes[k].get_ydata()
        assert min(y) == q1 and max(y) == q3
        assert any(np.all(m.get_ydata() == med) for m in medians)
    plt.close(fig)


def test_svg_deterministic(tmp_path):
    results = fake_results()
    emit_plots(results, tmp_path / "a")
    emit_plots(results, tmp_path / "b")
    for name in ("errors.svg", "coverage.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
