import re

import pytest

from prefopt.errors import ContractError, ParseError
from prefopt.plot import trace_svg, write_svg
from prefopt.trainer import TraceRow, TrainingTrace, read_trace

HEADER = "step,total_loss,sft_loss,pref_loss,probe_pos_alp,probe_neg_alp\n"


def _points(svg, cls):
    match = re.search(rf'class="{cls}"[^>]*points="([^"]*)"', svg)
    return match.group(1).split()


def test_two_rows_two_points_per_curve():
    trace = TrainingTrace.from_csv(HEADER + "0,2.0,2.0,0.0,-4.1,-4.2\n10,1.5,1.2,0.3,-3.0,-5.0\n")
    svg = trace_svg(trace)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert len(_points(svg, "probe_pos_alp")) == 2
    assert len(_points(svg, "probe_neg_alp")) == 2


def test_higher_value_is_drawn_higher():
    trace = TrainingTrace([TraceRow(0, 1, 1, 0, -1.0, -5.0), TraceRow(5, 1, 1, 0, -1.0, -5.0)])
    svg = trace_svg(trace)
    pos_y = float(_points(svg, "probe_pos_alp")[0].split(",")[1])
    neg_y = float(_points(svg, "probe_neg_alp")[0].split(",")[1])
    assert pos_y < neg_y


def test_identical_input_identical_bytes(tmp_path):
    trace = TrainingTrace([TraceRow(s, 1.0, 1.0, 0.0, -1.0 - s / 7, -2.0 + s / 9) for s in range(0, 50, 5)])
    write_svg(trace, tmp_path / "a.svg")
    write_svg(read_trace_copy(trace, tmp_path), tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def read_trace_copy(trace, tmp_path):
    path = tmp_path / "t.csv"
    path.write_text(trace.to_csv())
    return read_trace(path)


def test_single_row_still_renders():
    svg = trace_svg(TrainingTrace([TraceRow(0, 1.0, 1.0, 0.0, -2.0, -2.0)]))
    assert len(_points(svg, "probe_pos_alp")) == 1


def test_empty_trace_rejected():
    with pytest.raises(ContractError):
        trace_svg(TrainingTrace())


def test_malformed_trace_names_line():
    with pytest.raises(ParseError, match="line 3"):
        TrainingTrace.from_csv(HEADER + "0,1,1,0,-1,-2\n5,1,1,0,oops,-2\n")
