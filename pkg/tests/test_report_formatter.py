import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import pytest

from formatters.report_formatter import (
    CSV_HEADER,
    file_stem,
    group_by_tag,
    load_records,
    parse_records,
    render_csv,
    render_svg,
    write_report,
)
from models import CurvePoint, ResultRecord
from services.errors import ScenarioError


def make_curve(n: int = 4) -> list[CurvePoint]:
    return [CurvePoint(t=10.0**k, estimate=1.0 / (k + 1), lo=0.5 / (k + 1), hi=1.5 / (k + 1)) for k in range(n)]


def make_record(tag: str = "zinf", curve: bool = False, **kwargs) -> ResultRecord:
    data = {"experiment": "perp-moment", "law": "uniform:q=1", "seed": 1, "n": 100, "tag": tag}
    if curve:
        data["curve"] = make_curve()
    else:
        data.update(estimate=2.0, ci=(1.5, 2.5))
    data.update(kwargs)
    return ResultRecord(**data)


# --- parse_records ---


class TestParseRecords:
    def test_skips_blank_lines(self):
        lines = [make_record().to_json(), "", make_record(tag="zinf:tail", curve=True).to_json()]
        records = parse_records(lines)
        assert [r.tag for r in records] == ["zinf", "zinf:tail"]
        assert len(records[1].curve) == 4

    def test_malformed_line(self):
        with pytest.raises(ScenarioError, match="line 2"):
            parse_records([make_record().to_json(), "{not json"])

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError):
            load_records(str(tmp_path / "missing.jsonl"))

    def test_load_file(self, tmp_path):
        path = tmp_path / "out.jsonl"
        path.write_text(make_record().to_json() + "\n")
        assert load_records(str(path))[0].estimate == 2.0


# --- file_stem ---


class TestFileStem:
    def test_sanitizes(self):
        assert file_stem("zinf:tail") == "zinf_tail"
        assert file_stem("W*:tail") == "W_tail"
        assert file_stem("er5001") == "er5001"

    def test_empty_falls_back(self):
        assert file_stem("::") == "results"


# --- render_csv ---


class TestRenderCsv:
    def test_scalar_record(self):
        lines = render_csv([make_record()]).splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert lines[1] == ",2.0,1.5,2.5"

    def test_curve_record(self):
        lines = render_csv([make_record(curve=True)]).splitlines()
        assert len(lines) == 5
        assert lines[1] == "1.0,1.0,0.5,1.5"

    def test_record_without_estimate(self):
        record = ResultRecord(experiment="ui-check", law="binary", seed=1, n=10, tag="ui")
        assert render_csv([record]) == ",".join(CSV_HEADER) + "\n"

    def test_grouping_falls_back_to_experiment(self):
        record = ResultRecord(experiment="ui-check", law="binary", seed=1, n=10)
        assert list(group_by_tag([record])) == ["ui-check"]


# --- render_svg ---


class TestRenderSvg:
    def test_deterministic(self):
        assert render_svg(make_curve(), "tail") == render_svg(make_curve(), "tail")

    def test_contains_curve_and_band(self):
        svg = render_svg(make_curve(), "W* <tail>")
        assert svg.startswith("<svg")
        assert 'class="curve"' in svg
        assert 'class="band"' in svg
        assert "W* &lt;tail&gt;" in svg
        assert "(log)" in svg

    def test_empty_curve_draws_axes_only(self):
        svg = render_svg([])
        assert 'class="axes"' in svg
        assert 'class="curve"' not in svg


# --- write_report ---


class TestWriteReport:
    def test_one_csv_per_tag_and_one_plot_per_curve(self, tmp_path):
        records = [make_record(), make_record(), make_record(tag="zinf:tail", curve=True)]
        written = write_report(records, str(tmp_path))
        names = sorted(os.path.basename(p) for p in written)
        assert names == ["zinf.csv", "zinf_tail.csv", "zinf_tail.svg"]
        assert len((tmp_path / "zinf.csv").read_text().splitlines()) == 3

    def test_several_curves_get_suffixes(self, tmp_path):
        records = [make_record(tag="W*:tail", curve=True), make_record(tag="W*:tail", curve=True)]
        written = write_report(records, str(tmp_path), formats=("svg",))
        assert sorted(os.path.basename(p) for p in written) == ["W_tail-0.svg", "W_tail-1.svg"]

    def test_png(self, tmp_path):
        written = write_report([make_record(tag="zinf:tail", curve=True)], str(tmp_path), formats=("png",))
        with open(written[0], "rb") as f:
            assert f.read(8) == b"\x89PNG\r\n\x1a\n"

    def test_empty_input_writes_header(self, tmp_path):
        written = write_report([], str(tmp_path))
        assert [os.path.basename(p) for p in written] == ["results.csv"]
        assert (tmp_path / "results.csv").read_text() == ",".join(CSV_HEADER) + "\n"

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ScenarioError):
            write_report([make_record()], str(tmp_path), formats=("pdf",))
