"""Trace serialization and manifest determinism tests."""

import json

import numpy as np
import pytest

from parobs.errors import RejectedInputError
from parobs.trace import (
    OSCILLATION_COLUMNS,
    TRACE_COLUMNS,
    RunTrace,
    fmt,
    read_manifest,
    read_table,
    write_manifest,
    write_table,
)


def _sample_trace() -> RunTrace:
    tr = RunTrace()
    tr.append(0.1, -0.2, 0.5, 0.4, 1.2, 1.0)
    tr.append(0.2, None, None, None, 0.0, 0.5)
    return tr


def test_trace_append_and_columns():
    tr = _sample_trace()
    assert len(tr) == 2
    np.testing.assert_array_equal(tr.column("t"), [0.1, 0.2])
    assert np.isnan(tr.column("p")[1])
    np.testing.assert_array_equal(tr.column("lambda")[:1], [0.4])


def test_trace_csv_round_trip(tmp_path):
    tr = _sample_trace()
    path = tmp_path / "trace.csv"
    tr.to_csv(path)
    text = path.read_text()
    assert text.startswith("# parobs-trace-v1\n" + ",".join(TRACE_COLUMNS))
    back = RunTrace.from_csv(path)
    np.testing.assert_array_equal(back.column("t"), tr.column("t"))
    np.testing.assert_array_equal(back.column("mass"), tr.column("mass"))
    assert np.isnan(back.column("s")[1])


def test_trace_csv_rerun_byte_identical(tmp_path):
    tr = _sample_trace()
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    tr.to_csv(a)
    tr.to_csv(b)
    assert a.read_bytes() == b.read_bytes()


def test_fmt_shortest_round_trip():
    for x in (0.1, 1 / 3, 1e-300, 123456.789, 2.0):
        assert float(fmt(x)) == x
    assert fmt(0.1) == "0.1"


def test_write_table_and_read_table(tmp_path):
    path = tmp_path / "osc.csv"
    rows = [(1, 1e-3, 0.3, 1e-5, 0.01, 0.10, 0.05)]
    write_table(path, OSCILLATION_COLUMNS, rows, "parobs-oscillation-v1")
    data = read_table(path, OSCILLATION_COLUMNS)
    assert set(data) == set(OSCILLATION_COLUMNS)
    assert data["measure_tn"][0] == 0.3


def test_read_table_rejects_malformed(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# v1\na,b\n1.0\n")
    with pytest.raises(RejectedInputError):
        read_table(path, ("a", "b"))


def test_manifest_round_trip_and_sorted_outputs(tmp_path):
    path = tmp_path / "manifest.json"
    write_manifest(path, "demo", {"n": 3, "flag": True}, ["z.csv", "a.csv"])
    data = read_manifest(path)
    assert data["format"] == "parobs-manifest-v1"
    assert data["experiment"] == "demo"
    assert data["outputs"] == ["a.csv", "z.csv"]
    assert data["config"] == {"n": 3, "flag": True}


def test_manifest_has_no_timestamps_and_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_manifest(a, "demo", {"x": 1.5}, ["out.csv"])
    write_manifest(b, "demo", {"x": 1.5}, ["out.csv"])
    assert a.read_bytes() == b.read_bytes()
    keys = json.loads(a.read_text()).keys()
    assert set(keys) == {"experiment", "format", "config", "outputs"}
