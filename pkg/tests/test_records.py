from __future__ import annotations

import io
import random
from datetime import date, timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hospnet.records import (COLUMNS, STATES, SchemaError, StayRecord, ValidationReport,
                             canonical_state, format_record, group_by_patient, parse_records,
                             records_from_text, write_records)

from conftest import rec
from oracles import naive_group

HEADER = "\t".join(COLUMNS)


def parse_text(text):
    records, report = parse_records(io.StringIO(text))
    return list(records), report


def test_same_day_stay_with_state_name():
    records, report = parse_text(HEADER + "\np1\tf1\tBavaria\t2013-01-05\t2013-01-05\tI21\tm\t1950\n")
    assert report.accepted == 1
    (r,) = records
    assert r.state == "BY"
    assert r.admission == r.discharge == date(2013, 1, 5)
    assert r.length_of_stay == 1


def test_rejection_buckets():
    rows = [
        "p1\tf1\tBY\t2013-01-05\t2013-01-06\t\tm\t1950",         # missing diagnosis
        "p1\tf1\t\t2013-01-05\t2013-01-06\tI21\tm\t1950",        # missing state
        "p1\tf1\tAtlantis\t2013-01-05\t2013-01-06\tI21\tm\t1950",  # unknown state
        "p1\tf1\tBY\t2013-01-05\t2013-01-04\tI21\tm\t1950",      # inverted
        "p1\tf1\tBY\t2013-02-30\t2013-03-01\tI21\tm\t1950",      # impossible date
        "p1\tf1\tBY\t2013-01-05",                                 # short row
        "p1\tf1\tBY\t2013-01-05\t2013-01-06\tI21\tx\t1950",      # bad sex
        "p1\tf1\tBY\t2013-01-05\t2013-01-06\t21\tm\t1950",       # bad diagnosis
        "p1\tf1\tBY\t2013-01-05\t2013-01-06\tI21\tf\t",          # fine: blank birth year
    ]
    records, report = parse_text(HEADER + "\n" + "\n".join(rows) + "\n")
    assert report.total_rows == 9
    assert report.rejected_missing_diagnosis == 1
    assert report.rejected_missing_state == 2
    assert report.rejected_inverted_interval == 1
    assert report.rejected_malformed == 4
    assert report.accepted == 1
    assert records[0].birth_year is None
    assert report.total_rows == report.accepted + report.rejected


def test_missing_header_column():
    with pytest.raises(SchemaError):
        parse_text("patient_id\tfacility_id\n")


def test_schema_mapping_and_column_order():
    text = "dis\tadm\tpid\tfac\tland\tdiag\tsex\tyob\n2013-01-03\t2013-01-01\tp\tf\tHH\tF20\tu\t1980\n"
    schema = {"patient_id": "pid", "facility_id": "fac", "state": "land", "admission": "adm",
              "discharge": "dis", "diagnosis": "diag", "birth_year": "yob"}
    records, report = parse_records(io.StringIO(text), schema)
    (r,) = list(records)
    assert (r.patient_id, r.state, r.admission, r.discharge) == ("p", "HH", date(2013, 1, 1), date(2013, 1, 3))


def test_bytes_input_and_comment_lines():
    text = "# stamp\n" + HEADER + "\np\tf\tBE\t2014-05-01\t2014-05-02\tO80\tf\t1990\n"
    records, report = parse_records(io.BytesIO(text.encode()))
    assert len(list(records)) == 1
    assert report.accepted == 1


def test_undecodable_line_is_malformed():
    raw = (HEADER + "\n").encode() + b"p\tf\tBE\t\xff\n"
    records, report = parse_records(io.BytesIO(raw))
    assert list(records) == []
    assert report.rejected_malformed == 1


def test_canonical_state():
    assert canonical_state("North Rhine-Westphalia") == "NW"
    assert canonical_state("Nordrhein-Westfalen") == "NW"
    assert canonical_state("hb") == "HB"
    assert canonical_state("Narnia") is None


def test_report_roundtrip():
    report = ValidationReport(10, 7, 1, 1, 0, 1)
    buf = io.StringIO()
    report.write(buf)
    assert buf.getvalue().splitlines()[0] == "counter\tvalue"
    buf.seek(0)
    assert ValidationReport.read(buf) == report


ids = st.text(alphabet="abcdefXYZ0123456789_-", min_size=1, max_size=8)
icd = st.from_regex(r"[A-Z][0-9]{2}(\.[0-9]{1,2})?", fullmatch=True)


@st.composite
def stay_records(draw):
    adm = draw(st.dates(min_value=date(2000, 1, 1), max_value=date(2030, 1, 1)))
    los = draw(st.integers(0, 400))
    return StayRecord(draw(ids), draw(ids), draw(st.sampled_from(STATES)), adm,
                      adm + timedelta(days=los), draw(icd), draw(st.sampled_from("fmu")),
                      draw(st.one_of(st.none(), st.integers(1900, 2020))))


@settings(max_examples=200, deadline=None)
@given(st.lists(stay_records(), max_size=20))
def test_serialize_parse_roundtrip(records):
    buf = io.StringIO()
    write_records(records, buf)
    parsed, report = parse_text(buf.getvalue())
    assert parsed == records
    assert report.total_rows == report.accepted == len(records)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet="ab\tI21-0BY3", max_size=40), max_size=15))
def test_conservation_on_arbitrary_lines(lines):
    text = HEADER + "\n" + "".join(line.replace("\n", "") + "\n" for line in lines)
    _, report = parse_text(text)
    assert report.total_rows == len(lines)
    assert report.total_rows == report.accepted + report.rejected


def test_grouping_interleaved():
    records = [rec("p2", adm="2013-03-01", dis="2013-03-02"), rec("p1"),
               rec("p2", adm="2013-01-01", dis="2013-01-02"), rec("p2", adm="2013-02-01", dis="2013-02-03")]
    groups = list(group_by_patient(records))
    assert [pid for pid, _ in groups] == ["p1", "p2"]
    assert [r.admission.month for r in groups[1][1]] == [1, 2, 3]


def test_grouping_empty_and_duplicates():
    assert list(group_by_patient([])) == []
    r = rec()
    assert list(group_by_patient([r, r])) == [("p1", [r, r])]


def test_tie_break_on_facility():
    a, b = rec(fac="f2"), rec(fac="f1")
    (_, group), = group_by_patient([a, b])
    assert [r.facility_id for r in group] == ["f1", "f2"]


def _random_records(n, seed):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        adm = date(2013, 1, 1) + timedelta(days=rng.randrange(300))
        out.append(StayRecord(f"p{rng.randrange(60)}", f"f{rng.randrange(5)}",
                              rng.choice(STATES), adm, adm + timedelta(days=rng.randrange(5)),
                              rng.choice(["I21", "F20", "O80"]), rng.choice("fmu"),
                              rng.choice([None, 1950, 1970])))
    return out


@pytest.mark.parametrize("memory_mb", [512, 0.001])
def test_grouping_matches_naive_oracle(memory_mb, tmp_path):
    # the tiny budget forces several spilled runs and a k-way merge
    records = _random_records(5000, seed=3)
    got = list(group_by_patient(iter(records), memory_mb=memory_mb, spill_dir=str(tmp_path)))
    assert got == naive_group(records)
    assert list(tmp_path.iterdir()) == []


def test_grouping_spill_dir_unwritable(tmp_path):
    records = _random_records(3000, seed=4)
    with pytest.raises(OSError):
        list(group_by_patient(records, memory_mb=0.001, spill_dir=str(tmp_path / "missing")))


def test_records_from_text():
    records = records_from_text(HEADER + "\np\tf\tSL\t2015-01-01\t2015-01-09\tS72.0\tm\t1940\n")
    assert format_record(records[0]) == "p\tf\tSL\t2015-01-01\t2015-01-09\tS72.0\tm\t1940"
