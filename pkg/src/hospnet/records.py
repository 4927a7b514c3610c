"""Stay records: parsing, validation and per-patient grouping."""
from __future__ import annotations

import heapq
import io
import itertools
import os
import pickle
import re
import shutil
import sys
import tempfile
from dataclasses import dataclass, fields
from datetime import date
from typing import IO, Iterable, Iterator, NamedTuple

# German states in order of population; every table uses this order.
STATES = (
    "NW", "BY", "BW", "NI", "HE", "RP", "SN", "BE",
    "SH", "BB", "ST", "TH", "HH", "MV", "SL", "HB",
)
STATE_NAMES = {
    "NW": "North Rhine-Westphalia",
    "BY": "Bavaria",
    "BW": "Baden-Württemberg",
    "NI": "Lower Saxony",
    "HE": "Hesse",
    "RP": "Rhineland-Palatinate",
    "SN": "Saxony",
    "BE": "Berlin",
    "SH": "Schleswig-Holstein",
    "BB": "Brandenburg",
    "ST": "Saxony-Anhalt",
    "TH": "Thuringia",
    "HH": "Hamburg",
    "MV": "Mecklenburg-West Pomerania",
    "SL": "Saarland",
    "HB": "Bremen",
}
STATE_RANK = {code: i for i, code in enumerate(STATES)}

_GERMAN_NAMES = {
    "Nordrhein-Westfalen": "NW", "Bayern": "BY", "Niedersachsen": "NI",
    "Hessen": "HE", "Rheinland-Pfalz": "RP", "Sachsen": "SN",
    "Sachsen-Anhalt": "ST", "Thüringen": "TH", "Mecklenburg-Vorpommern": "MV",
}
_STATE_LOOKUP: dict[str, str] = {}
for _code, _name in STATE_NAMES.items():
    _STATE_LOOKUP[_code] = _code
    _STATE_LOOKUP[_code.lower()] = _code
    _STATE_LOOKUP[_name] = _code
    _STATE_LOOKUP[_name.lower()] = _code
for _name, _code in _GERMAN_NAMES.items():
    _STATE_LOOKUP[_name] = _code
    _STATE_LOOKUP[_name.lower()] = _code
_STATE_LOOKUP["Baden-Wuerttemberg"] = "BW"
_STATE_LOOKUP["Thuringen"] = "TH"

SEXES = ("f", "m", "u")
COLUMNS = (
    "patient_id", "facility_id", "state", "admission", "discharge",
    "diagnosis", "sex", "birth_year",
)

_DATE_RE = re.compile(r"\d{4}-\d{2}-\d{2}\Z")
_ICD_RE = re.compile(r"[A-Z][0-9]{2}[0-9A-Z.!+*-]*\Z")
_YEAR_RE = re.compile(r"\d{4}\Z")


def canonical_state(value: str) -> str | None:
    """Map a state code or name to its two-letter code, or None if unknown."""
    return _STATE_LOOKUP.get(value.strip()) or _STATE_LOOKUP.get(value.strip().lower())


class StayRecord(NamedTuple):
    patient_id: str
    facility_id: str
    state: str
    admission: date
    discharge: date
    diagnosis: str
    sex: str
    birth_year: int | None

    @property
    def length_of_stay(self) -> int:
        # same-day stays count as one day
        return max((self.discharge - self.admission).days, 1)


def sort_key(r):
    """Total order used within a patient (and across patients for grouping)."""
    return (r[0], r[3], r[4], r[1], r[2], r[5], r[6], -1 if r[7] is None else r[7])


@dataclass
class ValidationReport:
    total_rows: int = 0
    accepted: int = 0
    rejected_missing_diagnosis: int = 0
    rejected_missing_state: int = 0
    rejected_malformed: int = 0
    rejected_inverted_interval: int = 0

    @property
    def rejected(self) -> int:
        return (self.rejected_missing_diagnosis + self.rejected_missing_state
                + self.rejected_malformed + self.rejected_inverted_interval)

    def rows(self) -> list[tuple[str, int]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def write(self, fh: IO[str]) -> None:
        fh.write("counter\tvalue\n")
        for name, value in self.rows():
            fh.write(f"{name}\t{value}\n")

    @classmethod
    def read(cls, fh: IO[str]) -> "ValidationReport":
        values = {}
        for line in fh:
            if line.startswith("#") or line.startswith("counter\t"):
                continue
            name, value = line.rstrip("\n").split("\t")
            values[name] = int(value)
        return cls(**values)


class SchemaError(ValueError):
    """The header row does not name the required columns."""


def _lines(stream) -> Iterator[str]:
    if isinstance(stream, (str, os.PathLike)):
        with open(stream, "rb") as fh:
            yield from _lines(fh)
        return
    for raw in stream:
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError:
                # keep the row countable; it fails the column check below
                raw = "\x00"
        yield raw.rstrip("\r\n")


def parse_records(stream, schema: dict[str, str] | None = None):
    """Parse a tab-separated stay file.

    ``stream`` is a path, a binary or text file object, or any iterable of
    lines. ``schema`` maps canonical column names to the header names used
    in the file. Returns ``(records, report)``: ``records`` is a lazy
    iterator of accepted :class:`StayRecord` and ``report`` fills in as the
    iterator is consumed.
    """
    report = ValidationReport()
    return _parse(_lines(stream), schema or {}, report), report


def _parse(lines: Iterator[str], schema: dict[str, str], report: ValidationReport):
    header = None
    for line in lines:
        if line.startswith("#"):
            continue
        header = line.split("\t")
        break
    if header is None:
        return
    try:
        idx = [header.index(schema.get(c, c)) for c in COLUMNS]
    except ValueError:
        missing = [c for c in COLUMNS if schema.get(c, c) not in header]
        raise SchemaError(f"missing columns: {', '.join(missing)}") from None
    ncols = len(header)
    i_pid, i_fac, i_state, i_adm, i_dis, i_diag, i_sex, i_by = idx
    intern = sys.intern
    lookup = _STATE_LOOKUP
    fromiso = date.fromisoformat
    date_ok = _DATE_RE.match
    icd_ok = _ICD_RE.match
    year_ok = _YEAR_RE.match

    for line in lines:
        report.total_rows += 1
        f = line.split("\t")
        if len(f) != ncols:
            report.rejected_malformed += 1
            continue
        diagnosis = f[i_diag].strip()
        if not diagnosis:
            report.rejected_missing_diagnosis += 1
            continue
        raw_state = f[i_state].strip()
        state = lookup.get(raw_state) or lookup.get(raw_state.lower())
        if state is None:
            report.rejected_missing_state += 1
            continue
        pid = f[i_pid].strip()
        fac = f[i_fac].strip()
        adm_s = f[i_adm].strip()
        dis_s = f[i_dis].strip()
        sex = f[i_sex].strip().lower()
        by_s = f[i_by].strip()
        if (not pid or not fac or sex not in SEXES or not icd_ok(diagnosis)
                or not date_ok(adm_s) or not date_ok(dis_s)
                or (by_s and not year_ok(by_s))):
            report.rejected_malformed += 1
            continue
        try:
            adm = fromiso(adm_s)
            dis = fromiso(dis_s)
        except ValueError:
            report.rejected_malformed += 1
            continue
        if dis < adm:
            report.rejected_inverted_interval += 1
            continue
        report.accepted += 1
        yield StayRecord(intern(pid), intern(fac), state, adm, dis,
                         intern(diagnosis), sex, int(by_s) if by_s else None)


def format_record(r: StayRecord) -> str:
    by = "" if r.birth_year is None else str(r.birth_year)
    return (f"{r.patient_id}\t{r.facility_id}\t{r.state}\t{r.admission.isoformat()}\t"
            f"{r.discharge.isoformat()}\t{r.diagnosis}\t{r.sex}\t{by}")


def write_records(records: Iterable[StayRecord], fh: IO[str]) -> int:
    fh.write("\t".join(COLUMNS) + "\n")
    n = 0
    for r in records:
        fh.write(format_record(r) + "\n")
        n += 1
    return n


PatientStream = Iterator[tuple[str, list[StayRecord]]]

# rough in-memory footprint of one record plus its share of the sort list
RECORD_BYTES = 400
_SPILL_BATCH = 20_000


def group_by_patient(records: Iterable[StayRecord], memory_mb: float = 512,
                     spill_dir: str | None = None) -> PatientStream:
    """Group records by patient, each patient's stays in :func:`sort_key` order.

    Patients come out in lexicographic ``patient_id`` order. When the input
    exceeds ``memory_mb`` it is sorted in runs that are spilled to
    ``spill_dir`` and merged back, so peak memory stays near the budget plus
    the largest single patient.
    """
    chunk_limit = max(1000, int(memory_mb * 1024 * 1024 * 0.5 / RECORD_BYTES))
    it = iter(records)
    chunk = list(itertools.islice(it, chunk_limit))
    if len(chunk) < chunk_limit:
        chunk.sort(key=sort_key)
        yield from _group_sorted(chunk)
        return

    workdir = tempfile.mkdtemp(prefix="hospnet-sort-", dir=spill_dir)
    try:
        runs = []
        while chunk:
            chunk.sort(key=sort_key)
            runs.append(_spill(chunk, workdir, len(runs)))
            chunk = list(itertools.islice(it, chunk_limit))
        chunk = None
        merged = heapq.merge(*(_read_run(path) for path in runs), key=sort_key)
        yield from _group_sorted(merged)
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


def _group_sorted(records: Iterable[StayRecord]) -> PatientStream:
    for pid, group in itertools.groupby(records, key=lambda r: r[0]):
        yield pid, list(group)


def _spill(chunk: list, workdir: str, index: int) -> str:
    path = os.path.join(workdir, f"run{index:05d}.pkl")
    with open(path, "wb") as fh:
        for start in range(0, len(chunk), _SPILL_BATCH):
            pickle.dump([tuple(r) for r in chunk[start:start + _SPILL_BATCH]], fh,
                        protocol=pickle.HIGHEST_PROTOCOL)
    return path


def _read_run(path: str) -> Iterator[StayRecord]:
    make = StayRecord._make
    with open(path, "rb") as fh:
        while True:
            try:
                batch = pickle.load(fh)
            except EOFError:
                return
            for t in batch:
                yield make(t)


def read_records(path, schema=None) -> tuple[list[StayRecord], ValidationReport]:
    """Parse a whole file into memory."""
    records, report = parse_records(path, schema)
    return list(records), report


def records_from_text(text: str) -> list[StayRecord]:
    records, _ = parse_records(io.StringIO(text))
    return list(records)
