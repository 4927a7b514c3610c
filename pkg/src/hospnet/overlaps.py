"""Overlapping stay records: grouping, taxonomy, four-digit codes, ICD chapters."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, NamedTuple

from sklearn.base import BaseEstimator, TransformerMixin

from .episodes import ContractError
from .records import PatientStream, StayRecord


class OverlapClass(str, Enum):
    STANDARD_TRANSFER = "standard_transfer"
    FIRST_DAY_TRANSFER = "first_day_transfer"
    LAST_DAY_TRANSFER = "last_day_transfer"
    TEMPORARY_TRANSFER = "temporary_transfer"
    TWO_ENTRIES_SINGLE_INSTITUTION = "two_entries_single_institution"
    SIMULTANEOUS_SINGLE_INSTITUTION = "simultaneous_single_institution"
    SIMULTANEOUS_TWO_INSTITUTIONS = "simultaneous_two_institutions"
    UNKNOWN_TWO_INSTITUTIONS = "unknown_two_institutions"
    UNKNOWN_MULTIPLE_ENTRIES = "unknown_multiple_entries"


# overlaps where the patient moved between institutions on a single shared day
ONE_DAY_TRANSFERS = frozenset({
    OverlapClass.STANDARD_TRANSFER,
    OverlapClass.FIRST_DAY_TRANSFER,
    OverlapClass.LAST_DAY_TRANSFER,
})

EXCLUDED = "excluded"
MAX_FACILITIES = 2


def intersection_days(a: StayRecord, b: StayRecord) -> int:
    """Number of calendar days both stays cover (dates are inclusive)."""
    return (min(a.discharge, b.discharge) - max(a.admission, b.admission)).days + 1


def classify_pair(a: StayRecord, b: StayRecord) -> OverlapClass:
    """Taxonomy class of two intersecting stays, ``a`` first in sort order.

    Rules are tried in order; the first match wins.
    """
    if intersection_days(a, b) < 1:
        raise ContractError("stays do not intersect")
    same_adm = a.admission == b.admission
    same_dis = a.discharge == b.discharge
    if a.facility_id == b.facility_id:
        if same_adm and same_dis:
            return OverlapClass.SIMULTANEOUS_SINGLE_INSTITUTION
        return OverlapClass.TWO_ENTRIES_SINGLE_INSTITUTION
    if same_adm and same_dis:
        return OverlapClass.SIMULTANEOUS_TWO_INSTITUTIONS
    if a.admission < b.admission and b.discharge < a.discharge:
        return OverlapClass.TEMPORARY_TRANSFER
    if intersection_days(a, b) == 1:
        if same_adm:
            return OverlapClass.FIRST_DAY_TRANSFER
        if same_dis:
            return OverlapClass.LAST_DAY_TRANSFER
        if a.discharge == b.admission:
            return OverlapClass.STANDARD_TRANSFER
    return OverlapClass.UNKNOWN_TWO_INSTITUTIONS


class FourDigitCode(NamedTuple):
    same_facility: bool
    same_diagnosis: bool
    same_admission: bool
    same_discharge: bool

    def __str__(self) -> str:
        return "".join("1" if bit else "0" for bit in self)

    @classmethod
    def from_string(cls, code: str) -> "FourDigitCode":
        if len(code) != 4 or set(code) - {"0", "1"}:
            raise ValueError(f"not a four-digit code: {code!r}")
        return cls(*(c == "1" for c in code))


ALL_CODES = tuple(f"{i:04b}" for i in range(16))


def four_digit_code(a: StayRecord, b: StayRecord) -> FourDigitCode:
    return FourDigitCode(
        a.facility_id == b.facility_id,
        a.diagnosis == b.diagnosis,
        a.admission == b.admission,
        a.discharge == b.discharge,
    )


UNKNOWN_CHAPTER = "00"
_LETTER_CHAPTER = {
    "A": "01", "B": "01", "C": "02", "E": "04", "F": "05", "G": "06",
    "I": "09", "J": "10", "K": "11", "L": "12", "M": "13", "N": "14",
    "O": "15", "P": "16", "Q": "17", "R": "18", "S": "19", "T": "19",
    "V": "20", "W": "20", "X": "20", "Y": "20", "Z": "21", "U": "22",
}


def icd_chapter(code: str) -> str:
    """Two-digit chapter group of an ICD-10 code; ``"00"`` when unmappable.

    >>> icd_chapter("I21.0")
    '09'
    >>> icd_chapter("D50")
    '03'
    """
    code = code.strip().upper()
    if len(code) < 3 or not code[1:3].isdigit():
        return UNKNOWN_CHAPTER
    letter, num = code[0], int(code[1:3])
    if letter == "D":
        if num <= 48:
            return "02"
        return "03" if 50 <= num <= 89 else UNKNOWN_CHAPTER
    if letter == "H":
        if num <= 59:
            return "07"
        return "08" if num <= 95 else UNKNOWN_CHAPTER
    return _LETTER_CHAPTER.get(letter, UNKNOWN_CHAPTER)


def chapter_pair(a: StayRecord, b: StayRecord) -> tuple[str, str]:
    """Unordered chapter pair of two records, smaller chapter first."""
    x, y = icd_chapter(a.diagnosis), icd_chapter(b.diagnosis)
    return (x, y) if x <= y else (y, x)


@dataclass
class OverlapGroup:
    patient_id: str
    records: tuple[StayRecord, ...]
    n_facilities: int
    # (i, j, days) for every intersecting pair of records in the group
    intersection_days: tuple[tuple[int, int, int], ...]
    overlap_class: OverlapClass | None
    duration_days: int

    @property
    def excluded(self) -> bool:
        return self.n_facilities > MAX_FACILITIES

    @property
    def code(self) -> FourDigitCode | None:
        if len(self.records) != 2:
            return None
        return four_digit_code(*self.records)

    @property
    def label(self) -> str:
        return EXCLUDED if self.overlap_class is None else self.overlap_class.value

    @property
    def states(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(r.state for r in self.records))


OVERLAP_COLUMNS = ("patient", "class", "code", "facilities", "duration_days", "states")


def format_group(g: OverlapGroup) -> str:
    code = g.code
    facilities = ",".join(dict.fromkeys(r.facility_id for r in g.records))
    return (f"{g.patient_id}\t{g.label}\t{code if code else '-'}\t{facilities}\t"
            f"{g.duration_days}\t{','.join(g.states)}")


def _union_length(intervals: list[tuple[int, int]]) -> int:
    total = 0
    cur_lo = cur_hi = None
    for lo, hi in sorted(intervals):
        if cur_hi is None or lo > cur_hi + 1:
            if cur_hi is not None:
                total += cur_hi - cur_lo + 1
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo + 1
    return total


def make_group(records: list[StayRecord]) -> OverlapGroup:
    """Build and classify a group from an already-connected set of records."""
    pairs = []
    spans = []
    for i in range(len(records)):
        a = records[i]
        for j in range(i + 1, len(records)):
            b = records[j]
            days = intersection_days(a, b)
            if days >= 1:
                pairs.append((i, j, days))
                lo = max(a.admission, b.admission).toordinal()
                spans.append((lo, lo + days - 1))
    n_fac = len({r.facility_id for r in records})
    if n_fac > MAX_FACILITIES:
        klass = None
    elif len(records) == 2:
        klass = classify_pair(records[0], records[1])
    else:
        klass = OverlapClass.UNKNOWN_MULTIPLE_ENTRIES
    return OverlapGroup(records[0].patient_id, tuple(records), n_fac, tuple(pairs),
                        klass, _union_length(spans))


def patient_overlap_groups(records: list[StayRecord]) -> Iterator[OverlapGroup]:
    """Sweep one patient's sorted stays and yield maximal intersecting groups."""
    if len(records) < 2:
        return
    group = [records[0]]
    reach = records[0].discharge
    for r in records[1:]:
        if r.admission <= reach:
            group.append(r)
            if r.discharge > reach:
                reach = r.discharge
            continue
        if len(group) > 1:
            yield make_group(group)
        group = [r]
        reach = r.discharge
    if len(group) > 1:
        yield make_group(group)


def detect_overlap_groups(patients: PatientStream) -> Iterator[OverlapGroup]:
    for _, records in patients:
        yield from patient_overlap_groups(records)


class OverlapDetector(TransformerMixin, BaseEstimator):
    """Find and classify overlapping stays.

    ``transform`` returns the list of :class:`OverlapGroup`; ``fit`` keeps
    the group list and the taxonomy and four-digit tallies.
    """

    def fit(self, X, y=None):
        from .validation import check_patient_stream

        self._tally(list(detect_overlap_groups(check_patient_stream(X))))
        return self

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X).groups_

    def transform(self, X) -> list[OverlapGroup]:
        from .validation import check_patient_stream

        return list(detect_overlap_groups(check_patient_stream(X)))

    def _tally(self, groups):
        self.groups_ = groups
        self.class_counts_ = {c: 0 for c in OverlapClass}
        self.code_counts_ = {c: 0 for c in ALL_CODES}
        self.excluded_by_facilities_ = Counter()
        for g in groups:
            if g.overlap_class is None:
                self.excluded_by_facilities_[g.n_facilities] += 1
                continue
            self.class_counts_[g.overlap_class] += 1
            if len(g.records) == 2:
                self.code_counts_[str(g.code)] += 1
