"""Descriptive statistics: state summaries, census, histograms, state matrices."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date
from fractions import Fraction
from typing import Hashable, Iterable

import numpy as np

from .episodes import TransferEvent, TransferKind, patient_transfers
from .records import STATE_RANK, STATES, PatientStream


# -- histograms ---------------------------------------------------------------

@dataclass(frozen=True)
class LogDecadeBins:
    """Bins 1-9, 10-99, ..., with the last bin open-ended."""
    n_bins: int = 6

    def index(self, value) -> int:
        if value < 1:
            raise ValueError(f"value {value} below the first bin")
        return min(len(str(int(value))) - 1, self.n_bins - 1)

    def labels(self, n: int | None = None) -> list[str]:
        out = [f"{10 ** k}-{10 ** (k + 1) - 1}" for k in range(self.n_bins - 1)]
        out.append(f">={10 ** (self.n_bins - 1)}")
        return out


@dataclass(frozen=True)
class LinearBins:
    """Fixed-width bins starting at ``start``; as many as the data needs."""
    start: int = 1
    width: int = 1

    def index(self, value) -> int:
        if value < self.start:
            raise ValueError(f"value {value} below the first bin")
        return int((value - self.start) // self.width)

    def labels(self, n: int | None = None) -> list[str]:
        if self.width == 1:
            return [str(self.start + k) for k in range(n or 0)]
        return [f"{self.start + k * self.width}-{self.start + (k + 1) * self.width - 1}"
                for k in range(n or 0)]


LOG_DECADES = LogDecadeBins()
DAYS = LinearBins()


@dataclass
class Histogram:
    spec: LogDecadeBins | LinearBins
    counts: list[int]

    @property
    def labels(self) -> list[str]:
        return self.spec.labels(len(self.counts))

    @property
    def total(self) -> int:
        return sum(self.counts)


def build_histogram(values: Iterable, spec=LOG_DECADES) -> Histogram:
    tally = Counter(spec.index(v) for v in values)
    if isinstance(spec, LogDecadeBins):
        n = spec.n_bins
    else:
        n = max(tally) + 1 if tally else 0
    return Histogram(spec, [tally.get(i, 0) for i in range(n)])


def histogram_from_counts(counts: Counter, spec=DAYS) -> Histogram:
    """Histogram from a ``value -> multiplicity`` tally."""
    tally = Counter()
    for value, n in counts.items():
        tally[spec.index(value)] += n
    if isinstance(spec, LogDecadeBins):
        size = spec.n_bins
    else:
        size = max(tally) + 1 if tally else 0
    return Histogram(spec, [tally.get(i, 0) for i in range(size)])


# -- census ---------------------------------------------------------------------

def window_days(window: tuple[date, date]) -> int:
    start, end = window
    n = (end - start).days + 1
    if n <= 0:
        raise ValueError(f"empty window {start} .. {end}")
    return n


def avg_daily_census(intervals: Iterable[tuple[Hashable, tuple[date, date]]],
                     window: tuple[date, date]) -> dict[Hashable, Fraction]:
    """Average number of patients per day at each node.

    Intervals are half-open ``[first_day, end)``; the window is inclusive on
    both ends. Occupied days outside the window are ignored.
    """
    n_days = window_days(window)
    lo, hi = window[0].toordinal(), window[1].toordinal() + 1
    occupied = defaultdict(int)
    for node, (start, end) in intervals:
        days = min(end.toordinal(), hi) - max(start.toordinal(), lo)
        occupied[node] += max(days, 0)
    return {node: Fraction(days, n_days) for node, days in occupied.items()}


def stay_intervals(records, events=None):
    """Hospital occupancy ``[admission, admission + LOS)`` and society
    occupancy ``[discharge, next admission)`` for one patient's stays.

    Society time is attributed to the community of the discharging hospital.
    Yields ``(kind, facility, state, start_ordinal, end_ordinal)``.
    """
    for r in records:
        a = r.admission.toordinal()
        yield "hospital", r.facility_id, r.state, a, a + max(r.discharge.toordinal() - a, 1)
    for e in (patient_transfers(records) if events is None else events):
        if e.kind is not TransferKind.DIRECT:
            yield ("society", e.from_facility, e.from_state,
                   e.discharge.toordinal(), e.admission.toordinal())


# -- state summaries ----------------------------------------------------------------

@dataclass
class StateSummary:
    state: str
    n_admissions: int = 0
    n_facilities: int = 0
    n_patients_female: int = 0
    n_patients_male: int = 0
    avg_census_facilities: Fraction | None = None
    avg_census_societies: Fraction | None = None
    avg_los_facility: Fraction | None = None
    avg_los_society: Fraction | None = None


@dataclass
class StateAccumulator:
    """Streaming partials for :func:`summarize_states`.

    ``window`` clips occupancy; when it is None the census window is taken
    as the span of the data (first admission to last discharge).
    ``census_scope`` is ``"dataset"`` (one window for every node) or
    ``"facility"`` (each node divided by its own active span).
    """
    window: tuple[date, date] | None = None
    census_scope: str = "dataset"
    admissions: Counter = field(default_factory=Counter)
    facilities: dict = field(default_factory=lambda: defaultdict(set))
    patients: dict = field(default_factory=lambda: defaultdict(Counter))
    los: dict = field(default_factory=lambda: defaultdict(Counter))
    society_gaps: dict = field(default_factory=lambda: defaultdict(Counter))
    hospital_days: Counter = field(default_factory=Counter)
    society_days: Counter = field(default_factory=Counter)
    facility_state: dict = field(default_factory=dict)
    facility_span: dict = field(default_factory=dict)
    first_day: int | None = None
    last_day: int | None = None

    def add(self, records, events=None) -> None:
        """Fold in one patient; ``events`` may pass precomputed transfers."""
        if events is None:
            events = list(patient_transfers(records))
        sex_seen = set()
        for r in records:
            self.admissions[r.state] += 1
            self.facilities[r.state].add(r.facility_id)
            self.facility_state[r.facility_id] = r.state
            self.los[r.state][r.length_of_stay] += 1
            if (r.state, r.sex) not in sex_seen:
                sex_seen.add((r.state, r.sex))
                self.patients[r.state][r.sex] += 1
            a, d = r.admission.toordinal(), r.discharge.toordinal()
            if self.first_day is None or a < self.first_day:
                self.first_day = a
            if self.last_day is None or d > self.last_day:
                self.last_day = d
            span = self.facility_span.get(r.facility_id)
            if span is None:
                self.facility_span[r.facility_id] = (a, d)
            elif a < span[0] or d > span[1]:
                self.facility_span[r.facility_id] = (min(a, span[0]), max(d, span[1]))
        for kind, fac, state, start, end in stay_intervals(records, events):
            days = self._clip(start, end)
            if kind == "hospital":
                self.hospital_days[fac] += days
            else:
                self.society_days[fac] += days
        for e in events:
            if e.kind is not TransferKind.DIRECT and not e.interstate:
                self.society_gaps[e.from_state][e.gap_days] += 1

    def _clip(self, start: int, end: int) -> int:
        if self.window is None:
            return end - start
        lo, hi = self.window[0].toordinal(), self.window[1].toordinal() + 1
        return max(min(end, hi) - max(start, lo), 0)

    def census_window(self) -> tuple[date, date] | None:
        if self.window is not None:
            return self.window
        if self.first_day is None:
            return None
        return date.fromordinal(self.first_day), date.fromordinal(self.last_day)

    def _census(self, occupied: Counter) -> dict[str, Fraction]:
        per_state = defaultdict(Fraction)
        window = self.census_window()
        if window is None:
            return per_state
        n_days = window_days(window)
        for fac, days in occupied.items():
            if self.census_scope == "facility":
                lo, hi = self.facility_span[fac]
                if self.window is not None:
                    lo = max(lo, window[0].toordinal())
                    hi = min(hi, window[1].toordinal())
                denom = max(hi - lo + 1, 1)
            else:
                denom = n_days
            per_state[self.facility_state[fac]] += Fraction(days, denom)
        return per_state

    def result(self) -> list[StateSummary]:
        hospital = self._census(self.hospital_days)
        society = self._census(self.society_days)
        out = []
        for s in STATES:
            los = self.los.get(s, Counter())
            gaps = self.society_gaps.get(s, Counter())
            has_data = self.admissions[s] > 0
            out.append(StateSummary(
                state=s,
                n_admissions=self.admissions[s],
                n_facilities=len(self.facilities.get(s, ())),
                n_patients_female=self.patients.get(s, Counter())["f"],
                n_patients_male=self.patients.get(s, Counter())["m"],
                avg_census_facilities=hospital.get(s, Fraction(0)) if has_data else None,
                avg_census_societies=society.get(s, Fraction(0)) if has_data else None,
                avg_los_facility=_mean(los),
                avg_los_society=_mean(gaps),
            ))
        return out


def _mean(counts: Counter) -> Fraction | None:
    n = sum(counts.values())
    if n == 0:
        return None
    return Fraction(sum(k * v for k, v in counts.items()), n)


def summarize_states(patients: PatientStream, window=None, census_scope="dataset") -> list[StateSummary]:
    acc = StateAccumulator(window=window, census_scope=census_scope)
    for _, records in patients:
        acc.add(records)
    return acc.result()


# -- state x state matrices ---------------------------------------------------------

MATRIX_KINDS = ("shared_patients", "direct_transfers", "indirect_transfers",
                "overlap_origin_destination")


@dataclass
class StateMatrix:
    kind: str
    counts: np.ndarray

    def __getitem__(self, key):
        i, j = key
        return int(self.counts[STATE_RANK[i], STATE_RANK[j]])


def build_state_matrix(items: Iterable, kind: str) -> StateMatrix:
    """16x16 count matrix in population order.

    ``items`` are per-patient state sets for ``shared_patients``,
    :class:`TransferEvent` for the transfer kinds, and
    :class:`OverlapGroup` for ``overlap_origin_destination``.
    """
    if kind not in MATRIX_KINDS:
        raise ValueError(f"unknown matrix kind {kind!r}")
    m = np.zeros((len(STATES), len(STATES)), dtype=np.int64)
    rank = STATE_RANK
    if kind == "shared_patients":
        for states in items:
            idx = sorted(rank[s] for s in set(states))
            for x in range(len(idx)):
                for y in range(x + 1, len(idx)):
                    m[idx[x], idx[y]] += 1
                    m[idx[y], idx[x]] += 1
    elif kind == "overlap_origin_destination":
        for g in items:
            if len(g.records) != 2 or g.overlap_class is None:
                continue
            a, b = g.records
            if a.state != b.state:
                m[rank[a.state], rank[b.state]] += 1
    else:
        wanted = ({TransferKind.DIRECT} if kind == "direct_transfers"
                  else {TransferKind.INDIRECT_AUTO, TransferKind.INDIRECT_OTHER})
        for e in items:
            if e.kind in wanted:
                m[rank[e.from_state], rank[e.to_state]] += 1
    return StateMatrix(kind, m)


def round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)) // 1)


def interstate_percentages(transfers: Iterable[TransferEvent]) -> dict[str, int | None]:
    """Share of transfers leaving each state, in whole percent (None if no transfers)."""
    total, leaving = Counter(), Counter()
    for e in transfers:
        total[e.from_state] += 1
        if e.to_state != e.from_state:
            leaving[e.from_state] += 1
    return {s: (round_half_up(Fraction(100 * leaving[s], total[s])) if total[s] else None)
            for s in STATES}


def percentages_from_matrix(counts: np.ndarray) -> dict[str, int | None]:
    out = {}
    for s in STATES:
        i = STATE_RANK[s]
        row = int(counts[i].sum())
        leaving = row - int(counts[i, i])
        out[s] = round_half_up(Fraction(100 * leaving, row)) if row else None
    return out
