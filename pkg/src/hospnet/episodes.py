"""Per-patient timelines and classification of consecutive stays."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from datetime import date
from enum import Enum
from fractions import Fraction
from typing import Iterator, NamedTuple

from sklearn.base import BaseEstimator, TransformerMixin

from .records import STATES, PatientStream, StayRecord


class TransferKind(str, Enum):
    DIRECT = "direct"
    INDIRECT_AUTO = "indirect_auto"
    INDIRECT_OTHER = "indirect_other"


# returned by classify_gap when the two stays intersect
OVERLAPPING = "overlapping"


class ContractError(ValueError):
    """An operation was called with inputs violating its preconditions."""


class TransferEvent(NamedTuple):
    patient_id: str
    from_facility: str
    to_facility: str
    from_state: str
    to_state: str
    discharge: date
    admission: date
    gap_days: int
    kind: TransferKind

    @property
    def interstate(self) -> bool:
        return self.from_state != self.to_state


TRANSFER_COLUMNS = ("patient", "from", "to", "from_state", "to_state",
                    "discharge", "admission", "gap", "kind")


def format_event(e: TransferEvent) -> str:
    return (f"{e.patient_id}\t{e.from_facility}\t{e.to_facility}\t{e.from_state}\t"
            f"{e.to_state}\t{e.discharge.isoformat()}\t{e.admission.isoformat()}\t"
            f"{e.gap_days}\t{e.kind.value}")


def classify_gap(prev: StayRecord, next: StayRecord):
    """Classify the step from ``prev`` to the following stay ``next``.

    Returns :data:`OVERLAPPING` when the stays intersect, otherwise a
    :class:`TransferKind`. A one-day gap (discharge on day d, admission on
    d + 1) leaves no full day at home and counts as direct.
    """
    if prev.patient_id != next.patient_id:
        raise ContractError(f"stays of different patients: {prev.patient_id!r}, {next.patient_id!r}")
    if next.admission < prev.admission:
        raise ContractError("stays are not in chronological order")
    gap = (next.admission - prev.discharge).days
    if gap <= 0:
        return OVERLAPPING
    if gap == 1:
        return TransferKind.DIRECT
    if prev.facility_id == next.facility_id:
        return TransferKind.INDIRECT_AUTO
    return TransferKind.INDIRECT_OTHER


def patient_transfers(records: list[StayRecord]) -> Iterator[TransferEvent]:
    """Transfer events between consecutive non-overlapping stays of one patient."""
    for prev, nxt in zip(records, records[1:]):
        gap = (nxt.admission - prev.discharge).days
        if gap <= 0:
            continue
        if gap == 1:
            kind = TransferKind.DIRECT
        elif prev.facility_id == nxt.facility_id:
            kind = TransferKind.INDIRECT_AUTO
        else:
            kind = TransferKind.INDIRECT_OTHER
        yield TransferEvent(prev.patient_id, prev.facility_id, nxt.facility_id,
                            prev.state, nxt.state, prev.discharge, nxt.admission, gap, kind)


def detect_transfers(patients: PatientStream) -> Iterator[TransferEvent]:
    for _, records in patients:
        yield from patient_transfers(records)


@dataclass
class EpisodeTimeline:
    patient_id: str
    stays: list[tuple[str, date, date]]
    transfers: list[TransferEvent]


def build_timeline(patient_id: str, records: list[StayRecord]) -> EpisodeTimeline:
    """Merge intersecting stays at the same facility and list the transfers.

    Stays at different facilities are kept apart even if they intersect;
    resolving those is left to the overlap classification.
    """
    stays: list[list] = []
    last_at: dict[str, int] = {}
    for r in records:
        i = last_at.get(r.facility_id)
        if i is not None and r.admission <= stays[i][2]:
            stays[i][2] = max(stays[i][2], r.discharge)
            continue
        last_at[r.facility_id] = len(stays)
        stays.append([r.facility_id, r.admission, r.discharge])
    return EpisodeTimeline(patient_id, [tuple(s) for s in stays],
                           list(patient_transfers(records)))


def _median(counts: Counter) -> Fraction | None:
    n = sum(counts.values())
    if n == 0:
        return None
    lo_rank, hi_rank = (n - 1) // 2, n // 2
    lo = hi = None
    seen = 0
    for value in sorted(counts):
        seen += counts[value]
        if lo is None and seen > lo_rank:
            lo = value
        if seen > hi_rank:
            hi = value
            break
    return Fraction(lo + hi, 2)


@dataclass
class HospitalizationStats:
    """Stays per patient within one state (a patient counts in every state they visited)."""
    state: str
    patients_female: int
    patients_male: int
    patients_unknown: int
    min_stays: int | None
    max_stays: int | None
    mean_stays: Fraction | None
    median_stays: Fraction | None
    mean_female: Fraction | None
    mean_male: Fraction | None
    median_female: Fraction | None
    median_male: Fraction | None


class HospitalizationCounter:
    """Streaming accumulator behind :func:`count_hospitalization_stats`."""

    def __init__(self):
        self.by_state = {s: {"f": Counter(), "m": Counter(), "u": Counter()} for s in STATES}

    def add(self, records: list[StayRecord]) -> None:
        sex = records[0].sex
        per_state = Counter(r.state for r in records)
        for state, n in per_state.items():
            self.by_state[state][sex][n] += 1

    def result(self) -> dict[str, HospitalizationStats]:
        out = {}
        for state in STATES:
            by_sex = self.by_state[state]
            total = by_sex["f"] + by_sex["m"] + by_sex["u"]
            out[state] = HospitalizationStats(
                state=state,
                patients_female=sum(by_sex["f"].values()),
                patients_male=sum(by_sex["m"].values()),
                patients_unknown=sum(by_sex["u"].values()),
                min_stays=min(total) if total else None,
                max_stays=max(total) if total else None,
                mean_stays=_mean(total),
                median_stays=_median(total),
                mean_female=_mean(by_sex["f"]),
                mean_male=_mean(by_sex["m"]),
                median_female=_median(by_sex["f"]),
                median_male=_median(by_sex["m"]),
            )
        return out


def _mean(counts: Counter) -> Fraction | None:
    n = sum(counts.values())
    if n == 0:
        return None
    return Fraction(sum(k * v for k, v in counts.items()), n)


def count_hospitalization_stats(patients: PatientStream) -> dict[str, HospitalizationStats]:
    acc = HospitalizationCounter()
    for _, records in patients:
        acc.add(records)
    return acc.result()


class TransferDetector(TransformerMixin, BaseEstimator):
    """Classify consecutive stays of each patient into transfer events.

    ``fit`` tallies the outcome of every consecutive pair; ``transform``
    returns the :class:`TransferEvent` list for the given patients.

    Attributes
    ----------
    n_pairs_ : int
    n_overlapping_pairs_ : int
    kind_counts_ : dict[TransferKind, int]
    """

    def fit(self, X, y=None):
        from .validation import check_patient_stream

        patients = check_patient_stream(X)
        kinds = Counter()
        n_pairs = 0
        for _, records in patients:
            n_pairs += max(len(records) - 1, 0)
            kinds.update(e.kind for e in patient_transfers(records))
        self.n_pairs_ = n_pairs
        self.kind_counts_ = {k: kinds[k] for k in TransferKind}
        self.n_overlapping_pairs_ = n_pairs - sum(kinds.values())
        return self

    def transform(self, X) -> list[TransferEvent]:
        from .validation import check_patient_stream

        return list(detect_transfers(check_patient_stream(X)))

