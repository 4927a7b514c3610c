"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import itertools
from datetime import date

import numpy as np

from .records import COLUMNS, StayRecord, canonical_state, sort_key


def _from_frame(df) -> list[StayRecord]:
    missing = [c for c in COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"frame is missing columns: {', '.join(missing)}")
    out = []
    for row in df[list(COLUMNS)].itertuples(index=False, name=None):
        pid, fac, state, adm, dis, diag, sex, by = row
        code = canonical_state(str(state))
        if code is None:
            raise ValueError(f"unknown state {state!r}")
        adm = _as_date(adm)
        dis = _as_date(dis)
        by = None if by is None or (isinstance(by, float) and np.isnan(by)) else int(by)
        out.append(StayRecord(str(pid), str(fac), code, adm, dis, str(diag), str(sex), by))
    return out


def _as_date(value) -> date:
    if isinstance(value, date) and not hasattr(value, "hour"):
        return value
    if hasattr(value, "date"):
        return value.date()
    return date.fromisoformat(str(value))


def check_patient_stream(X) -> list[tuple[str, list[StayRecord]]]:
    """Coerce ``X`` into a validated, in-memory patient stream.

    Accepts a sequence of ``(patient_id, records)`` pairs, a flat sequence
    of :class:`StayRecord`, or a pandas DataFrame with the record columns.
    Flat input is grouped and sorted; grouped input must already be sorted.
    """
    if hasattr(X, "columns") and hasattr(X, "itertuples"):
        X = _from_frame(X)
    items = list(X)
    if not items:
        return []
    if isinstance(items[0], StayRecord):
        items.sort(key=sort_key)
        return [(pid, list(g)) for pid, g in itertools.groupby(items, key=lambda r: r.patient_id)]
    seen = set()
    for pid, records in items:
        if pid in seen:
            raise ValueError(f"patient {pid!r} appears twice")
        seen.add(pid)
        prev = None
        for r in records:
            if r.patient_id != pid:
                raise ValueError(f"record of {r.patient_id!r} filed under {pid!r}")
            if r.discharge < r.admission:
                raise ValueError(f"inverted stay for patient {pid!r}")
            if prev is not None and sort_key(r) < sort_key(prev):
                raise ValueError(f"stays of patient {pid!r} are not sorted")
            prev = r
    return items


def check_stay_table(X):
    from .netmat import StayTable

    if isinstance(X, StayTable):
        return X
    return StayTable.from_patients(check_patient_stream(X))


def check_window(window) -> tuple[date, date]:
    start, end = window
    start, end = _as_date(start), _as_date(end)
    if end < start:
        raise ValueError(f"window ends before it starts: {start} .. {end}")
    return start, end


def check_transfer_matrix(matrix, tol: float = 1e-12) -> list[str]:
    """Return every violated invariant of a derived transfer matrix.

    Walks the raw entries: row sums, entry range, the stay-probability
    diagonal, the block pattern and the single in-edge of each community.
    """
    P = matrix.probabilities.tocoo()
    n = matrix.nodes.n
    dim = P.shape[0]
    problems = []
    if dim != 2 * n:
        problems.append(f"dimension {dim} != 2 * {n}")
    row_sum = np.zeros(dim)
    diag = np.zeros(dim)
    has_departure = np.zeros(dim, dtype=bool)
    community_in = [[] for _ in range(n)]
    for i, j, v in zip(P.row.tolist(), P.col.tolist(), P.data.tolist()):
        if v < 0 or v > 1:
            problems.append(f"entry ({i},{j}) = {v} outside [0,1]")
        row_sum[i] += v
        if i == j:
            diag[i] = v
            continue
        if v == 0:
            continue
        has_departure[i] = True
        if i < n:
            if j >= n and j != n + i:
                problems.append(f"hospital {i} leaves to foreign community {j}")
        else:
            if j >= n:
                problems.append(f"community {i} leaves to community {j}")
        if j >= n:
            community_in[j - n].append(i)
    for i in range(dim):
        if abs(row_sum[i] - 1.0) > tol:
            problems.append(f"row {i} sums to {row_sum[i]!r}")
        expected = 1.0 - 1.0 / matrix.los[i] if has_departure[i] else 1.0
        if abs(diag[i] - expected) > tol:
            problems.append(f"diagonal {i} = {diag[i]!r}, expected {expected!r}")
    for c, sources in enumerate(community_in):
        if sources != [c]:
            problems.append(f"community {n + c} has in-edges from {sources}")
    return problems
