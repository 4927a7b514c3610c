"""Hospital/community network: node selection, transfer probability matrix, graph metrics."""
from __future__ import annotations

import logging
from array import array
from dataclasses import dataclass, field
from datetime import date
from typing import IO, Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, shortest_path
from sklearn.base import BaseEstimator

from .records import STATE_RANK, STATES, PatientStream, StayRecord

log = logging.getLogger(__name__)

ZERO_COMMUNITY = "zero_community"
INACTIVE_GAP = "inactive_gap"

# offset separating patients (or facilities) when running a cumulative max
_BLOCK = np.int64(1 << 24)


class StayTable:
    """Columnar copy of a grouped cohort: one row per stay, patients contiguous.

    Dates are proleptic ordinals. Facilities are integer handles into
    ``facility_ids``.
    """

    def __init__(self, patient, facility, admission, discharge, facility_ids, facility_state):
        self.patient = np.asarray(patient, dtype=np.int64)
        self.facility = np.asarray(facility, dtype=np.int64)
        self.admission = np.asarray(admission, dtype=np.int64)
        self.discharge = np.asarray(discharge, dtype=np.int64)
        self.facility_ids = list(facility_ids)
        self.facility_state = np.asarray(facility_state, dtype=np.int64)

    def __len__(self):
        return len(self.patient)

    @property
    def n_facilities(self) -> int:
        return len(self.facility_ids)

    @classmethod
    def from_patients(cls, patients: PatientStream) -> "StayTable":
        builder = StayTableBuilder()
        for _, records in patients:
            builder.add(records)
        return builder.build()

    def span(self) -> tuple[date, date] | None:
        if len(self) == 0:
            return None
        return date.fromordinal(int(self.admission.min())), date.fromordinal(int(self.discharge.max()))


class StayTableBuilder:
    def __init__(self):
        self._patient = array("q")
        self._facility = array("q")
        self._adm = array("q")
        self._dis = array("q")
        self._handles: dict[str, int] = {}
        self._ids: list[str] = []
        self._states: list[int] = []
        self._n_patients = 0

    def add(self, records: list[StayRecord]) -> None:
        p = self._n_patients
        self._n_patients += 1
        handles = self._handles
        for r in records:
            h = handles.get(r.facility_id)
            if h is None:
                h = handles[r.facility_id] = len(self._ids)
                self._ids.append(r.facility_id)
                self._states.append(STATE_RANK[r.state])
            self._patient.append(p)
            self._facility.append(h)
            self._adm.append(r.admission.toordinal())
            self._dis.append(r.discharge.toordinal())

    def build(self) -> StayTable:
        return StayTable(np.frombuffer(self._patient, dtype=np.int64),
                         np.frombuffer(self._facility, dtype=np.int64),
                         np.frombuffer(self._adm, dtype=np.int64),
                         np.frombuffer(self._dis, dtype=np.int64),
                         self._ids, self._states)


@dataclass
class Transitions:
    """Movements observed on a (filtered) stay table, as facility handles."""
    direct_src: np.ndarray
    direct_dst: np.ndarray
    indirect_src: np.ndarray
    indirect_dst: np.ndarray
    indirect_gap: np.ndarray
    final_src: np.ndarray
    stay_facility: np.ndarray
    stay_los: np.ndarray
    n_dropped_interstate: int = 0

    @property
    def n_events(self) -> int:
        return len(self.direct_src) + len(self.indirect_src)


def _running_max(groups: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Cumulative max of ``values`` restarting at each new value of ``groups`` (sorted)."""
    if len(values) == 0:
        return values.copy()
    base = values.min()
    key = groups * _BLOCK + (values - base)
    return np.maximum.accumulate(key) - groups * _BLOCK + base


def one_day_overlap_pairs(patient, facility, admission, discharge) -> np.ndarray:
    """Mask over consecutive pairs (i, i+1): two-record overlap groups whose
    records share exactly one day at different facilities (standard, first
    day and last day transfers)."""
    n = len(patient)
    if n < 2:
        return np.zeros(max(n - 1, 0), dtype=bool)
    reach = _running_max(patient, discharge)
    starts = np.ones(n, dtype=bool)
    starts[1:] = (patient[1:] != patient[:-1]) | (admission[1:] > reach[:-1])
    gid = np.cumsum(starts) - 1
    size = np.bincount(gid)[gid]
    first_of_two = starts[:-1] & (size[:-1] == 2)
    a0, a1 = admission[:-1], admission[1:]
    d0, d1 = discharge[:-1], discharge[1:]
    one_day = np.minimum(d0, d1) - a1 + 1 == 1
    simultaneous = (a0 == a1) & (d0 == d1)
    contained = (a0 < a1) & (d1 < d0)
    return (first_of_two & (facility[:-1] != facility[1:]) & one_day
            & ~simultaneous & ~contained)


def transitions(table: StayTable, keep: np.ndarray | None = None,
                one_day_overlaps_as_direct: bool = True,
                state: int | None = None) -> Transitions:
    """Consecutive-stay movements among the rows selected by ``keep``.

    With ``state`` given, only movements with both ends in that state are
    returned (and only that state's stays and final discharges); movements
    with exactly one end in the state are counted in ``n_dropped_interstate``.
    """
    if keep is None:
        keep = np.ones(len(table), dtype=bool)
    p = table.patient[keep]
    f = table.facility[keep]
    a = table.admission[keep]
    d = table.discharge[keep]
    same = p[1:] == p[:-1]
    gap = a[1:] - d[:-1]
    direct = same & (gap == 1)
    indirect = same & (gap >= 2)
    if one_day_overlaps_as_direct:
        direct |= one_day_overlap_pairs(p, f, a, d)
    last = np.ones(len(p), dtype=bool)
    last[:-1] = ~same
    src, dst = f[:-1], f[1:]
    stay_mask = np.ones(len(p), dtype=bool)
    dropped = 0
    if state is not None:
        st = table.facility_state
        from_in, to_in = st[src] == state, st[dst] == state
        in_state = from_in & to_in
        dropped = int(np.count_nonzero((direct | indirect) & (from_in != to_in)))
        direct &= in_state
        indirect &= in_state
        stay_mask = st[f] == state
        last &= stay_mask
    return Transitions(
        direct_src=src[direct], direct_dst=dst[direct],
        indirect_src=src[indirect], indirect_dst=dst[indirect],
        indirect_gap=gap[indirect],
        final_src=f[last],
        stay_facility=f[stay_mask],
        stay_los=np.maximum(d - a, 1)[stay_mask],
        n_dropped_interstate=dropped,
    )


def inactive_facilities(table: StayTable, window: tuple[date, date],
                        threshold: int = 90, mode: str = "occupancy") -> np.ndarray:
    """Facilities with a run of more than ``threshold`` days inside ``window``
    without any occupied bed (``mode="occupancy"``) or without any admission
    (``mode="admissions"``). Facilities with no stays in the window count as
    inactive for the whole window."""
    if mode not in ("occupancy", "admissions"):
        raise ValueError(f"unknown inactivity mode {mode!r}")
    lo, hi = window[0].toordinal(), window[1].toordinal() + 1
    nfac = table.n_facilities
    start = table.admission
    if mode == "occupancy":
        end = np.maximum(table.discharge, start + 1)
    else:
        end = start + 1
    start = np.maximum(start, lo)
    end = np.minimum(end, hi)
    ok = end > start
    fac, start, end = table.facility[ok], start[ok], end[ok]
    order = np.lexsort((start, fac))
    fac, start, end = fac[order], start[order], end[order]

    longest = np.full(nfac, hi - lo, dtype=np.int64)
    if len(fac):
        reach = _running_max(fac, end)
        first = np.ones(len(fac), dtype=bool)
        first[1:] = fac[1:] != fac[:-1]
        lastrow = np.ones(len(fac), dtype=bool)
        lastrow[:-1] = fac[1:] != fac[:-1]
        prev_reach = np.empty_like(reach)
        prev_reach[0] = lo
        prev_reach[1:] = reach[:-1]
        gaps = np.where(first, start - lo, start - prev_reach)
        longest_seen = np.zeros(nfac, dtype=np.int64)
        np.maximum.at(longest_seen, fac, gaps)
        trailing = np.zeros(nfac, dtype=np.int64)
        trailing[fac[lastrow]] = hi - reach[lastrow]
        present = np.zeros(nfac, dtype=bool)
        present[fac] = True
        longest[present] = np.maximum(longest_seen, trailing)[present]
    return longest > threshold


@dataclass
class NodeSet:
    """Hospital nodes 0..n-1 and their community nodes n..2n-1."""
    hospitals: list[str]
    states: list[str]
    excluded: list[tuple[str, str]] = field(default_factory=list)
    handles: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.hospitals)

    @property
    def communities(self) -> list[str]:
        return [f"community:{h}" for h in self.hospitals]

    def index(self, facility_id: str) -> int:
        return self.hospitals.index(facility_id)


class EmptyNetworkError(RuntimeError):
    """Every facility was excluded."""

    def __init__(self, excluded):
        self.excluded = excluded
        super().__init__(f"all {len(excluded)} facilities were excluded")


def _select_nodes(table, window, inactivity_days, inactivity_mode,
                  one_day_overlaps_as_direct, state=None):
    nfac = table.n_facilities
    present = np.bincount(table.facility, minlength=nfac) > 0
    scope = present if state is None else present & (table.facility_state == state)
    inactive = inactive_facilities(table, window, inactivity_days, inactivity_mode) & scope
    reasons = {int(h): INACTIVE_GAP for h in np.flatnonzero(inactive)}
    alive = scope & ~inactive
    while True:
        # outside the state's scope rows stay in so that interstate moves
        # remain visible (and get dropped) instead of being bridged over
        keep_fac = alive if state is None else alive | ~scope
        tr = transitions(table, keep_fac[table.facility], one_day_overlaps_as_direct, state)
        has_society = np.zeros(nfac, dtype=bool)
        has_society[tr.indirect_src] = True
        zero = alive & ~has_society
        if not zero.any():
            break
        for h in np.flatnonzero(zero):
            reasons[int(h)] = ZERO_COMMUNITY
        alive &= ~zero
    return alive, reasons, tr


def _node_set(table, alive, reasons) -> NodeSet:
    handles = np.flatnonzero(alive)
    ids = table.facility_ids
    handles = np.array(sorted(handles, key=lambda h: (table.facility_state[h], ids[h])), dtype=np.int64)
    excluded = [(ids[h], reasons[h])
                for h in sorted(reasons, key=lambda h: (table.facility_state[h], ids[h]))]
    return NodeSet(hospitals=[ids[h] for h in handles],
                   states=[STATES[table.facility_state[h]] for h in handles],
                   excluded=excluded, handles=handles)


def build_nodes(table: StayTable, window=None, inactivity_days: int = 90,
                inactivity_mode: str = "occupancy",
                one_day_overlaps_as_direct: bool = True, state: str | None = None) -> NodeSet:
    """Select the facilities that become network nodes.

    A facility is dropped when it is inactive for more than
    ``inactivity_days`` consecutive days inside the window, or when no
    patient is ever discharged from it into its community (no indirect
    readmission follows any of its discharges). Dropping a facility removes
    its stays, which can empty other communities; selection repeats until
    nothing changes.
    """
    window = window or table.span()
    if window is None:
        raise EmptyNetworkError([])
    rank = None if state is None else STATE_RANK[state]
    alive, reasons, _ = _select_nodes(table, window, inactivity_days, inactivity_mode,
                                      one_day_overlaps_as_direct, rank)
    nodes = _node_set(table, alive, reasons)
    if nodes.n == 0:
        raise EmptyNetworkError(nodes.excluded)
    return nodes


@dataclass
class TransferMatrix:
    nodes: NodeSet
    probabilities: sp.csr_matrix
    los: np.ndarray
    departures: sp.csr_matrix

    @property
    def dimension(self) -> int:
        return self.probabilities.shape[0]

    def dense(self) -> np.ndarray:
        return self.probabilities.toarray()


def derive_matrix(nodes: NodeSet, table: StayTable, one_day_overlaps_as_direct: bool = True,
                  community_los: str = "node", state: str | None = None) -> TransferMatrix:
    """Daily transfer probabilities between hospitals and communities.

    Each node ``i`` keeps a patient with probability ``1 - 1/L_i`` where
    ``L_i`` is its mean length of stay; the leaving mass ``1/L_i`` is split
    over destinations in proportion to the observed departures. Nodes
    without departures are absorbing.
    """
    if community_los not in ("node", "global"):
        raise ValueError(f"unknown community_los {community_los!r}")
    n = nodes.n
    nfac = table.n_facilities
    node_of = np.full(nfac, -1, dtype=np.int64)
    node_of[nodes.handles] = np.arange(n)
    alive = node_of >= 0
    rank = None if state is None else STATE_RANK[state]
    keep_fac = alive if rank is None else alive | (table.facility_state != rank)
    tr = transitions(table, keep_fac[table.facility], one_day_overlaps_as_direct, rank)

    hn = node_of[tr.stay_facility]
    los_sum = np.bincount(hn, weights=tr.stay_los, minlength=n)
    los_cnt = np.bincount(hn, minlength=n)
    if np.any(los_cnt == 0):
        raise ValueError("every node needs at least one stay")
    hosp_los = los_sum / los_cnt

    src = node_of[tr.indirect_src]
    gap_sum = np.bincount(src, weights=tr.indirect_gap, minlength=n)
    gap_cnt = np.bincount(src, minlength=n)
    if community_los == "global" and gap_cnt.sum():
        comm_los = np.full(n, tr.indirect_gap.sum() / gap_cnt.sum())
    else:
        comm_los = np.divide(gap_sum, gap_cnt, out=np.ones(n), where=gap_cnt > 0)
    los = np.concatenate([hosp_los, comm_los])
    if np.any(los < 1):
        raise ValueError("mean length of stay below one day")

    rows = np.concatenate([node_of[tr.direct_src], src, node_of[tr.final_src], n + src])
    cols = np.concatenate([node_of[tr.direct_dst], n + src, n + node_of[tr.final_src],
                           node_of[tr.indirect_dst]])
    # a direct transfer back into the same facility is not a departure
    moved = rows != cols
    rows, cols = rows[moved], cols[moved]
    counts = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(2 * n, 2 * n)).tocsr()
    counts.sum_duplicates()

    totals = np.asarray(counts.sum(axis=1)).ravel()
    leave = 1.0 / los
    scale = np.divide(leave, totals, out=np.zeros(2 * n), where=totals > 0)
    offdiag = sp.diags(scale) @ counts
    diag = np.where(totals > 0, 1.0 - leave, 1.0)
    probs = (offdiag + sp.diags(diag)).tocsr()
    probs.sort_indices()
    counts.sort_indices()
    return TransferMatrix(nodes, probs, los, counts)


# -- graph metrics ----------------------------------------------------------------

@dataclass
class GraphMetrics:
    n_nodes: int
    n_edges: int
    avg_in_degree: float | None
    avg_out_degree: float | None
    in_degree: np.ndarray
    out_degree: np.ndarray
    diameter: int | None
    radius: int | None
    density: float | None
    component_size: int
    strongly_connected: bool


def adjacency(matrix) -> sp.csr_matrix:
    """Directed edge set: off-diagonal nonzeros."""
    if isinstance(matrix, TransferMatrix):
        m = matrix.probabilities
    else:
        m = matrix
    m = sp.csr_matrix(m, dtype=float, copy=True)
    m.setdiag(0)
    m.eliminate_zeros()
    m.data[:] = 1.0
    return m


def _eccentricities(adj: sp.csr_matrix, chunk: int = 256) -> np.ndarray:
    k = adj.shape[0]
    ecc = np.zeros(k)
    for lo in range(0, k, chunk):
        idx = np.arange(lo, min(lo + chunk, k))
        dist = shortest_path(adj, method="D", directed=True, unweighted=True, indices=idx)
        dist[np.isinf(dist)] = -1
        ecc[idx] = dist.max(axis=1)
    return ecc


def compute_graph_metrics(matrix, scope: str = "largest-scc") -> GraphMetrics:
    """Node/edge counts, degrees, density and hop distances.

    Distances are taken inside the largest strongly connected component
    (ties go to the component holding the lowest node index) so that they
    are finite. ``scope="reachable"`` instead uses every reachable ordered
    pair of the whole graph.
    """
    if scope not in ("largest-scc", "reachable"):
        raise ValueError(f"unknown distance scope {scope!r}")
    adj = adjacency(matrix)
    k = adj.shape[0]
    edges = int(adj.nnz)
    in_deg = np.asarray(adj.sum(axis=0)).ravel().astype(np.int64)
    out_deg = np.asarray(adj.sum(axis=1)).ravel().astype(np.int64)
    if k < 2:
        return GraphMetrics(k, edges, None, None, in_deg, out_deg, None, None, None, k, k == 1)
    _, labels = connected_components(adj, directed=True, connection="strong")
    sizes = np.bincount(labels)
    largest = labels[int(np.argmax(sizes[labels] == sizes.max()))]
    members = np.flatnonzero(labels == largest)
    strongly = len(members) == k
    if scope == "largest-scc":
        ecc = _eccentricities(adj[members][:, members])
        diameter, radius = int(ecc.max()), int(ecc.min())
    else:
        ecc = _eccentricities(adj)
        reaching = ecc > 0
        diameter = int(ecc.max()) if reaching.any() else 0
        radius = int(ecc[reaching].min()) if reaching.any() else 0
    return GraphMetrics(
        n_nodes=k, n_edges=edges,
        avg_in_degree=edges / k, avg_out_degree=edges / k,
        in_degree=in_deg, out_degree=out_deg,
        diameter=diameter, radius=radius,
        density=edges / (k * (k - 1)),
        component_size=len(members), strongly_connected=strongly,
    )


# -- per-state networks -----------------------------------------------------------------

@dataclass
class StateNetwork:
    state: str
    nodes: NodeSet
    matrix: TransferMatrix
    metrics: GraphMetrics
    n_events: int
    n_dropped_interstate: int


def split_by_state(table: StayTable, window=None, inactivity_days: int = 90,
                   inactivity_mode: str = "occupancy", one_day_overlaps_as_direct: bool = True,
                   community_los: str = "node", scope: str = "largest-scc") -> dict[str, StateNetwork | None]:
    """One network per state with interstate movements dropped.

    States without any surviving facility map to None.
    """
    window = window or table.span()
    out: dict[str, StateNetwork | None] = {}
    present_states = set(np.unique(table.facility_state[np.unique(table.facility)]).tolist()) if len(table) else set()
    for s in STATES:
        if STATE_RANK[s] not in present_states:
            out[s] = None
            continue
        alive, reasons, tr = _select_nodes(table, window, inactivity_days, inactivity_mode,
                                           one_day_overlaps_as_direct, STATE_RANK[s])
        nodes = _node_set(table, alive, reasons)
        if nodes.n == 0:
            out[s] = None
            continue
        matrix = derive_matrix(nodes, table, one_day_overlaps_as_direct, community_los, state=s)
        out[s] = StateNetwork(s, nodes, matrix, compute_graph_metrics(matrix, scope),
                              tr.n_events, tr.n_dropped_interstate)
    return out


# -- export ------------------------------------------------------------------------

def export_matrix(matrix: TransferMatrix | sp.spmatrix, fh: IO[str]) -> int:
    """Write ``dimension nnz`` then 1-indexed ``row col value`` lines."""
    m = matrix.probabilities if isinstance(matrix, TransferMatrix) else sp.csr_matrix(matrix)
    coo = m.tocoo()
    order = np.lexsort((coo.col, coo.row))
    fh.write(f"{m.shape[0]} {len(order)}\n")
    for i in order:
        fh.write(f"{coo.row[i] + 1} {coo.col[i] + 1} {coo.data[i]:.12g}\n")
    return len(order)


def read_matrix(fh: Iterable[str]) -> sp.csr_matrix:
    header = None
    rows, cols, vals = [], [], []
    for line in fh:
        if line.startswith("#") or not line.strip():
            continue
        parts = line.split()
        if header is None:
            header = (int(parts[0]), int(parts[1]))
            continue
        rows.append(int(parts[0]) - 1)
        cols.append(int(parts[1]) - 1)
        vals.append(float(parts[2]))
    if header is None:
        raise ValueError("missing header line")
    dim, nnz = header
    if len(vals) != nnz:
        raise ValueError(f"header announces {nnz} entries, found {len(vals)}")
    return sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim))


def block_density(matrix: TransferMatrix | sp.spmatrix, n: int | None = None) -> list[tuple[str, int, int]]:
    """Nonzero counts of the four blocks: ``(block, nonzero, cells)``.

    The two diagonal blocks (hospital to hospital, community to community)
    exclude their diagonals, which hold the stay probabilities.
    """
    m = matrix.probabilities if isinstance(matrix, TransferMatrix) else sp.csr_matrix(matrix)
    n = n if n is not None else m.shape[0] // 2
    coo = m.tocoo()
    nz = coo.data != 0
    r, c = coo.row[nz], coo.col[nz]
    hr, hc = r < n, c < n
    direct = int(np.count_nonzero(hr & hc & (r != c)))
    discharge = int(np.count_nonzero(hr & ~hc))
    indirect = int(np.count_nonzero(~hr & hc))
    community = int(np.count_nonzero(~hr & ~hc & (r != c)))
    return [
        ("direct", direct, n * (n - 1)),
        ("discharge", discharge, n * n),
        ("indirect", indirect, n * n),
        ("community", community, n * (n - 1)),
    ]


class TransferNetwork(BaseEstimator):
    """Fit the hospital/community transfer network of a cohort.

    Parameters
    ----------
    inactivity_days : int
        Facilities idle for longer than this many consecutive days are dropped.
    inactivity_mode : {"occupancy", "admissions"}
    count_overlap_transfers_as_direct : bool
        Treat one-day overlaps between two facilities as direct transfers.
    community_los : {"node", "global"}
        Mean community stay per community node, or one mean for all.
    distance_scope : {"largest-scc", "reachable"}
    window : (date, date) or None
        Observation window; defaults to the span of the data.
    per_state : bool
        Also fit one network per state with interstate movements dropped.

    Attributes
    ----------
    nodes_ : NodeSet
    matrix_ : TransferMatrix
    metrics_ : GraphMetrics
    state_networks_ : dict
    """

    def __init__(self, inactivity_days=90, inactivity_mode="occupancy",
                 count_overlap_transfers_as_direct=True, community_los="node",
                 distance_scope="largest-scc", window=None, per_state=False):
        self.inactivity_days = inactivity_days
        self.inactivity_mode = inactivity_mode
        self.count_overlap_transfers_as_direct = count_overlap_transfers_as_direct
        self.community_los = community_los
        self.distance_scope = distance_scope
        self.window = window
        self.per_state = per_state

    def fit(self, X, y=None):
        from .validation import check_stay_table, check_window

        table = check_stay_table(X)
        window = check_window(self.window) if self.window is not None else table.span()
        self.window_ = window
        self.nodes_ = build_nodes(table, window, self.inactivity_days, self.inactivity_mode,
                                  self.count_overlap_transfers_as_direct)
        self.matrix_ = derive_matrix(self.nodes_, table, self.count_overlap_transfers_as_direct,
                                     self.community_los)
        self.metrics_ = compute_graph_metrics(self.matrix_, self.distance_scope)
        if self.per_state:
            self.state_networks_ = split_by_state(
                table, window, self.inactivity_days, self.inactivity_mode,
                self.count_overlap_transfers_as_direct, self.community_los, self.distance_scope)
        return self
