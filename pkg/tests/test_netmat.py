from __future__ import annotations

import io
import random
from datetime import date, timedelta

import networkx as nx
import numpy as np
import pytest
import scipy.sparse as sp

from hospnet.episodes import TransferKind, detect_transfers
from hospnet.netmat import (INACTIVE_GAP, ZERO_COMMUNITY, EmptyNetworkError, StayTable,
                            TransferNetwork, block_density, build_nodes, compute_graph_metrics,
                            derive_matrix, export_matrix, inactive_facilities, read_matrix,
                            split_by_state, transitions)
from hospnet.overlaps import OverlapClass
from hospnet.records import STATE_RANK, STATES, group_by_patient
from hospnet.synthgen import GeneratorConfig, make_cohort
from hospnet.validation import check_transfer_matrix

from conftest import rec
from oracles import brute_inactive, brute_metrics

D = date.fromisoformat
NO_INJECTION = {c: 0.0 for c in OverlapClass}


def table_of(records):
    return StayTable.from_patients(group_by_patient(records))


def fit(records, **kw):
    table = table_of(records)
    kw.setdefault("inactivity_days", 10_000)
    nodes = build_nodes(table, inactivity_days=kw.pop("inactivity_days"), **kw)
    return nodes, derive_matrix(nodes, table)


@pytest.fixture(scope="module")
def patients20k():
    # large enough that default facilities are never idle for 90 days
    records, _ = make_cohort(GeneratorConfig(seed=42, n_patients=20_000))
    return list(group_by_patient(records))


@pytest.fixture(scope="module")
def table42(patients42):
    return StayTable.from_patients(patients42)


@pytest.fixture(scope="module")
def network42(patients20k):
    return TransferNetwork(per_state=True).fit(patients20k)


def test_hospital_row_all_to_community():
    stays = [rec(adm="2013-01-01", dis="2013-01-06"), rec(adm="2013-03-01", dis="2013-03-06")]
    nodes, m = fit(stays)
    assert nodes.hospitals == ["f1"]
    row = m.dense()[0]
    assert row[0] == pytest.approx(0.8, abs=1e-12)
    assert row[1] == pytest.approx(0.2, abs=1e-12)
    assert check_transfer_matrix(m) == []


def test_community_row_split():
    stays = []
    base = D("2013-01-01")
    for i in range(100):
        pid = f"p{i:03d}"
        dis = base + timedelta(days=1)
        back = "h" if i < 50 else "k"
        stays += [rec(pid, "h", base.isoformat(), dis.isoformat()),
                  rec(pid, back, (dis + timedelta(days=250)).isoformat(),
                      (dis + timedelta(days=251)).isoformat())]
    # give k a community of its own
    stays += [rec("q", "k", "2013-01-01", "2013-01-02"), rec("q", "k", "2013-09-08", "2013-09-09")]
    nodes, m = fit(stays)
    h, k = nodes.index("h"), nodes.index("k")
    n = nodes.n
    row = m.dense()[n + h]
    assert row[n + h] == pytest.approx(0.996, abs=1e-12)
    assert row[h] == pytest.approx(0.002, abs=1e-12)
    assert row[k] == pytest.approx(0.002, abs=1e-12)
    assert check_transfer_matrix(m) == []


def test_zero_community_exclusion():
    stays = [rec("p1", "a", "2013-01-01", "2013-01-05"), rec("p1", "b", "2013-01-06", "2013-01-08"),
             rec("p1", "b", "2013-03-01", "2013-03-02")]
    nodes, _ = fit(stays)
    assert nodes.hospitals == ["b"]
    assert nodes.excluded == [("a", ZERO_COMMUNITY)]


def test_zero_community_cascades():
    # dropping "b" bridges a's only indirect readmission over into a direct move
    stays = [rec("p1", "a", "2013-01-01", "2013-01-02"), rec("p1", "b", "2013-01-03", "2013-01-04"),
             rec("p1", "c", "2013-01-05", "2013-01-06"),
             rec("p2", "c", "2013-01-01", "2013-01-02"), rec("p2", "c", "2013-02-01", "2013-02-02")]
    nodes, _ = fit(stays)
    assert nodes.hospitals == ["c"]
    assert dict(nodes.excluded) == {"a": ZERO_COMMUNITY, "b": ZERO_COMMUNITY}


def test_inactive_gap_exclusion():
    stays = [rec("p1", "a", "2013-01-02", "2013-01-10"), rec("p1", "a", "2014-01-05", "2014-01-10"),
             rec("p2", "b", "2013-01-01", "2013-12-20"), rec("p2", "b", "2014-01-01", "2014-01-10")]
    table = table_of(stays)
    nodes = build_nodes(table, window=(D("2013-01-01"), D("2014-01-10")))
    assert nodes.hospitals == ["b"]
    assert nodes.excluded == [("a", INACTIVE_GAP)]


def test_inactivity_admissions_mode():
    stays = [rec("p1", "a", "2013-01-01", "2013-12-31"), rec("p1", "a", "2014-01-05", "2014-01-06")]
    table = table_of(stays)
    window = (D("2013-01-01"), D("2014-01-06"))
    assert not inactive_facilities(table, window, 90, "occupancy")[0]
    assert inactive_facilities(table, window, 90, "admissions")[0]
    with pytest.raises(ValueError):
        inactive_facilities(table, window, 90, "beds")


@pytest.mark.parametrize("seed", range(15))
def test_inactive_matches_day_walk(seed):
    rng = random.Random(seed)
    base = D("2015-01-01")
    records = []
    for i in range(rng.randrange(1, 25)):
        adm = base + timedelta(days=rng.randrange(-20, 300))
        records.append(rec(f"p{i}", f"f{rng.randrange(5)}", adm.isoformat(),
                           (adm + timedelta(days=rng.randrange(0, 30))).isoformat()))
    window = (base, base + timedelta(days=rng.randrange(50, 300)))
    threshold = rng.randrange(5, 60)
    table = table_of(records)
    got = {table.facility_ids[h] for h in np.flatnonzero(inactive_facilities(table, window, threshold))}
    stays = [(r.facility_id, r.admission, r.discharge) for r in records]
    assert got == brute_inactive(stays, window, threshold)


def test_empty_network():
    with pytest.raises(EmptyNetworkError) as err:
        fit([rec("p1", "a"), rec("p2", "b")])
    assert {f for f, _ in err.value.excluded} == {"a", "b"}
    with pytest.raises(EmptyNetworkError):
        build_nodes(table_of([]))


def test_seed42_matrix_valid(network42):
    assert check_transfer_matrix(network42.matrix_) == []
    for net in network42.state_networks_.values():
        if net is not None:
            assert check_transfer_matrix(net.matrix) == []


def test_community_in_degree_one(network42):
    n = network42.nodes_.n
    P = network42.matrix_.probabilities.tolil()
    P.setdiag(0)
    cols = sp.csc_matrix(P)
    assert all(cols[:, n + c].indices.tolist() == [c] for c in range(n))


def test_validator_catches_broken_matrix(network42):
    m = network42.matrix_
    broken = m.probabilities.tolil()
    n = m.nodes.n
    broken[0, n + 1] = 0.01
    bad = type(m)(m.nodes, broken.tocsr(), m.los, m.departures)
    assert check_transfer_matrix(bad)


def test_estimator_params(network42):
    params = network42.get_params()
    assert params["inactivity_days"] == 90 and params["count_overlap_transfers_as_direct"] is True
    assert network42.metrics_.n_nodes == 2 * network42.nodes_.n


def test_metrics_complete_graph():
    k = 6
    m = compute_graph_metrics(np.ones((k, k)))
    assert (m.density, m.diameter, m.radius, m.n_edges) == (1.0, 1, 1, k * (k - 1))


def test_metrics_four_cycle():
    adj = np.zeros((4, 4))
    for i in range(4):
        adj[i, (i + 1) % 4] = 1
    m = compute_graph_metrics(adj)
    assert (m.diameter, m.radius) == (3, 3)
    assert m.avg_in_degree == m.avg_out_degree == 1


def test_metrics_undefined_below_two_nodes():
    m = compute_graph_metrics(np.ones((1, 1)))
    assert m.diameter is None and m.density is None


def random_graph(rng, k, p):
    return [(u, v) for u in range(k) for v in range(k) if u != v and rng.random() < p]


@pytest.mark.parametrize("seed", range(10))
def test_metrics_match_bfs(seed):
    rng = random.Random(seed)
    k = rng.randrange(2, 80)
    edges = random_graph(rng, k, rng.choice([0.02, 0.05, 0.2]))
    adj = sp.csr_matrix((np.ones(len(edges)), ([u for u, _ in edges], [v for _, v in edges])), shape=(k, k))
    m = compute_graph_metrics(adj)
    assert (m.diameter, m.radius, m.density, m.component_size, m.n_edges) == brute_metrics(k, edges)


def test_metrics_match_networkx(network42):
    net = network42.state_networks_["NW"]
    adj = net.matrix.probabilities.toarray()
    np.fill_diagonal(adj, 0)
    g = nx.DiGraph(adj > 0)
    comp = max(nx.strongly_connected_components(g), key=lambda c: (len(c), -min(c)))
    sub = g.subgraph(comp)
    assert net.metrics.diameter == nx.diameter(sub)
    assert net.metrics.radius == nx.radius(sub)
    assert net.metrics.n_edges == g.number_of_edges()


def test_degree_identities(network42):
    m = network42.metrics_
    assert m.in_degree.sum() == m.out_degree.sum() == m.n_edges
    assert 0 <= m.density <= 1


def test_export_roundtrip(network42):
    buf = io.StringIO()
    nnz = export_matrix(network42.matrix_, buf)
    buf.seek(0)
    back = read_matrix(buf)
    P = network42.matrix_.probabilities
    assert nnz == P.nnz
    assert np.abs((back - P).toarray()).max() <= 1e-12


def test_export_small():
    buf = io.StringIO()
    export_matrix(sp.identity(2, format="csr"), buf)
    assert buf.getvalue() == "2 2\n1 1 1\n2 2 1\n"
    buf.seek(0)
    assert (read_matrix(buf) != sp.identity(2)).nnz == 0
    with pytest.raises(ValueError):
        read_matrix(io.StringIO("2 3\n1 1 1\n"))


def test_indirect_block_denser_than_direct(network42):
    blocks = {name: nz / cells for name, nz, cells in block_density(network42.matrix_)}
    assert blocks["indirect"] > blocks["direct"]
    # a hospital discharges into its own community only
    assert blocks["discharge"] == pytest.approx(1 / network42.nodes_.n)
    assert blocks["community"] == 0


def test_transitions_agree_with_detector(table42, patients42):
    tr = transitions(table42, one_day_overlaps_as_direct=False)
    events = list(detect_transfers(patients42))
    assert len(tr.direct_src) == sum(e.kind is TransferKind.DIRECT for e in events)
    assert len(tr.indirect_src) == sum(e.kind is not TransferKind.DIRECT for e in events)


def test_one_day_overlaps_become_direct():
    stays = [rec("p1", "a", "2013-01-01", "2013-01-05"), rec("p1", "b", "2013-01-05", "2013-01-09")]
    table = table_of(stays)
    assert len(transitions(table).direct_src) == 1
    assert len(transitions(table, one_day_overlaps_as_direct=False).direct_src) == 0


def test_split_conservation(table42, patients42):
    total = transitions(table42, one_day_overlaps_as_direct=False).n_events
    per_state = sum(transitions(table42, one_day_overlaps_as_direct=False, state=STATE_RANK[s]).n_events
                    for s in STATES)
    interstate = sum(e.interstate for e in detect_transfers(patients42))
    assert interstate > 0
    assert per_state + interstate == total
    dropped = sum(transitions(table42, one_day_overlaps_as_direct=False, state=STATE_RANK[s]).n_dropped_interstate
                  for s in STATES)
    # each interstate move is dropped once by its origin and once by its destination
    assert dropped == 2 * interstate


def test_split_without_interstate_matches_global():
    cfg = GeneratorConfig(seed=3, n_patients=4000, interstate_rate=0.0, overlap_injection=NO_INJECTION)
    records, _ = make_cohort(cfg)
    table = table_of(records)
    nodes = build_nodes(table)
    glob = derive_matrix(nodes, table).dense()
    n = nodes.n
    for s, net in split_by_state(table).items():
        if net is None:
            assert s not in nodes.states
            continue
        assert net.n_dropped_interstate == 0
        pos = [i for i, st in enumerate(nodes.states) if st == s]
        assert [nodes.hospitals[i] for i in pos] == net.nodes.hospitals
        idx = pos + [n + i for i in pos]
        assert np.abs(glob[np.ix_(idx, idx)] - net.matrix.dense()).max() <= 1e-15


def test_single_state_cohort(patients20k):
    records = [r for _, recs in patients20k if {x.state for x in recs} == {"NW"} for r in recs]
    nets = split_by_state(table_of(records))
    assert [s for s, net in nets.items() if net is not None] == ["NW"]
    assert nets["NW"].n_dropped_interstate == 0
