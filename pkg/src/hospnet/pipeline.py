"""End-to-end analysis: one streaming pass over the records, then every table.

Each output file is plain TSV (matrices: coordinate text) and starts with a
stamp line ``# hospnet <version> config=<hash> input=<sha256>``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from datetime import date
from fractions import Fraction
from typing import IO, Iterable

from . import __version__
from .episodes import (TRANSFER_COLUMNS, HospitalizationCounter, TransferKind, format_event,
                       patient_transfers)
from .netmat import (EmptyNetworkError, StayTableBuilder, TransferNetwork, block_density,
                     export_matrix)
from .overlaps import (ALL_CODES, ONE_DAY_TRANSFERS, OVERLAP_COLUMNS, OverlapClass, chapter_pair,
                       format_group, patient_overlap_groups)
from .records import STATE_RANK, STATES, ValidationReport, group_by_patient, parse_records
from .stats import (DAYS, LOG_DECADES, StateAccumulator, build_state_matrix,
                    histogram_from_counts, round_half_up, window_days)

log = logging.getLogger(__name__)

BETWEEN = "between"
LOCATIONS = STATES + (BETWEEN,)

# which files each subcommand writes
OUTPUTS = {
    "validate": ("validation.tsv",),
    "transfers": ("transfers.tsv", "table4.tsv", "table5.tsv", "fig9.tsv", "fig11.tsv",
                  "fig12.tsv", "fig13.tsv", "fig14.tsv"),
    "overlaps": ("overlaps.tsv", "overlap_exclusions.tsv", "table6.tsv", "table7.tsv",
                 "table8.tsv", "fig15.tsv", "fig16.tsv", "fig17.tsv"),
    "stats": ("table1.tsv", "table2.tsv", "table3.tsv", "fig1.tsv", "fig2.tsv", "fig4.tsv",
              "fig6.tsv", "fig7.tsv", "fig8.tsv"),
    "matrix": ("matrix.txt", "fig10.tsv", "nodes.tsv", "exclusions.tsv", "matrices/"),
    "metrics": ("table9.tsv", "fig18.tsv", "fig19.tsv"),
}
OUTPUTS["all"] = tuple(f for group in ("validate", "transfers", "overlaps", "stats", "matrix",
                                       "metrics") for f in OUTPUTS[group])


@dataclass(frozen=True)
class RunConfig:
    """Analysis settings. Only fields that can change results enter the hash."""
    input: str | None = None
    out: str = "out"
    window: tuple[date, date] | None = None
    memory_mb: int = 2048
    workers: int = 1
    spill_dir: str | None = None
    count_overlap_transfers_as_direct: bool = True
    inactivity_days: int = 90
    inactivity_mode: str = "occupancy"
    community_los: str = "node"
    distance_scope: str = "largest-scc"
    census_scope: str = "dataset"

    _UNHASHED = ("input", "out", "memory_mb", "workers", "spill_dir")

    def config_hash(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k not in self._UNHASHED}
        if d["window"] is not None:
            d["window"] = [x.isoformat() for x in d["window"]]
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def stamp(config: RunConfig, input_sha: str) -> str:
    return f"# hospnet {__version__} config={config.config_hash()} input={input_sha}\n"


def fmt_decimal(x: Fraction | float | None, places: int = 1) -> str:
    """Half-up rounding to ``places`` decimals; empty for undefined values."""
    if x is None:
        return ""
    x = Fraction(x)
    scaled = round_half_up(x * 10 ** places) if x >= 0 else -round_half_up(-x * 10 ** places)
    sign = "-" if scaled < 0 else ""
    whole, frac = divmod(abs(scaled), 10 ** places)
    return f"{sign}{whole}.{frac:0{places}d}" if places else f"{sign}{whole}"


def fmt_median(x: Fraction | None) -> str:
    if x is None:
        return ""
    return str(x.numerator) if x.denominator == 1 else fmt_decimal(x, 1)


def _location(states: Iterable[str]) -> str:
    states = set(states)
    return next(iter(states)) if len(states) == 1 else BETWEEN


@dataclass
class Analysis:
    """Per-patient accumulators for every table; fed by :meth:`add`."""
    config: RunConfig = field(default_factory=RunConfig)
    transfer_sink: IO[str] | None = None
    overlap_sink: IO[str] | None = None

    def __post_init__(self):
        self.n_patients = 0
        self.hosp = HospitalizationCounter()
        self.states = StateAccumulator(window=self.config.window,
                                       census_scope=self.config.census_scope)
        self.table = StayTableBuilder()
        self.birth = defaultdict(Counter)        # birth year -> sex -> patients
        self.facility_admissions = Counter()
        self.facility_patients = Counter()
        self.facility_state = {}
        self.n_states_per_patient = Counter()
        self.shared = build_state_matrix([], "shared_patients").counts
        self.direct = build_state_matrix([], "direct_transfers").counts
        self.indirect = build_state_matrix([], "indirect_transfers").counts
        self.overlap_od = build_state_matrix([], "overlap_origin_destination").counts
        # location -> kind -> count, kinds per TransferKind plus merged one-day overlaps
        self.transfer_counts = defaultdict(Counter)
        self.origin_totals = Counter()
        self.origin_leaving = Counter()
        self.n_pairs = 0
        self.n_overlapping_pairs = 0
        self.class_counts = defaultdict(Counter)
        self.code_counts = defaultdict(Counter)
        self.excluded_by_facilities = Counter()
        self.durations = defaultdict(Counter)
        self.chapter_pairs = defaultdict(Counter)

    def add(self, records) -> None:
        self.n_patients += 1
        events = list(patient_transfers(records))
        groups = list(patient_overlap_groups(records))
        self.hosp.add(records)
        self.states.add(records, events)
        self.table.add(records)

        first = records[0]
        self.birth[first.birth_year][first.sex] += 1
        visited = set()
        states = set()
        for r in records:
            self.facility_admissions[r.facility_id] += 1
            self.facility_state[r.facility_id] = r.state
            visited.add(r.facility_id)
            states.add(r.state)
        for fac in visited:
            self.facility_patients[fac] += 1
        self.n_states_per_patient[len(states)] += 1
        idx = sorted(STATE_RANK[s] for s in states)
        for x in range(len(idx)):
            for y in range(x + 1, len(idx)):
                self.shared[idx[x], idx[y]] += 1
                self.shared[idx[y], idx[x]] += 1

        self.n_pairs += len(records) - 1
        self.n_overlapping_pairs += len(records) - 1 - len(events)
        merge = self.config.count_overlap_transfers_as_direct
        for e in events:
            loc = e.from_state if e.from_state == e.to_state else BETWEEN
            self.transfer_counts[loc][e.kind] += 1
            i, j = STATE_RANK[e.from_state], STATE_RANK[e.to_state]
            if e.kind is TransferKind.DIRECT:
                self.direct[i, j] += 1
            else:
                self.indirect[i, j] += 1
            self.origin_totals[e.from_state] += 1
            if e.from_state != e.to_state:
                self.origin_leaving[e.from_state] += 1
            if self.transfer_sink is not None:
                self.transfer_sink.write(format_event(e) + "\n")

        for g in groups:
            if self.overlap_sink is not None:
                self.overlap_sink.write(format_group(g) + "\n")
            if g.overlap_class is None:
                self.excluded_by_facilities[g.n_facilities] += 1
                continue
            loc = _location(g.states)
            self.class_counts[loc][g.overlap_class] += 1
            self.durations[loc][g.duration_days] += 1
            if len(g.records) != 2:
                continue
            a, b = g.records
            code = str(g.code)
            self.code_counts[loc][code] += 1
            self.chapter_pairs[code][chapter_pair(a, b)] += 1
            if a.state != b.state:
                self.overlap_od[STATE_RANK[a.state], STATE_RANK[b.state]] += 1
            if merge and g.overlap_class in ONE_DAY_TRANSFERS:
                i, j = STATE_RANK[a.state], STATE_RANK[b.state]
                self.direct[i, j] += 1
                self.transfer_counts[a.state if i == j else BETWEEN]["one_day_overlap"] += 1
                self.origin_totals[a.state] += 1
                if i != j:
                    self.origin_leaving[a.state] += 1


def _write_rows(fh, header, rows):
    fh.write("\t".join(header) + "\n")
    for row in rows:
        fh.write("\t".join("" if v is None else str(v) for v in row) + "\n")


def _state_matrix_rows(m):
    for s, row in zip(STATES, m.tolist()):
        yield [s, *row]


class OutputWriter:
    """Opens stamped output files under the run's output directory."""

    def __init__(self, config: RunConfig, input_sha: str):
        self.config = config
        self.header = stamp(config, input_sha)
        self.written: list[str] = []
        os.makedirs(config.out, exist_ok=True)

    def open(self, name: str) -> IO[str]:
        path = os.path.join(self.config.out, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        fh = open(path, "w", encoding="utf-8", newline="\n")
        fh.write(self.header)
        self.written.append(name)
        return fh

    def table(self, name, header, rows) -> None:
        with self.open(name) as fh:
            _write_rows(fh, header, rows)


def _transfer_tables(a: Analysis, out: OutputWriter) -> None:
    rows = []
    for loc in LOCATIONS:
        c = a.transfer_counts.get(loc, Counter())
        direct = c[TransferKind.DIRECT] + c["one_day_overlap"]
        indirect = c[TransferKind.INDIRECT_AUTO] + c[TransferKind.INDIRECT_OTHER]
        rows.append([loc, direct + indirect, direct, indirect,
                     c[TransferKind.INDIRECT_AUTO], c[TransferKind.INDIRECT_OTHER]])
    out.table("table4.tsv", ["location", "transfers", "direct", "indirect", "indirect_auto",
                             "indirect_other"], rows)

    pct = {s: (round_half_up(Fraction(100 * a.origin_leaving[s], a.origin_totals[s]))
               if a.origin_totals[s] else None) for s in STATES}
    out.table("table5.tsv", ["state", "percent_interstate"], ([s, pct[s]] for s in STATES))

    rows = []
    for s in STATES:
        c = a.transfer_counts.get(s, Counter())
        counts = [c[TransferKind.DIRECT] + c["one_day_overlap"],
                  c[TransferKind.INDIRECT_AUTO], c[TransferKind.INDIRECT_OTHER]]
        counts.append(a.origin_leaving[s])
        total = sum(counts)
        for kind, n in zip(["direct", "indirect_auto", "indirect_other", "interstate"], counts):
            rows.append([s, kind, n, fmt_decimal(Fraction(100 * n, total), 1) if total else ""])
    out.table("fig9.tsv", ["state", "kind", "transfers", "percent"], rows)

    out.table("fig11.tsv", ["n_states", "patients"],
              ([k, a.n_states_per_patient[k]] for k in sorted(a.n_states_per_patient)))
    header = ["state", *STATES]
    out.table("fig12.tsv", header, _state_matrix_rows(a.shared))
    out.table("fig13.tsv", header, _state_matrix_rows(a.indirect))
    out.table("fig14.tsv", header, _state_matrix_rows(a.direct))


def _overlap_tables(a: Analysis, out: OutputWriter) -> None:
    classes = list(OverlapClass)
    out.table("overlap_exclusions.tsv", ["n_facilities", "groups"],
              ([k, a.excluded_by_facilities[k]] for k in sorted(a.excluded_by_facilities)))
    rows = []
    for loc in LOCATIONS:
        c = a.class_counts.get(loc, Counter())
        rows.append([loc, sum(c.values()), *(c[k] for k in classes)])
    out.table("table6.tsv", ["location", "overlaps", *(k.value for k in classes)], rows)
    rows = []
    for loc in LOCATIONS:
        c = a.code_counts.get(loc, Counter())
        rows.append([loc, sum(c.values()), *(c[k] for k in ALL_CODES)])
    out.table("table7.tsv", ["location", "two_record_overlaps", *ALL_CODES], rows)
    rows = []
    for code in ALL_CODES:
        pairs = a.chapter_pairs.get(code, Counter())
        ranked = sorted(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        for rank, ((x, y), n) in enumerate(ranked, 1):
            rows.append([code, rank, x, y, n])
    out.table("table8.tsv", ["code", "rank", "chapter_a", "chapter_b", "overlaps"], rows)
    rows = []
    for loc in LOCATIONS:
        hist = histogram_from_counts(a.durations.get(loc, Counter()), DAYS)
        rows += [[loc, label, n] for label, n in zip(hist.labels, hist.counts)]
    out.table("fig15.tsv", ["location", "duration_days", "overlaps"], rows)
    totals = Counter()
    for c in a.code_counts.values():
        totals.update(c)
    out.table("fig16.tsv", ["code", "overlaps"], ([k, totals[k]] for k in ALL_CODES))
    out.table("fig17.tsv", ["state", *STATES], _state_matrix_rows(a.overlap_od))


def _stats_tables(a: Analysis, out: OutputWriter) -> None:
    summaries = a.states.result()
    out.table("table1.tsv", ["state", "admissions", "facilities"],
              ([s.state, s.n_admissions, s.n_facilities] for s in summaries))
    hosp = a.hosp.result()
    rows = []
    for s in STATES:
        h = hosp[s]
        rows.append([s, h.patients_female, h.patients_male, h.min_stays, h.max_stays,
                     fmt_decimal(h.mean_stays), fmt_decimal(h.mean_female),
                     fmt_decimal(h.mean_male), fmt_median(h.median_stays),
                     fmt_median(h.median_female), fmt_median(h.median_male)])
    out.table("table2.tsv", ["state", "patients_female", "patients_male", "min_stays",
                             "max_stays", "mean_stays", "mean_female", "mean_male",
                             "median_stays", "median_female", "median_male"], rows)
    out.table("table3.tsv", ["state", "census_facilities", "census_societies",
                             "los_facility", "los_society"],
              ([s.state, fmt_decimal(s.avg_census_facilities), fmt_decimal(s.avg_census_societies),
                fmt_decimal(s.avg_los_facility), fmt_decimal(s.avg_los_society)]
               for s in summaries))

    years = sorted(y for y in a.birth if y is not None)
    rows = [[y, a.birth[y]["f"], a.birth[y]["m"], a.birth[y]["u"]] for y in years]
    if None in a.birth:
        c = a.birth[None]
        rows.append(["unknown", c["f"], c["m"], c["u"]])
    out.table("fig1.tsv", ["birth_year", "female", "male", "unknown"], rows)

    window = a.states.census_window()
    census_rows = []
    if window is not None:
        n_days = window_days(window)
        st = a.states
        for fac in sorted(a.facility_state, key=lambda f: (STATES.index(a.facility_state[f]), f)):
            census_rows.append([fac, a.facility_state[fac],
                                fmt_decimal(Fraction(st.hospital_days[fac], n_days), 4),
                                fmt_decimal(Fraction(st.society_days[fac], n_days), 4)])
    out.table("fig2.tsv", ["facility", "state", "census_facility", "census_community"],
              census_rows)

    hist = histogram_from_counts(Counter(a.facility_admissions.values()), LOG_DECADES)
    out.table("fig4.tsv", ["admissions", "facilities"], zip(hist.labels, hist.counts))
    rows = []
    for s in STATES:
        per = Counter(n for f, n in a.facility_patients.items() if a.facility_state[f] == s)
        hist = histogram_from_counts(per, LOG_DECADES)
        rows += [[s, label, n] for label, n in zip(hist.labels, hist.counts)]
    out.table("fig6.tsv", ["state", "patients", "facilities"], rows)
    rows = []
    for s in STATES:
        hist = histogram_from_counts(a.states.los.get(s, Counter()), DAYS)
        rows += [[s, label, n] for label, n in zip(hist.labels, hist.counts) if n]
    out.table("fig7.tsv", ["state", "los_days", "stays"], rows)
    rows = []
    for s in STATES:
        hist = histogram_from_counts(a.states.society_gaps.get(s, Counter()), DAYS)
        rows += [[s, label, n] for label, n in zip(hist.labels, hist.counts) if n]
    out.table("fig8.tsv", ["state", "gap_days", "gaps"], rows)


def _degree_rows(values) -> list:
    c = Counter(values)
    return [[d, c[d]] for d in sorted(c)]


def _network_outputs(net: TransferNetwork | None, excluded, out: OutputWriter, which) -> None:
    if "matrix.txt" in which:
        with out.open("exclusions.tsv") as fh:
            _write_rows(fh, ["facility", "reason"], excluded)
    if net is None:
        return
    nodes, matrix = net.nodes_, net.matrix_
    n = nodes.n
    if "matrix.txt" in which:
        with out.open("matrix.txt") as fh:
            export_matrix(matrix, fh)
        out.table("fig10.tsv", ["block", "nonzero", "cells", "percent"],
                  ([b, nz, cells, fmt_decimal(Fraction(100 * nz, cells), 2) if cells else ""]
                   for b, nz, cells in block_density(matrix)))
        deps = matrix.departures
        dep_total = [int(x) for x in deps.sum(axis=1).A1]
        rows = []
        for i in range(2 * n):
            kind = "hospital" if i < n else "community"
            rows.append([i + 1, kind, nodes.hospitals[i % n], nodes.states[i % n],
                         f"{matrix.los[i]:.6f}", dep_total[i]])
        out.table("nodes.tsv", ["node", "kind", "facility", "state", "mean_los", "departures"],
                  rows)
        for s, sn in net.state_networks_.items():
            if sn is None:
                continue
            with out.open(f"matrices/{s}.txt") as fh:
                export_matrix(sn.matrix, fh)
    if "table9.tsv" in which:
        rows = [_metrics_row("all", net.nodes_.n, net.metrics_)]
        for s in STATES:
            sn = net.state_networks_.get(s)
            rows.append(_metrics_row(s, sn.nodes.n, sn.metrics) if sn else [s, 0, 0] + [""] * 7)
        out.table("table9.tsv", ["network", "facilities", "nodes", "diameter", "radius",
                                 "avg_in_degree", "avg_out_degree", "density", "edges",
                                 "component_size"], rows)
        m = net.metrics_
        rows = [["in", d, c] for d, c in _degree_rows(m.in_degree[:n].tolist())]
        rows += [["out", d, c] for d, c in _degree_rows(m.out_degree[:n].tolist())]
        out.table("fig18.tsv", ["direction", "degree", "hospitals"], rows)
        out.table("fig19.tsv", ["degree", "communities"], _degree_rows(m.out_degree[n:].tolist()))


def _metrics_row(name, n_facilities, m):
    return [name, n_facilities, m.n_nodes, m.diameter, m.radius,
            fmt_decimal(m.avg_in_degree, 2), fmt_decimal(m.avg_out_degree, 2),
            fmt_decimal(m.density, 4), m.n_edges, m.component_size]


@dataclass
class RunResult:
    report: ValidationReport
    written: list[str]
    empty_network: bool = False
    excluded: list = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        if self.report.accepted == 0 or self.empty_network:
            return 2
        return 0


def run(subcommand: str, config: RunConfig) -> RunResult:
    """Run one analysis subcommand; see :data:`OUTPUTS` for the files each writes."""
    if subcommand not in OUTPUTS:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    which = set(OUTPUTS[subcommand])
    if config.input is None:
        raise ValueError("an input file is required")
    input_sha = file_sha256(config.input)
    out = OutputWriter(config, input_sha)
    records, report = parse_records(config.input)

    if subcommand == "validate":
        for _ in records:
            pass
        with out.open("validation.tsv") as fh:
            report.write(fh)
        return RunResult(report, out.written)

    transfer_fh = overlap_fh = None
    if "transfers.tsv" in which:
        transfer_fh = out.open("transfers.tsv")
        transfer_fh.write("\t".join(TRANSFER_COLUMNS) + "\n")
    if "overlaps.tsv" in which:
        overlap_fh = out.open("overlaps.tsv")
        overlap_fh.write("\t".join(OVERLAP_COLUMNS) + "\n")
    analysis = Analysis(config, transfer_fh, overlap_fh)
    try:
        for _, patient in group_by_patient(records, memory_mb=config.memory_mb / 2,
                                           spill_dir=config.spill_dir):
            analysis.add(patient)
            if analysis.n_patients % 500_000 == 0:
                log.info("processed %d patients", analysis.n_patients)
    finally:
        for fh in (transfer_fh, overlap_fh):
            if fh is not None:
                fh.close()
    log.info("accepted %d of %d rows, %d patients", report.accepted, report.total_rows,
             analysis.n_patients)

    if "validation.tsv" in which:
        with out.open("validation.tsv") as fh:
            report.write(fh)
    if "table4.tsv" in which:
        _transfer_tables(analysis, out)
    if "table6.tsv" in which:
        _overlap_tables(analysis, out)
    if "table1.tsv" in which:
        _stats_tables(analysis, out)

    result = RunResult(report, out.written)
    if which & {"matrix.txt", "table9.tsv"}:
        table = analysis.table.build()
        analysis = None
        net = TransferNetwork(
            inactivity_days=config.inactivity_days, inactivity_mode=config.inactivity_mode,
            count_overlap_transfers_as_direct=config.count_overlap_transfers_as_direct,
            community_los=config.community_los, distance_scope=config.distance_scope,
            window=config.window, per_state=True)
        try:
            if len(table) == 0:
                raise EmptyNetworkError([])
            net.fit(table)
            excluded = net.nodes_.excluded
        except EmptyNetworkError as exc:
            log.error("empty network: %s", exc)
            net, excluded = None, exc.excluded
            result.empty_network = True
        result.excluded = excluded
        _network_outputs(net, excluded, out, which)
        result.written = out.written
    return result


__all__ = ["Analysis", "OUTPUTS", "RunConfig", "RunResult", "file_sha256", "fmt_decimal",
           "run", "stamp"]
