"""Seeded synthetic cohorts of hospital stays.

Every patient alternates hospital stays and gaps until the observation
window closes. Randomness comes from numpy's Philox counter-based generator
keyed by ``seed * 2**64 + block``, where blocks are fixed runs of
:data:`BLOCK_SIZE` patients, so output depends only on the configuration
and never on how many worker processes produced it.
"""
from __future__ import annotations

import configparser
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from datetime import date
from typing import IO, Iterable, Iterator

import numpy as np

from .overlaps import OverlapClass
from .records import STATE_RANK, STATES, StayRecord, sort_key

log = logging.getLogger(__name__)

BLOCK_SIZE = 4096
_INJECT_DOMAIN = 1 << 63

# resident population in millions, used to place patients
POPULATION = {
    "NW": 17.93, "BY": 13.12, "BW": 11.10, "NI": 7.99, "HE": 6.29, "RP": 4.09,
    "SN": 4.07, "BE": 3.67, "SH": 2.90, "BB": 2.52, "ST": 2.19, "TH": 2.13,
    "HH": 1.85, "MV": 1.61, "SL": 0.99, "HB": 0.68,
}
DEFAULT_FACILITIES = {s: max(2, round(p)) for s, p in POPULATION.items()}

# overlaps injected per 1000 generated stays
DEFAULT_OVERLAP_RATES = {
    OverlapClass.STANDARD_TRANSFER: 15.0,
    OverlapClass.FIRST_DAY_TRANSFER: 2.0,
    OverlapClass.LAST_DAY_TRANSFER: 2.0,
    OverlapClass.TEMPORARY_TRANSFER: 2.0,
    OverlapClass.TWO_ENTRIES_SINGLE_INSTITUTION: 10.0,
    OverlapClass.SIMULTANEOUS_SINGLE_INSTITUTION: 1.0,
    OverlapClass.SIMULTANEOUS_TWO_INSTITUTIONS: 1.0,
    OverlapClass.UNKNOWN_TWO_INSTITUTIONS: 1.0,
    OverlapClass.UNKNOWN_MULTIPLE_ENTRIES: 0.5,
}

DIAGNOSES = (
    "I21.0", "I50.0", "I63.5", "I48.0", "I10", "I25.1", "F10.2", "F20.0", "F32.2",
    "F33.1", "C34.1", "C50.9", "C18.7", "D50.0", "E11.9", "E86", "G40.9", "G45.9",
    "H25.1", "H66.9", "J18.9", "J44.1", "K80.2", "K35.8", "L03.1", "M54.5", "M17.1",
    "N39.0", "N18.5", "O80", "O70.0", "P07.3", "Q21.1", "R55", "R07.4", "S72.0",
    "S06.0", "T84.5", "Z38.0", "Z51.1", "A41.9", "B99",
)
_DIAG_WEIGHTS = np.array([
    30, 25, 20, 20, 10, 15, 25, 10, 12, 10, 12, 10, 8, 5, 10, 6, 8, 6,
    6, 3, 20, 15, 10, 8, 5, 10, 8, 10, 5, 12, 4, 3, 1, 8, 10, 10,
    8, 4, 8, 6, 8, 2,
], dtype=float)
_DIAG_P = _DIAG_WEIGHTS / _DIAG_WEIGHTS.sum()
SEX_P = (0.535, 0.46, 0.005)


class ConfigError(ValueError):
    """Invalid generator configuration."""


def _default_rates():
    return {c: 0.0 for c in OverlapClass}


@dataclass
class GeneratorConfig:
    seed: int = 42
    n_patients: int = 10_000
    facilities_per_state: dict = field(default_factory=lambda: dict(DEFAULT_FACILITIES))
    window: tuple = (date(2013, 1, 1), date(2018, 8, 31))
    mean_los_days: float = 8.7
    mean_home_gap_days: float = 270.0
    p_direct_transfer: float = 0.08
    p_auto_readmission: float = 0.5
    p_readmission: float = 0.5
    overlap_injection: dict = field(default_factory=lambda: dict(DEFAULT_OVERLAP_RATES))
    interstate_rate: float = 0.09
    max_los_days: int = 400
    birth_year_range: tuple = (1920, 2013)

    def validate(self) -> "GeneratorConfig":
        for name in ("p_direct_transfer", "p_auto_readmission", "p_readmission", "interstate_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.mean_los_days < 1:
            raise ConfigError("mean_los_days must be at least 1")
        if self.mean_home_gap_days < 2:
            raise ConfigError("mean_home_gap_days must be at least 2")
        if self.max_los_days < 1:
            raise ConfigError("max_los_days must be at least 1")
        if not self.window[0] < self.window[1]:
            raise ConfigError("window start must precede window end")
        if self.n_patients < 0:
            raise ConfigError("n_patients must be non-negative")
        unknown = set(self.facilities_per_state) - set(STATES)
        if unknown:
            raise ConfigError(f"unknown states: {sorted(unknown)}")
        for s, n in self.facilities_per_state.items():
            if n < 0:
                raise ConfigError(f"negative facility count for {s}")
        if self.n_patients > 0:
            empty = [s for s in STATES if POPULATION[s] > 0 and self.facilities_per_state.get(s, 0) == 0]
            if empty:
                raise ConfigError(f"no facilities configured for states with patients: {', '.join(empty)}")
        for klass, rate in self.overlap_injection.items():
            if not 0 <= rate <= 1000:
                raise ConfigError(f"injection rate for {klass} must lie in [0, 1000]")
        lo, hi = self.birth_year_range
        if lo > hi:
            raise ConfigError("birth_year_range is inverted")
        return self

    # flat key=value files ----------------------------------------------------------

    def to_text(self) -> str:
        lines = [
            f"seed = {self.seed}",
            f"n_patients = {self.n_patients}",
            f"window_start = {self.window[0].isoformat()}",
            f"window_end = {self.window[1].isoformat()}",
            f"mean_los_days = {self.mean_los_days}",
            f"mean_home_gap_days = {self.mean_home_gap_days}",
            f"p_direct_transfer = {self.p_direct_transfer}",
            f"p_auto_readmission = {self.p_auto_readmission}",
            f"p_readmission = {self.p_readmission}",
            f"interstate_rate = {self.interstate_rate}",
            f"max_los_days = {self.max_los_days}",
            f"birth_year_min = {self.birth_year_range[0]}",
            f"birth_year_max = {self.birth_year_range[1]}",
        ]
        lines += [f"facilities.{s} = {self.facilities_per_state.get(s, 0)}" for s in STATES]
        lines += [f"overlap.{c.value} = {self.overlap_injection.get(c, 0.0)}" for c in OverlapClass]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "GeneratorConfig":
        def read(source):
            parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
            parser.optionxform = str
            parser.read_string(source, source="<config>")
            return parser

        try:
            # the section header is optional; bare ``key = value`` lines are accepted
            try:
                parser = read("[generator]\n" + text)
            except configparser.DuplicateSectionError:
                parser = read(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        extra = [name for name in parser.sections() if name != "generator"]
        if extra:
            raise ConfigError(f"unknown config sections: {', '.join(extra)}")
        cfg = cls()
        facilities = dict(cfg.facilities_per_state)
        rates = dict(cfg.overlap_injection)
        window = list(cfg.window)
        years = list(cfg.birth_year_range)
        scalars = {f.name: f.type for f in fields(cls)}
        values = {}
        try:
            for key, raw in parser["generator"].items():
                if key.startswith("facilities."):
                    state = key.split(".", 1)[1]
                    if state not in STATE_RANK:
                        raise ConfigError(f"unknown state in {key}")
                    facilities[state] = int(raw)
                elif key.startswith("overlap."):
                    rates[OverlapClass(key.split(".", 1)[1])] = float(raw)
                elif key == "window_start":
                    window[0] = date.fromisoformat(raw)
                elif key == "window_end":
                    window[1] = date.fromisoformat(raw)
                elif key == "birth_year_min":
                    years[0] = int(raw)
                elif key == "birth_year_max":
                    years[1] = int(raw)
                elif key in ("seed", "n_patients", "max_los_days"):
                    values[key] = int(raw)
                elif key in scalars and key not in ("facilities_per_state", "overlap_injection", "window"):
                    values[key] = float(raw)
                else:
                    raise ConfigError(f"unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        cfg = replace(cfg, facilities_per_state=facilities, overlap_injection=rates,
                      window=tuple(window), birth_year_range=tuple(years), **values)
        return replace(cfg, **overrides).validate()

    @classmethod
    def from_file(cls, path, **overrides) -> "GeneratorConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(seed % (1 << 64)) * (1 << 64) + stream))


class _Layout:
    """Facility numbering and destination tables derived from a config."""

    def __init__(self, cfg: GeneratorConfig):
        self.counts = np.array([cfg.facilities_per_state.get(s, 0) for s in STATES], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.n_facilities = int(self.counts.sum())
        self.state_of = np.repeat(np.arange(len(STATES)), self.counts)
        self.ids = [f"F{i:05d}" for i in range(self.n_facilities)]
        pop = np.array([POPULATION[s] for s in STATES])
        pop = np.where(self.counts > 0, pop, 0.0)
        self.home_p = pop / pop.sum() if pop.sum() > 0 else None
        # row s: cumulative probabilities of moving to another state
        w = np.tile(self.counts.astype(float), (len(STATES), 1))
        np.fill_diagonal(w, 0.0)
        sums = w.sum(axis=1, keepdims=True)
        self.can_leave = sums.ravel() > 0
        self.leave_cum = np.cumsum(np.divide(w, sums, out=np.zeros_like(w), where=sums > 0), axis=1)


def _pick_other_state(layout, state, u):
    cum = layout.leave_cum[state]
    return np.minimum((u[:, None] >= cum).sum(axis=1), len(STATES) - 1)


def _generate_block(cfg: GeneratorConfig, block: int):
    """Arrays (patient, facility, admission, discharge, diagnosis, sex, birth_year) for one block."""
    layout = _Layout(cfg)
    lo = block * BLOCK_SIZE
    n_real = min(cfg.n_patients, lo + BLOCK_SIZE) - lo
    # a block always simulates BLOCK_SIZE patients so that every patient's
    # stays depend only on (seed, patient index), never on n_patients
    m = BLOCK_SIZE
    rng = _rng(cfg.seed, block)
    ws, we = cfg.window[0].toordinal(), cfg.window[1].toordinal()

    home = rng.choice(len(STATES), size=m, p=layout.home_p)
    sex = rng.choice(3, size=m, p=SEX_P)
    birth = rng.integers(cfg.birth_year_range[0], cfg.birth_year_range[1] + 1, size=m)
    fac = layout.offsets[home] + np.floor(rng.random(m) * layout.counts[home]).astype(np.int64)
    adm = ws + rng.integers(0, we - ws + 1, size=m)
    who = np.arange(m)

    mu = max(cfg.mean_home_gap_days - 1.5, 0.5)
    short, long_ = min(60.0, mu), max(400.0, mu)
    w_short = 1.0 if long_ == short else (long_ - mu) / (long_ - short)
    r = cfg.interstate_rate
    r_other = min(1.0, r / (1.0 - cfg.p_auto_readmission)) if cfg.p_auto_readmission < 1 else 0.0

    out = []
    step = 0
    while who.size:
        k = who.size
        los = np.minimum(rng.geometric(1.0 / cfg.mean_los_days, size=k), cfg.max_los_days)
        dis = np.minimum(adm + los, we)
        diag = rng.choice(len(DIAGNOSES), size=k, p=_DIAG_P)
        out.append((who, np.full(k, step), fac, adm, dis, diag))

        u_direct, u_return, u_mix, u_auto, u_cross, u_state, u_fac = rng.random((7, k))
        x = np.where(u_mix < w_short, rng.exponential(short, k), rng.exponential(long_, k))
        direct = u_direct < cfg.p_direct_transfer
        cont = direct | (u_return < cfg.p_readmission)
        gap = np.where(direct, 1, 2 + np.floor(x).astype(np.int64))
        nxt = dis + gap

        state = layout.state_of[fac]
        auto = ~direct & (u_auto < cfg.p_auto_readmission)
        cross_p = np.where(direct, r, r_other)
        single = layout.counts[state] < 2
        cross = ~auto & ((u_cross < cross_p) | single) & layout.can_leave[state]
        new_state = np.where(cross, _pick_other_state(layout, state, u_state), state)
        local = fac - layout.offsets[state]
        n_here = layout.counts[state]
        same_state_fac = layout.offsets[state] + (local + 1 + np.floor(u_fac * (n_here - 1)).astype(np.int64)) % n_here
        other_fac = layout.offsets[new_state] + np.floor(u_fac * layout.counts[new_state]).astype(np.int64)
        dest = np.where(auto, fac, np.where(cross, other_fac, same_state_fac))

        keep = cont & (nxt <= we)
        who, fac, adm = who[keep], dest[keep], nxt[keep]
        step += 1

    if out:
        cols = [np.concatenate(c) for c in zip(*out)]
    else:
        cols = [np.zeros(0, dtype=np.int64)] * 6
    who, steps, fac, adm, dis, diag = cols
    real = who < n_real
    who, steps, fac, adm, dis, diag = (c[real] for c in (who, steps, fac, adm, dis, diag))
    order = np.lexsort((steps, who))
    who = who[order]
    return (lo + who, fac[order], adm[order], dis[order], diag[order], sex[who], birth[who])


def _blocks(cfg: GeneratorConfig, workers: int = 1):
    n_blocks = -(-cfg.n_patients // BLOCK_SIZE)
    if workers <= 1 or n_blocks <= 1:
        for b in range(n_blocks):
            yield _generate_block(cfg, b)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for start in range(0, n_blocks, 4 * workers):
            batch = range(start, min(start + 4 * workers, n_blocks))
            yield from pool.map(_generate_block, [cfg] * len(batch), batch)


def generate_cohort(config: GeneratorConfig, workers: int = 1) -> Iterator[StayRecord]:
    """Stream the cohort's stays, patient by patient, each patient's stays in order."""
    config.validate()
    layout = _Layout(config)
    ids = layout.ids
    fromord = date.fromordinal
    sexes = ("f", "m", "u")
    state_codes = [STATES[s] for s in layout.state_of]
    for pid, fac, adm, dis, diag, sex, birth in _blocks(config, workers):
        pid_l, fac_l, adm_l, dis_l = pid.tolist(), fac.tolist(), adm.tolist(), dis.tolist()
        diag_l, sex_l, birth_l = diag.tolist(), sex.tolist(), birth.tolist()
        last_pid, token = None, None
        for i in range(len(pid_l)):
            p = pid_l[i]
            if p != last_pid:
                last_pid, token = p, f"P{p:08d}"
            f = fac_l[i]
            yield StayRecord(token, ids[f], state_codes[f], fromord(adm_l[i]), fromord(dis_l[i]),
                             DIAGNOSES[diag_l[i]], sexes[sex_l[i]], birth_l[i])


class _Uniforms:
    """Buffered uniform draws from one sequential generator."""

    def __init__(self, rng: np.random.Generator, size: int = 1 << 16):
        self.rng = rng
        self.size = size
        self.buf = []
        self.pos = 0

    def __call__(self) -> float:
        if self.pos >= len(self.buf):
            self.buf = self.rng.random(self.size).tolist()
            self.pos = 0
        self.pos += 1
        return self.buf[self.pos - 1]

    def int(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]``."""
        return lo + min(int(self() * (hi - lo + 1)), hi - lo)


def _other_facility(host: StayRecord, cfg: GeneratorConfig, layout: _Layout, u: _Uniforms):
    """Partner facility for an injected record: another state with
    probability ``interstate_rate``, otherwise the host's own state."""
    s = STATE_RANK[host.state]
    ids = layout.ids
    lo, hi = int(layout.offsets[s]), int(layout.offsets[s] + layout.counts[s])
    cross = u() < cfg.interstate_rate
    if (cross and layout.can_leave[s]) or hi - lo < 2:
        outside = layout.n_facilities - (hi - lo)
        if outside == 0:
            choices = range(lo, hi)
        else:
            k = u.int(0, outside - 1)
            f = k if k < lo else k + (hi - lo)
            return ids[f], STATES[layout.state_of[f]]
    else:
        choices = range(lo, hi)
    while True:
        f = choices[u.int(0, len(choices) - 1)]
        if ids[f] != host.facility_id:
            return ids[f], STATES[layout.state_of[f]]


def _geometry(klass: OverlapClass, host: StayRecord, room: int, u: _Uniforms):
    """Date ranges (as day offsets from host admission) plus same-facility flags
    for the records to add, or None if the host cannot carry this class."""
    los = (host.discharge - host.admission).days
    if klass is OverlapClass.STANDARD_TRANSFER:
        if los < 1 or room < 1:
            return None
        return [(los, los + u.int(1, min(room, 7)), False)]
    if klass is OverlapClass.FIRST_DAY_TRANSFER:
        return None if los < 1 else [(0, 0, False)]
    if klass is OverlapClass.LAST_DAY_TRANSFER:
        return None if los < 1 else [(los, los, False)]
    if klass is OverlapClass.TEMPORARY_TRANSFER:
        if los < 2:
            return None
        j = u.int(1, los - 1)
        return [(j, j + u.int(0, los - 1 - j), False)]
    if klass is OverlapClass.TWO_ENTRIES_SINGLE_INSTITUTION:
        return None if los < 1 else [(u.int(1, los), los, True)]
    if klass is OverlapClass.SIMULTANEOUS_SINGLE_INSTITUTION:
        return [(0, los, True)]
    if klass is OverlapClass.SIMULTANEOUS_TWO_INSTITUTIONS:
        return [(0, los, False)]
    if klass is OverlapClass.UNKNOWN_TWO_INSTITUTIONS:
        if los < 1 or room < 1:
            return None
        return [(u.int(0, los - 1), los + u.int(1, min(room, 7)), False)]
    if klass is OverlapClass.UNKNOWN_MULTIPLE_ENTRIES:
        if los < 1:
            return None
        return [(u.int(1, los), los, True), (0, los, False)]
    raise ValueError(klass)


# classes whose geometry never involves a second facility
_SINGLE_FACILITY = frozenset({
    OverlapClass.TWO_ENTRIES_SINGLE_INSTITUTION,
    OverlapClass.SIMULTANEOUS_SINGLE_INSTITUTION,
})


class InjectionManifest(list):
    """``(patient_id, OverlapClass)`` for every injected overlap."""

    def write(self, fh: IO[str]) -> None:
        fh.write("patient_id\tclass\n")
        for pid, klass in self:
            fh.write(f"{pid}\t{klass.value}\n")

    @classmethod
    def read(cls, fh: Iterable[str]) -> "InjectionManifest":
        out = cls()
        for line in fh:
            if line.startswith("#") or line.startswith("patient_id\t"):
                continue
            pid, klass = line.rstrip("\n").split("\t")
            out.append((pid, OverlapClass(klass)))
        return out


def inject_overlaps(records: Iterable[StayRecord], config: GeneratorConfig):
    """Add overlapping records of each taxonomy class at the configured rates.

    Every stay is a candidate host for each class with probability
    ``rate / 1000``; a host takes at most one injection and only when the
    class geometry fits between its neighbours. Input must come patient by
    patient with non-overlapping stays (as :func:`generate_cohort` emits).
    Returns ``(records, manifest)``; the manifest fills in as records are
    consumed.
    """
    manifest = InjectionManifest()
    return _inject(records, config, manifest), manifest


def _inject(records, cfg: GeneratorConfig, manifest: InjectionManifest):
    rates = [(c, cfg.overlap_injection.get(c, 0.0) / 1000.0) for c in OverlapClass]
    rates = [(c, p) for c, p in rates if p > 0]
    if not rates:
        yield from records
        return
    layout = _Layout(cfg)
    u = _Uniforms(_rng(cfg.seed, _INJECT_DOMAIN))
    we = cfg.window[1]
    batch: list[StayRecord] = []
    for r in records:
        if batch and r.patient_id != batch[0].patient_id:
            yield from _inject_patient(batch, rates, cfg, layout, u, we, manifest)
            batch = []
        batch.append(r)
    if batch:
        yield from _inject_patient(batch, rates, cfg, layout, u, we, manifest)


def _inject_patient(stays, rates, cfg, layout, u, window_end, manifest):
    added = []
    for i, host in enumerate(stays):
        limit = stays[i + 1].admission.toordinal() - 1 if i + 1 < len(stays) else window_end.toordinal()
        room = limit - host.discharge.toordinal()
        for klass, p in rates:
            if u() >= p:
                continue
            if layout.n_facilities < 2 and klass not in _SINGLE_FACILITY:
                continue
            shape = _geometry(klass, host, room, u)
            if shape is None:
                continue
            base = host.admission.toordinal()
            for start, end, same_facility in shape:
                if same_facility:
                    fac, state = host.facility_id, host.state
                else:
                    fac, state = _other_facility(host, cfg, layout, u)
                diag = host.diagnosis if u() < 0.5 else DIAGNOSES[u.int(0, len(DIAGNOSES) - 1)]
                added.append(StayRecord(host.patient_id, fac, state,
                                        date.fromordinal(base + start), date.fromordinal(base + end),
                                        diag, host.sex, host.birth_year))
            manifest.append((host.patient_id, klass))
            break
    if not added:
        return stays
    return sorted(stays + added, key=sort_key)


def make_cohort(config: GeneratorConfig | None = None, workers: int = 1):
    """Generate and inject in one call: ``(records, manifest)`` as lists."""
    config = config or GeneratorConfig()
    records, manifest = inject_overlaps(generate_cohort(config, workers), config)
    records = list(records)
    return records, manifest


def write_cohort(config: GeneratorConfig, fh: IO[str], manifest_fh: IO[str] | None = None,
                 workers: int = 1) -> int:
    from .records import format_record, COLUMNS

    records, manifest = inject_overlaps(generate_cohort(config, workers), config)
    fh.write("\t".join(COLUMNS) + "\n")
    n = 0
    write = fh.write
    for r in records:
        write(format_record(r) + "\n")
        n += 1
    if manifest_fh is not None:
        manifest.write(manifest_fh)
    log.info("generated %d records for %d patients", n, config.n_patients)
    return n
