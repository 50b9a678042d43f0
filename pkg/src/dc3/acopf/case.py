"""MATPOWER case files: parsing, writing back, and the nodal admittance matrix.

Only the columns the optimal power flow needs are interpreted; every parsed
row is kept whole so a case round-trips through :func:`format_matpower_case`.
Quantities stay in the file's units (MW, MVAr, degrees) until
:func:`build_admittance` or the family builder converts them to per-unit.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..errors import ParseError, UnsupportedCostError

LOAD, GENERATOR, REFERENCE = 1, 2, 3

# column positions (0-based) in the MATPOWER tables
BUS_I, BUS_TYPE, PD, QD, GS, BS, VM, VA, VMAX, VMIN = 0, 1, 2, 3, 4, 5, 7, 8, 11, 12
GEN_BUS, PG, QG, QMAX, QMIN, GEN_STATUS, PMAX, PMIN = 0, 1, 2, 3, 4, 7, 8, 9
F_BUS, T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 8, 9, 10

MIN_COLUMNS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}
TABLES = ("bus", "gen", "branch", "gencost")


@dataclass
class PowerCase:
    baseMVA: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    gencost: np.ndarray
    name: str = "case"

    @property
    def n_bus(self) -> int:
        return self.bus.shape[0]

    def bus_index(self) -> dict[int, int]:
        return {int(b): i for i, b in enumerate(self.bus[:, BUS_I])}

    def online_gen(self) -> np.ndarray:
        return np.flatnonzero(self.gen[:, GEN_STATUS] > 0)

    def bus_sets(self):
        """Index arrays (into the bus table) of load, reference and generator buses.

        A bus counts as a generator or reference bus only if an in-service
        generator sits on it; a PV bus without one behaves as a load bus.
        """
        idx = self.bus_index()
        has_gen = np.zeros(self.n_bus, dtype=bool)
        for g in self.online_gen():
            has_gen[idx[int(self.gen[g, GEN_BUS])]] = True
        kind = self.bus[:, BUS_TYPE].astype(int)
        ref = np.flatnonzero(kind == REFERENCE)
        gens = np.flatnonzero((kind == GENERATOR) & has_gen)
        loads = np.setdiff1d(np.arange(self.n_bus), np.concatenate([ref, gens]))
        return loads, ref, gens

    def equals(self, other: "PowerCase") -> bool:
        return (self.baseMVA == other.baseMVA
                and all(np.array_equal(getattr(self, t), getattr(other, t)) for t in TABLES))


_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([^;]+);")


def parse_matpower_case(text: str, name: str = "case") -> PowerCase:
    """Parse the body of a MATPOWER case file.

    Raises :class:`ParseError` naming the table and line on missing tables,
    short rows, ragged rows or non-numeric fields.
    """
    lines = [ln.split("%", 1)[0] for ln in text.splitlines()]
    base = None
    tables: dict[str, np.ndarray] = {}
    i = 0
    while i < len(lines):
        line = lines[i]
        m = _SCALAR_RE.search(line)
        if m:
            try:
                base = float(m.group(1))
            except ValueError:
                raise ParseError(f"baseMVA is not a number: {m.group(1).strip()!r}", i + 1, "baseMVA") from None
        m = _TABLE_RE.search(line)
        if m and m.group(1) in TABLES:
            table = m.group(1)
            rows, i = _read_table(lines, i, m.end(), table)
            tables[table] = rows
            continue
        i += 1
    if base is None:
        raise ParseError("missing baseMVA", None, "baseMVA")
    if base <= 0:
        raise ParseError(f"baseMVA must be positive, got {base}", None, "baseMVA")
    for table in TABLES:
        if table not in tables:
            raise ParseError("missing table", None, table)
    case = PowerCase(base, tables["bus"], tables["gen"], tables["branch"], tables["gencost"], name)
    _validate(case)
    return case


def _read_table(lines, start, col, table):
    rows, row_lines = [], []
    current: list[float] = []
    i = start
    text = lines[i][col:]
    while True:
        closed = "]" in text
        body = text.split("]", 1)[0]
        for j, chunk in enumerate(body.split(";")):
            if j > 0 and current:
                rows.append(current)
                row_lines.append(i + 1)
                current = []
            for tok in chunk.replace(",", " ").split():
                try:
                    current.append(float(tok))
                except ValueError:
                    raise ParseError(f"non-numeric field {tok!r}", i + 1, table) from None
        if current and not closed:
            # MATPOWER allows a newline to end a row as well
            rows.append(current)
            row_lines.append(i + 1)
            current = []
        if closed:
            if current:
                rows.append(current)
                row_lines.append(i + 1)
            break
        i += 1
        if i >= len(lines):
            raise ParseError("table is not closed with ']'", start + 1, table)
        text = lines[i]
    need = MIN_COLUMNS[table]
    width = None
    for row, ln in zip(rows, row_lines):
        if len(row) < need:
            raise ParseError(f"row has {len(row)} columns, {need} required", ln, table)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(f"row has {len(row)} columns, previous rows have {width}", ln, table)
    if not rows:
        raise ParseError("table is empty", start + 1, table)
    return np.array(rows, dtype=np.float64), i + 1


def _validate(case: PowerCase) -> None:
    idx = case.bus_index()
    if len(idx) != case.n_bus:
        raise ParseError("duplicate bus ids", None, "bus")
    kinds = set(case.bus[:, BUS_TYPE].astype(int))
    if not kinds <= {LOAD, GENERATOR, REFERENCE}:
        raise ParseError(f"unsupported bus types {sorted(kinds - {LOAD, GENERATOR, REFERENCE})}", None, "bus")
    if REFERENCE not in kinds:
        raise ParseError("no reference bus", None, "bus")
    for k, b in enumerate(case.gen[:, GEN_BUS].astype(int)):
        if b not in idx:
            raise ParseError(f"generator {k + 1} references unknown bus {b}", None, "gen")
    for k, (f, t) in enumerate(case.branch[:, [F_BUS, T_BUS]].astype(int)):
        if f not in idx or t not in idx:
            raise ParseError(f"branch {k + 1} references unknown bus", None, "branch")
    if case.gencost.shape[0] < case.gen.shape[0]:
        raise ParseError("fewer gencost rows than generators", None, "gencost")


def cost_coefficients(case: PowerCase) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic and linear cost coefficients ($/MW^2h, $/MWh) per generator row.

    Only polynomial costs (model 2) of degree at most two are supported; the
    constant term is dropped since it does not move the optimum.
    """
    quad = np.zeros(case.gen.shape[0])
    lin = np.zeros(case.gen.shape[0])
    for k in range(case.gen.shape[0]):
        row = case.gencost[k]
        model, ncoef = int(row[0]), int(row[3])
        if model != 2:
            raise UnsupportedCostError(f"generator {k + 1}: cost model {model} is not polynomial")
        if ncoef > 3:
            raise UnsupportedCostError(f"generator {k + 1}: polynomial degree {ncoef - 1} > 2")
        if row.size < 4 + ncoef:
            raise ParseError(f"gencost row {k + 1} has fewer than {ncoef} coefficients", None, "gencost")
        coef = np.zeros(3)
        coef[3 - ncoef:] = row[4:4 + ncoef]
        quad[k], lin[k] = coef[0], coef[1]
    return quad, lin


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(float(v))


def format_matpower_case(case: PowerCase) -> str:
    out = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(case.baseMVA)};"]
    for table in TABLES:
        out.append(f"mpc.{table} = [")
        for row in getattr(case, table):
            out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
        out.append("];")
    return "\n".join(out) + "\n"


def load_case(name: str = "case57") -> PowerCase:
    """Load a case bundled with the package."""
    text = resources.files("dc3.acopf").joinpath("data", f"{name}.m").read_text()
    return parse_matpower_case(text, name)


@dataclass
class AdmittanceModel:
    W_r: np.ndarray
    W_i: np.ndarray

    @property
    def W(self) -> np.ndarray:
        return self.W_r + 1j * self.W_i


def build_admittance(case: PowerCase) -> AdmittanceModel:
    """Per-unit bus admittance matrix with the standard pi branch model."""
    nb = case.n_bus
    idx = case.bus_index()
    W = np.zeros((nb, nb), dtype=complex)
    for row in case.branch:
        if row[BR_STATUS] <= 0:
            continue
        f, t = idx[int(row[F_BUS])], idx[int(row[T_BUS])]
        ys = 1.0 / complex(row[BR_R], row[BR_X])
        ratio = row[TAP] if row[TAP] != 0 else 1.0
        tap = ratio * np.exp(1j * np.deg2rad(row[SHIFT]))
        ytt = ys + 0.5j * row[BR_B]
        W[f, f] += ytt / (tap * np.conj(tap))
        W[f, t] += -ys / np.conj(tap)
        W[t, f] += -ys / tap
        W[t, t] += ytt
    W[np.diag_indices(nb)] += (case.bus[:, GS] + 1j * case.bus[:, BS]) / case.baseMVA
    return AdmittanceModel(W.real.copy(), W.imag.copy())
