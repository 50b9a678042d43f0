"""Experiment runner: datasets, per-cell training and evaluation, reports, sweeps.

A run directory looks like::

    config.toml        the config file as given (when loaded from a file)
    resolved.toml      the effective configuration
    data/              family, instances, labels and the reference solutions
    cells/<variant>/seed-<k>/
        checkpoint.bin history.csv eval.csv timing.csv failure.txt
    report.md report.csv timing.csv failures.csv

Everything except the timing files and the Markdown table (which carries the
time column) is a deterministic function of the configuration.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import toml

from .engine import Dc3Config, Variant, default_config, evaluate, train, with_overrides
from .errors import ContractError, Dc3Error
from .nn import load_checkpoint, save_checkpoint
from .problems import (InstanceSet, generate_qp_family, load_family, load_instances,
                       sample_instances, save_family, save_instances)
from .serialization import read_arrays, write_arrays
from .solvers import OPTIMAL, BarrierSettings, make_labels

log = logging.getLogger(__name__)

TASKS = ("qp", "nonconvex", "acopf")
SWEEP_AXES = ("n_eq", "n_ineq")
REFERENCE = "Optimizer"
SUMMARY_KEYS = ("obj", "max_eq", "mean_eq", "max_ineq", "mean_ineq", "worst_eq", "worst_ineq",
                "converged", "gap")
# columns of the Markdown table: (summary key, header)
TABLE_COLUMNS = (("obj", "Obj. value"), ("max_eq", "Max eq."), ("mean_eq", "Mean eq."),
                 ("max_ineq", "Max ineq."), ("mean_ineq", "Mean ineq."), ("time", "Time (s)"))

_SECTIONS = {
    "problem": ("n", "n_eq", "n_ineq", "case", "family_seed"),
    "data": ("count", "data_seed"),
}
_TOP = ("task", "variants", "seeds", "output", "reference")


@dataclass
class RunConfig:
    task: str = "qp"
    n: int = 100
    n_eq: int = 50
    n_ineq: int = 50
    case: str = "case57"
    family_seed: int = 0
    count: int = 10000
    data_seed: int = 1
    variants: list = field(default_factory=lambda: [Variant.DC3.value])
    seeds: list = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)
    reference: bool = True
    output: str = "runs/dc3"
    source: str | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not self.variants:
            raise ContractError("at least one variant is required")
        if not self.seeds:
            raise ContractError("at least one seed is required")
        self.variants = [Variant(v).value for v in self.variants]
        self.seeds = [int(s) for s in self.seeds]
        if self.task != "acopf":
            if self.n < 1 or self.n_eq < 0 or self.n_ineq < 0 or self.n_eq >= self.n:
                raise ContractError(f"bad dimensions n={self.n} n_eq={self.n_eq} n_ineq={self.n_ineq}")
        if self.count < 3:
            raise ContractError("count must allow a train/val/test split")
        known = {f.name for f in fields(Dc3Config)} - {"variant"}
        unknown = set(self.train) - known
        if unknown:
            raise ContractError(f"unknown training options {sorted(unknown)}")

    @classmethod
    def from_dict(cls, raw: dict, source: str | None = None) -> "RunConfig":
        raw = dict(raw)
        flat = {}
        for section, keys in _SECTIONS.items():
            sub = dict(raw.pop(section, {}))
            for key in keys:
                if key in sub:
                    flat[key] = sub.pop(key)
            if sub:
                raise ContractError(f"unknown keys in [{section}]: {sorted(sub)}")
        train_opts = dict(raw.pop("train", {}))
        for key in _TOP:
            if key in raw:
                flat[key] = raw.pop(key)
        if raw:
            raise ContractError(f"unknown config keys {sorted(raw)}")
        return cls(train=train_opts, source=source, **flat)

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        try:
            raw = toml.loads(text)
        except toml.TomlDecodeError as exc:
            raise ContractError(f"{path}: {exc}") from None
        return cls.from_dict(raw, source=text)

    def to_dict(self) -> dict:
        out = {key: getattr(self, key) for key in _TOP}
        for section, keys in _SECTIONS.items():
            out[section] = {key: getattr(self, key) for key in keys}
        out["train"] = dict(self.train)
        return out

    def to_toml(self) -> str:
        return toml.dumps(self.to_dict())

    def with_changes(self, **kw) -> "RunConfig":
        return replace(self, source=None, **kw)

    def dc3_config(self, variant) -> Dc3Config:
        return with_overrides(default_config(self.task, variant), **self.train)

    def data_key(self) -> str:
        """Text identifying the generated data; a change invalidates ``data/``."""
        keys = {"task": self.task, "count": self.count, "data_seed": self.data_seed}
        if self.task == "acopf":
            keys["case"] = self.case
        else:
            keys.update(n=self.n, n_eq=self.n_eq, n_ineq=self.n_ineq, family_seed=self.family_seed)
        return toml.dumps(keys)


# ------------------------------------------------------------------ data

@dataclass
class Workspace:
    family: object
    data: InstanceSet
    f_ref: np.ndarray | None = None
    reference: dict | None = None


def build_family(cfg: RunConfig):
    if cfg.task == "acopf":
        from .acopf import AcopfFamily, load_case, parse_matpower_case
        path = Path(cfg.case)
        if path.suffix == ".m" or path.exists():
            case = parse_matpower_case(path.read_text(), path.stem)
        else:
            case = load_case(cfg.case)
        return AcopfFamily(case)
    kind = "quadratic" if cfg.task == "qp" else "sine"
    return generate_qp_family(cfg.family_seed, cfg.n, cfg.n_eq, cfg.n_ineq, kind)


def _solver_settings(cfg):
    # ACOPF labels take a single barrier start; see the solver notes in the README
    return BarrierSettings(starts=1) if cfg.task == "acopf" else None


def prepare(cfg: RunConfig, labels: bool | None = None) -> Workspace:
    """Generate (or reload) the family, the instances, labels and reference solutions."""
    root = Path(cfg.output) / "data"
    root.mkdir(parents=True, exist_ok=True)
    key_path = root / "data.toml"
    fresh = not key_path.exists() or key_path.read_text() != cfg.data_key()
    if labels is None:
        labels = any(Variant(v).needs_labels for v in cfg.variants)
    family = None
    if not fresh and cfg.task != "acopf":
        family = load_family(root)
    if family is None:
        family = build_family(cfg)
    if fresh:
        for stale in ("dataset.txt", "dataset.bin", "reference.bin", "reference.csv", "reference_timing.csv"):
            (root / stale).unlink(missing_ok=True)
        if cfg.task != "acopf":
            save_family(root, family)
        data = sample_instances(family, cfg.count, cfg.data_seed)
        save_instances(root, data)
        key_path.write_text(cfg.data_key())
    else:
        data = load_instances(root)
    if labels and data.labels is None:
        log.info("labeling %d instances", len(data))
        data.labels = make_labels(family, data.X, barrier=_solver_settings(cfg)).Y
        save_instances(root, data)
    ws = Workspace(family, data)
    if cfg.reference:
        ws.f_ref, ws.reference = _reference(cfg, family, data, root)
    return ws


def _reference(cfg, family, data, root):
    path = root / "reference.bin"
    if path.exists():
        return read_arrays(path, kind="reference")["objective"], _load_reference(root)
    from .engine import summarize
    X, _ = data.split("test")
    settings = _solver_settings(cfg)
    make_labels(family, X[:1], barrier=settings, strict=False)  # warm-up
    t0 = time.perf_counter()
    lab = make_labels(family, X, barrier=settings, strict=False)
    elapsed = time.perf_counter() - t0
    ok = np.array([st == OPTIMAL for st in lab.status])
    if not ok.all():
        log.warning("reference solver failed on %d of %d test instances", (~ok).sum(), ok.size)
    res = summarize(family, X, lab.Y, ok, elapsed, f_ref=lab.objective)
    write_arrays(path, {"objective": lab.objective, "Y": lab.Y}, kind="reference")
    summary = {k: res.summary[k] for k in SUMMARY_KEYS}
    _write_rows(root / "reference.csv", [dict(solver=lab.solver, **summary)])
    _write_rows(root / "reference_timing.csv",
                [{"solver": lab.solver, "total": elapsed, "time_per_instance": elapsed / X.shape[0]}])
    summary["time"] = elapsed / X.shape[0]
    return lab.objective, summary


def _load_reference(root) -> dict:
    out = {k: _parse(v) for k, v in _read_rows(root / "reference.csv")[0].items() if k in SUMMARY_KEYS}
    out["time"] = float(_read_rows(root / "reference_timing.csv")[0]["time_per_instance"])
    return out


# ------------------------------------------------------------------ cells

def cell_dir(cfg: RunConfig, variant, seed: int) -> Path:
    return Path(cfg.output) / "cells" / Variant(variant).value / f"seed-{seed}"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def _write_rows(path, rows, header=None) -> None:
    header = header or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in header])


def _read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _record_failure(cfg, variant, seed, exc) -> str:
    msg = f"{type(exc).__name__}: {exc}"
    (cell_dir(cfg, variant, seed) / "failure.txt").write_text(msg + "\n")
    log.error("%s seed %d failed: %s", Variant(variant).value, seed, msg)
    return msg


def train_cell(cfg: RunConfig, ws: Workspace, variant, seed: int) -> Path:
    """Train one (variant, seed) cell; writes ``checkpoint.bin`` and ``history.csv``."""
    variant = Variant(variant)
    out = cell_dir(cfg, variant, seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "failure.txt").unlink(missing_ok=True)
    params, history = train(variant, ws.family, ws.data, cfg.dc3_config(variant), seed)
    save_checkpoint(out / "checkpoint.bin", params)
    cols = ["epoch", "train_loss", "val_obj", "val_max_eq", "val_max_ineq"]
    _write_rows(out / "history.csv", history, header=cols)
    return out


@dataclass
class Timing:
    total: float
    per_instance: float
    result: object = None


def timing_harness(params, variant, family, X, config: Dc3Config, f_ref=None) -> Timing:
    """Wall time of the full test path over ``X`` after one discarded warm-up pass."""
    evaluate(params, variant, family, X, config)
    res = evaluate(params, variant, family, X, config, f_ref=f_ref)
    return Timing(res.time, res.time / max(X.shape[0], 1), res)


def eval_cell(cfg: RunConfig, ws: Workspace, variant, seed: int) -> dict:
    """Evaluate a trained cell on the test split; writes ``eval.csv`` and ``timing.csv``."""
    variant = Variant(variant)
    out = cell_dir(cfg, variant, seed)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = cell_dir(cfg, variant.training_key, seed) / "checkpoint.bin"
    if not ckpt.exists():
        raise ContractError(f"no checkpoint for {variant.training_key} seed {seed}; train it first")
    params = load_checkpoint(ckpt)
    X, _ = ws.data.split("test")
    t = timing_harness(params, variant, ws.family, X, cfg.dc3_config(variant), ws.f_ref)
    summary = {k: t.result.summary.get(k) for k in SUMMARY_KEYS}
    _write_rows(out / "eval.csv", [dict(variant=variant.value, seed=seed, **summary)])
    _write_rows(out / "timing.csv", [{"variant": variant.value, "seed": seed, "total": t.total,
                                      "time_per_instance": t.per_instance}])
    return summary


def _cells(cfg):
    return [(Variant(v), s) for v in cfg.variants for s in cfg.seeds]


def train_all(cfg: RunConfig, ws: Workspace) -> list[tuple[str, int, str]]:
    """Train every distinct training key once per seed; returns the failed cells."""
    failed = []
    done = set()
    for variant, seed in _cells(cfg):
        key = (variant.training_key, seed)
        if key in done:
            continue
        done.add(key)
        try:
            log.info("training %s seed %d", key[0], seed)
            train_cell(cfg, ws, key[0], seed)
        except Dc3Error as exc:
            cell_dir(cfg, key[0], seed).mkdir(parents=True, exist_ok=True)
            failed.append((key[0], seed, _record_failure(cfg, key[0], seed, exc)))
    return failed


def eval_all(cfg: RunConfig, ws: Workspace) -> list[tuple[str, int, str]]:
    failed = []
    for variant, seed in _cells(cfg):
        out = cell_dir(cfg, variant, seed)
        out.mkdir(parents=True, exist_ok=True)
        upstream = cell_dir(cfg, variant.training_key, seed) / "failure.txt"
        if upstream.exists() and variant.training_key != variant.value:
            msg = upstream.read_text().strip()
            out.joinpath("failure.txt").write_text(msg + "\n")
            failed.append((variant.value, seed, msg))
            continue
        if (out / "failure.txt").exists():
            failed.append((variant.value, seed, (out / "failure.txt").read_text().strip()))
            continue
        try:
            eval_cell(cfg, ws, variant, seed)
        except Dc3Error as exc:
            failed.append((variant.value, seed, _record_failure(cfg, variant, seed, exc)))
    return failed


# ------------------------------------------------------------------ reports

@dataclass
class MethodRow:
    label: str
    variant: str
    runs: int
    failed: int
    mean: dict
    std: dict


@dataclass
class EvalReport:
    task: str
    rows: list
    failures: list
    gap: bool

    def row(self, variant: str) -> MethodRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)


def _aggregate(label, variant, per_seed, failed):
    keys = list(SUMMARY_KEYS) + ["time"]
    mean, std = {}, {}
    for k in keys:
        vals = np.array([r[k] for r in per_seed if r.get(k) is not None], dtype=np.float64)
        mean[k] = float(vals.mean()) if vals.size else float("nan")
        std[k] = float(vals.std()) if vals.size else float("nan")
    return MethodRow(label, variant, len(per_seed), failed, mean, std)


def collect_report(cfg: RunConfig, reference: dict | None = None) -> EvalReport:
    """Aggregate per-seed ``eval.csv`` / ``timing.csv`` files into mean and std per method."""
    rows, failures = [], []
    for v in cfg.variants:
        variant = Variant(v)
        per_seed, n_failed = [], 0
        for seed in cfg.seeds:
            d = cell_dir(cfg, variant, seed)
            if (d / "failure.txt").exists() or not (d / "eval.csv").exists():
                n_failed += 1
                msg = (d / "failure.txt").read_text().strip() if (d / "failure.txt").exists() else "not evaluated"
                failures.append((variant.value, seed, msg))
                continue
            rec = {k: _parse(val) for k, val in _read_rows(d / "eval.csv")[0].items()
                   if k in SUMMARY_KEYS}
            rec["time"] = float(_read_rows(d / "timing.csv")[0]["time_per_instance"])
            per_seed.append(rec)
        rows.append(_aggregate(variant.label, variant.value, per_seed, n_failed))
    if reference is not None:
        rows.append(_aggregate(REFERENCE, "reference", [reference], 0))
    return EvalReport(cfg.task, rows, failures, gap=reference is not None)


def _parse(s):
    return None if s == "" else float(s)


def _cell(mean, std, digits):
    if not np.isfinite(mean):
        return "n/a"
    return f"{mean:.{digits}f} ({std:.{digits}f})"


def format_markdown(report: EvalReport) -> str:
    cols = list(TABLE_COLUMNS) + ([("gap", "Gap (%)")] if report.gap else [])
    lines = ["| Method | " + " | ".join(h for _, h in cols) + " |",
             "|---|" + "---:|" * len(cols)]
    for r in report.rows:
        cells = []
        for key, _ in cols:
            if r.runs == 0:
                cells.append("failed")
            elif key == "time":
                cells.append(_cell(r.mean[key], r.std[key], 3))
            elif key == "gap":
                cells.append(_cell(100 * r.mean[key], 100 * r.std[key], 2))
            else:
                cells.append(_cell(r.mean[key], r.std[key], 2))
        name = r.label if not r.failed else f"{r.label} ({r.failed} failed)"
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    if report.failures:
        lines.append("")
        lines.append("Failed cells:")
        for variant, seed, msg in report.failures:
            lines.append(f"- {variant} seed {seed}: {msg}")
    return "\n".join(lines) + "\n"


def write_report(cfg: RunConfig, report: EvalReport) -> None:
    out = Path(cfg.output)
    (out / "report.md").write_text(format_markdown(report))
    keys = [k for k in SUMMARY_KEYS if report.gap or k != "gap"]
    header = ["method", "variant", "runs", "failed"] + [f"{k}_{s}" for k in keys for s in ("mean", "std")]
    rows, timing = [], []
    for r in report.rows:
        row = {"method": r.label, "variant": r.variant, "runs": r.runs, "failed": r.failed}
        for k in keys:
            row[f"{k}_mean"], row[f"{k}_std"] = r.mean[k], r.std[k]
        rows.append(row)
        timing.append({"variant": r.variant, "time_mean": r.mean["time"], "time_std": r.std["time"]})
    _write_rows(out / "report.csv", rows, header=header)
    _write_rows(out / "timing.csv", timing)
    _write_rows(out / "failures.csv", [{"variant": v, "seed": s, "error": m} for v, s, m in report.failures],
                header=["variant", "seed", "error"])


def save_config(cfg: RunConfig) -> None:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.source is not None:
        (out / "config.toml").write_text(cfg.source)
    (out / "resolved.toml").write_text(cfg.to_toml())


@dataclass
class ExperimentResult:
    report: EvalReport
    failed: list
    output: Path

    @property
    def ok(self) -> bool:
        return not self.failed


def report_only(cfg: RunConfig) -> ExperimentResult:
    """Rebuild the report from existing cell files."""
    root = Path(cfg.output) / "data"
    reference = _load_reference(root) if cfg.reference and (root / "reference.csv").exists() else None
    report = collect_report(cfg, reference)
    write_report(cfg, report)
    return ExperimentResult(report, report.failures, Path(cfg.output))


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    """Generate data, train and evaluate every (variant, seed) cell, and write the reports."""
    save_config(cfg)
    ws = prepare(cfg)
    train_all(cfg, ws)
    eval_all(cfg, ws)
    report = collect_report(cfg, ws.reference)
    write_report(cfg, report)
    return ExperimentResult(report, report.failures, Path(cfg.output))


# ------------------------------------------------------------------ sweeps

@dataclass
class SweepResult:
    axis: str
    values: list
    results: list
    table: str

    @property
    def failed(self) -> list:
        return [f for r in self.results for f in r.failed]


SWEEP_ROWS = (("obj", "Obj. value"), ("max_eq", "Max eq."), ("max_ineq", "Max ineq."))


def sweep_constraints(base: RunConfig, axis: str, values) -> SweepResult:
    """One experiment per value of ``axis``; combined table with a column per value."""
    if axis not in SWEEP_AXES:
        raise ContractError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if base.task == "acopf":
        raise ContractError("constraint sweeps apply to the qp and nonconvex tasks")
    values = [int(v) for v in values]
    results = []
    for v in values:
        cfg = base.with_changes(**{axis: v}, output=str(Path(base.output) / f"{axis}-{v}"))
        results.append(run_experiment(cfg))
    labels = [(r.label, r.variant) for r in results[0].report.rows]
    header = ["| Method | Metric | " + " | ".join(f"{axis}={v}" for v in values) + " |",
              "|---|---|" + "---:|" * len(values)]
    csv_rows = []
    for label, variant in labels:
        for key, name in SWEEP_ROWS:
            cells = []
            row = {"method": label, "variant": variant, "metric": key}
            for v, res in zip(values, results):
                r = res.report.row(variant)
                row[str(v)] = r.mean[key] if r.runs else None
                cells.append(_cell(r.mean[key], r.std[key], 2) if r.runs else "failed")
            csv_rows.append(row)
            header.append(f"| {label} | {name} | " + " | ".join(cells) + " |")
    table = "\n".join(header) + "\n"
    out = Path(base.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.md").write_text(table)
    _write_rows(out / "sweep.csv", csv_rows, header=["method", "variant", "metric"] + [str(v) for v in values])
    return SweepResult(axis, values, results, table)
