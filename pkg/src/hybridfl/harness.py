"""Experiment configuration, seeded execution, trace files and comparisons.

Config files are INI-style (``[section]`` headers, ``key = value``, ``#``
comments). Keys are case-sensitive. See ``README.md`` for the full key list.

Trace files are CSV with a ``#``-prefixed header block echoing the resolved
configuration; columns are fixed (:data:`TRACE_COLUMNS`).
"""

from __future__ import annotations

import configparser
import math
import os
import re
import statistics
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import (
    LabeledDataset,
    PartitionSpec,
    dirichlet_partition,
    generate_synthetic,
    load_idx,
    standardize,
)
from .data import _read_bytes
from .errors import CompareError, ConfigError, TrainingAborted
from .model import KINDS, Objective
from .protocol import ALGORITHMS, TRACE_COLUMNS, HyperParams, TraceRow, TrainingTrace, run_training

OUTPUT_DIR_ENV = "HYBRIDFL_OUTPUT_DIR"


@dataclass(frozen=True)
class Target:
    metric: str  # "loss" | "accuracy"
    value: float

    _PATTERN = re.compile(r"^\s*(loss|accuracy)\s*(<=|>=)\s*([-+0-9.eE]+)\s*$")

    @classmethod
    def parse(cls, text: str) -> "Target":
        m = cls._PATTERN.match(text)
        if not m:
            raise ValueError(f"bad target {text!r}; expected 'loss <= v' or 'accuracy >= v'")
        metric, op, value = m.groups()
        if (metric, op) not in (("loss", "<="), ("accuracy", ">=")):
            raise ValueError(f"bad target {text!r}; use 'loss <= v' or 'accuracy >= v'")
        return cls(metric, float(value))

    def met(self, row: TraceRow) -> bool:
        if self.metric == "loss":
            return row.train_loss <= self.value
        return row.test_accuracy >= self.value

    def __str__(self) -> str:
        op = "<=" if self.metric == "loss" else ">="
        return f"{self.metric} {op} {self.value!r}"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str  # "synthetic" | "idx"
    num_classes: int = 10
    input_dim: int = 20
    n: int = 0
    test_n: int = 0
    separation: float = 4.0
    seed: int = 0
    images: Path | None = None
    labels: Path | None = None
    test_images: Path | None = None
    test_labels: Path | None = None
    standardize: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    dataset: DatasetSpec
    partition: PartitionSpec
    hp: HyperParams
    objective: Objective
    master_seed: int
    target: Target
    output_dir: Path
    repeats: int = 1
    echo: tuple = field(default=(), compare=False, repr=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, master_seed=int(seed))


# (section, key) -> (parser, required, default)
def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _batch(v):
    return None if v.strip().lower() == "full" else int(v)


def _bool(v):
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _str(v):
    return v.strip()


_SCHEMA = {
    "experiment": {
        "algorithm": (_str, True, None),
        "master_seed": (_int, False, "0"),
        "repeats": (_int, False, "1"),
        "target": (_str, True, None),
        "output_dir": (_str, False, "runs"),
    },
    "dataset": {
        "kind": (_str, True, None),
        "num_classes": (_int, False, "10"),
        "input_dim": (_int, False, "20"),
        "n": (_int, False, "0"),
        "test_n": (_int, False, "0"),
        "separation": (_float, False, "4.0"),
        "seed": (_int, False, "0"),
        "images": (_str, False, None),
        "labels": (_str, False, None),
        "test_images": (_str, False, None),
        "test_labels": (_str, False, None),
        "standardize": (_bool, False, "true"),
    },
    "partition": {
        "scheme": (_str, True, None),
        "alpha": (_float, False, None),
        "per_client_size": (_str, False, "proportional"),
    },
    "objective": {
        "kind": (_str, True, None),
        "hidden_width": (_int, False, "0"),
        "l2_reg": (_float, False, "0.0"),
    },
    "hyperparams": {
        "eta": (_float, True, None),
        "eta_g": (_float, False, "1.0"),
        "gamma": (_float, False, "0.0"),
        "K": (_int, True, None),
        "E": (_int, False, "0"),
        "T": (_int, True, None),
        "M": (_int, True, None),
        "N": (_int, True, None),
        "m_s": (_str, False, "1%"),
        "client_batch": (_batch, False, "full"),
        "server_batch": (_batch, False, "full"),
        "decay": (_float, False, "0.99"),
        "floor": (_float, False, "0.001"),
    },
}


def _read_sections(text: str, origin: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",)
    )
    cp.optionxform = str
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {origin}: {exc}") from exc
    return {s: dict(cp.items(s)) for s in cp.sections()}


def _idx_header(path: Path) -> tuple[int, int]:
    """(count, pixels per image) from an IDX image file header."""
    head = _read_bytes(path)[:16]
    if len(head) < 16:
        raise ConfigError(f"IDX file {path} is truncated", key="dataset.images")
    count, rows, cols = struct.unpack(">III", head[4:16])
    return count, rows * cols


def parse_config_text(text: str, base_dir: Path | str = ".", origin: str = "<config>") -> ExperimentConfig:
    sections = _read_sections(text, origin)
    for name in sections:
        if name not in _SCHEMA:
            raise ConfigError(
                f"unknown section [{name}]; valid sections: {', '.join(_SCHEMA)}", key=name
            )
    values: dict[str, dict] = {}
    for sec, keys in _SCHEMA.items():
        given = sections.get(sec, {})
        for k in given:
            if k not in keys:
                raise ConfigError(f"unknown key {sec}.{k}", key=f"{sec}.{k}")
        out = {}
        for k, (conv, required, default) in keys.items():
            raw = given.get(k, default)
            if raw is None:
                if required:
                    raise ConfigError(f"missing required key {sec}.{k}", key=f"{sec}.{k}")
                out[k] = None
                continue
            try:
                out[k] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"invalid value for {sec}.{k}: {raw!r} ({exc})", key=f"{sec}.{k}") from exc
        values[sec] = out

    ex, dsv, pv, ov, hv = (values[s] for s in ("experiment", "dataset", "partition", "objective", "hyperparams"))
    base_dir = Path(base_dir)

    if ex["algorithm"] not in ALGORITHMS:
        raise ConfigError(
            f"unknown algorithm {ex['algorithm']!r}; valid choices: {', '.join(ALGORITHMS)}",
            key="experiment.algorithm",
        )
    if ex["repeats"] < 1:
        raise ConfigError("experiment.repeats must be >= 1", key="experiment.repeats")
    try:
        target = Target.parse(ex["target"])
    except ValueError as exc:
        raise ConfigError(str(exc), key="experiment.target") from exc

    # dataset
    if dsv["kind"] not in ("synthetic", "idx"):
        raise ConfigError("dataset.kind must be 'synthetic' or 'idx'", key="dataset.kind")
    paths = {}
    if dsv["kind"] == "idx":
        for k in ("images", "labels", "test_images", "test_labels"):
            if dsv[k] is None:
                if k in ("images", "labels"):
                    raise ConfigError(f"missing required key dataset.{k}", key=f"dataset.{k}")
                paths[k] = None
                continue
            p = Path(dsv[k])
            p = p if p.is_absolute() else base_dir / p
            if not p.exists():
                raise ConfigError(f"dataset.{k}: file not found: {p}", key=f"dataset.{k}")
            paths[k] = p
        if (paths["test_images"] is None) != (paths["test_labels"] is None):
            raise ConfigError("dataset.test_images and dataset.test_labels go together", key="dataset.test_images")
    else:
        if dsv["n"] < dsv["num_classes"]:
            raise ConfigError("dataset.n must be >= dataset.num_classes", key="dataset.n")
        if dsv["test_n"] < 0:
            raise ConfigError("dataset.test_n must be >= 0", key="dataset.test_n")
        if dsv["separation"] < 0:
            raise ConfigError("dataset.separation must be >= 0", key="dataset.separation")
    dataset = DatasetSpec(
        kind=dsv["kind"], num_classes=dsv["num_classes"], input_dim=dsv["input_dim"],
        n=dsv["n"], test_n=dsv["test_n"], separation=dsv["separation"], seed=dsv["seed"],
        standardize=dsv["standardize"], **{k: paths.get(k) for k in ("images", "labels", "test_images", "test_labels")},
    )

    # hyperparams: M/N first so the message names the real problem
    if hv["M"] > hv["N"]:
        raise ConfigError(f"M exceeds N ({hv['M']} > {hv['N']})", key="hyperparams.M")

    # partition
    pcs = pv["per_client_size"]
    if pcs != "proportional":
        try:
            pcs = int(pcs)
        except ValueError as exc:
            raise ConfigError("partition.per_client_size must be an int or 'proportional'",
                              key="partition.per_client_size") from exc
    try:
        partition = PartitionSpec(pv["scheme"], hv["N"], pcs, pv["alpha"], ex["master_seed"])
    except ValueError as exc:
        raise ConfigError(f"invalid partition: {exc}", key="partition.scheme") from exc

    input_dim = dataset.input_dim
    if dataset.kind == "synthetic":
        n_pop = dataset.n
    else:
        n_pop, input_dim = _idx_header(paths["images"])
    pop_size = hv["N"] * partition.shard_size(n_pop)
    ms = hv["m_s"]
    try:
        if ms.endswith("%"):
            m_s = max(1, int(round(float(ms[:-1]) / 100.0 * pop_size)))
        else:
            m_s = int(ms)
    except ValueError as exc:
        raise ConfigError(f"invalid value for hyperparams.m_s: {ms!r}", key="hyperparams.m_s") from exc
    if pop_size and m_s > pop_size:
        raise ConfigError(f"hyperparams.m_s={m_s} exceeds population size {pop_size}", key="hyperparams.m_s")

    hp_kwargs = {k: hv[k] for k in ("eta", "eta_g", "gamma", "K", "E", "T", "M", "N",
                                     "client_batch", "server_batch", "decay", "floor")}
    try:
        hp = HyperParams(m_s=m_s, **hp_kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid hyperparams: {exc}", key="hyperparams") from exc

    if ov["kind"] not in KINDS or ov["kind"] == "least-squares":
        raise ConfigError(
            f"unknown objective kind {ov['kind']!r}; valid choices: logistic-regression, mlp-1hidden",
            key="objective.kind",
        )
    try:
        objective = Objective(ov["kind"], input_dim, dataset.num_classes, ov["hidden_width"], ov["l2_reg"])
    except ValueError as exc:
        raise ConfigError(f"invalid objective: {exc}", key="objective.kind") from exc

    out_dir = Path(ex["output_dir"])
    out_dir = out_dir if out_dir.is_absolute() else base_dir / out_dir
    echo = tuple(
        (f"{sec}.{k}", str(sections.get(sec, {}).get(k, default)))
        for sec, keys in _SCHEMA.items()
        for k, (_, _, default) in keys.items()
        if sections.get(sec, {}).get(k, default) is not None and not (sec == "experiment" and k in ("master_seed", "output_dir"))
    )
    return ExperimentConfig(
        algorithm=ex["algorithm"], dataset=dataset, partition=partition, hp=hp,
        objective=objective, master_seed=ex["master_seed"], target=target,
        output_dir=out_dir, repeats=ex["repeats"], echo=echo,
    )


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base_dir=path.parent, origin=str(path))


@dataclass(frozen=True)
class Problem:
    objective: Objective
    shards: list
    population: LabeledDataset
    test: LabeledDataset | None
    hp: HyperParams


def build_problem(config: ExperimentConfig, seed: int | None = None) -> Problem:
    """Materialise data and shards. ``seed`` drives the partition; data is fixed by ``dataset.seed``."""
    seed = config.master_seed if seed is None else seed
    ds = config.dataset
    if ds.kind == "synthetic":
        full = generate_synthetic(ds.num_classes, ds.input_dim, ds.n + ds.test_n, ds.separation, ds.seed)
        train = full.subset(np.arange(ds.n))
        test = full.subset(np.arange(ds.n, ds.n + ds.test_n)) if ds.test_n else None
    else:
        train = load_idx(ds.images, ds.labels)
        test = load_idx(ds.test_images, ds.test_labels) if ds.test_images else None
    if ds.standardize:
        if test is not None:
            train, test = standardize(train, test)
        else:
            (train,) = standardize(train)
    spec = replace(config.partition, seed=int(seed))
    shards = dirichlet_partition(train, spec, ds.num_classes)
    population = LabeledDataset.concat([s.data for s in shards])
    return Problem(config.objective, shards, population, test, config.hp)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_trace(rows: Sequence[TraceRow], meta: Sequence[tuple[str, str]]) -> str:
    lines = ["# hybridfl trace"]
    lines += [f"# {k} = {v}" for k, v in meta]
    lines.append(",".join(TRACE_COLUMNS))
    for r in rows:
        lines.append(",".join(_fmt(v) for v in r))
    return "\n".join(lines) + "\n"


@dataclass
class TraceFile:
    path: Path
    meta: dict[str, str]
    rows: list[TraceRow]

    @property
    def algorithm(self) -> str:
        return self.meta.get("algorithm", "?")

    @property
    def target(self) -> str | None:
        return self.meta.get("target")


def read_trace(path) -> TraceFile:
    path = Path(path)
    meta: dict[str, str] = {}
    rows: list[TraceRow] = []
    header_seen = False
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if " = " in body:
                k, v = body.split(" = ", 1)
                meta[k.strip()] = v.strip()
            continue
        if not header_seen:
            if tuple(line.split(",")) != TRACE_COLUMNS:
                raise ValueError(f"{path}: unexpected trace columns {line!r}")
            header_seen = True
            continue
        if not line.strip():
            continue
        f = line.split(",")
        rows.append(TraceRow(int(f[0]), float(f[1]), float(f[2]), float(f[3]),
                             int(float(f[4])), int(float(f[5])), float(f[6]), float(f[7])))
    return TraceFile(path, meta, rows)


def _trace_meta(config: ExperimentConfig, seed: int, aborted: bool, kind: str = "repeat") -> list[tuple[str, str]]:
    meta = [
        ("kind", kind),
        ("algorithm", config.algorithm),
        ("seed", str(seed)),
        ("target", str(config.target)),
        ("aborted", "true" if aborted else "false"),
    ]
    meta += [(f"config.{k}", v) for k, v in config.echo]
    return meta


def summarize(traces: Sequence[TrainingTrace]) -> list[TraceRow]:
    """Per-round arithmetic mean over repeats (rounds common to all repeats)."""
    length = min(len(t.rows) for t in traces)
    out = []
    for i in range(length):
        cols = list(zip(*(t.rows[i] for t in traces)))
        vals = [cols[0][0]]
        for name, col in zip(TRACE_COLUMNS[1:], cols[1:]):
            if name in ("floats_up", "floats_down"):
                vals.append(sum(col) // len(col) if len(set(col)) == 1 else sum(col) / len(col))
            else:
                vals.append(math.fsum(col) / len(col))
        out.append(TraceRow(*vals))
    return out


def output_dir_for(config: ExperimentConfig) -> Path:
    env = os.environ.get(OUTPUT_DIR_ENV)
    return Path(env) if env else config.output_dir


def run_experiment(config: ExperimentConfig) -> Path:
    """Run every repeat (seed = master_seed + r), write traces and a summary.

    Returns the path of the summary file. A failing repeat still has its
    partial trace written (``aborted = true``) before the error propagates.
    """
    out = output_dir_for(config)
    traces = []
    for r in range(config.repeats):
        seed = config.master_seed + r
        problem = build_problem(config, seed)
        path = out / f"{config.algorithm}-seed{seed}.csv"
        try:
            trace = run_training(config.algorithm, problem.objective, problem.shards, problem.hp,
                                 seed, test_data=problem.test, population=problem.population)
        except TrainingAborted as exc:
            _atomic_write(path, render_trace(exc.trace.rows, _trace_meta(config, seed, True)))
            raise
        _atomic_write(path, render_trace(trace.rows, _trace_meta(config, seed, False)))
        traces.append(trace)
    summary = out / f"{config.algorithm}-summary.csv"
    seeds = " ".join(str(config.master_seed + r) for r in range(config.repeats))
    meta = _trace_meta(config, config.master_seed, False, kind="summary")
    meta.insert(3, ("repeat_seeds", seeds))
    _atomic_write(summary, render_trace(summarize(traces), meta))
    return summary


def rounds_to_target(trace, target: Target) -> int | None:
    """First round whose metrics satisfy ``target``; ``None`` if never reached."""
    rows = getattr(trace, "rows", trace)
    if not rows:
        raise ValueError("empty trace")
    for row in rows:
        if target.met(row):
            return int(row.round)
    return None


def _median(values: list[int | None]) -> float | None:
    vals = sorted(math.inf if v is None else v for v in values)
    med = statistics.median(vals)
    return None if math.isinf(med) or math.isnan(med) else float(med)


@dataclass
class ComparisonRow:
    algorithm: str
    rounds: list[int | None]
    median: float | None
    mean: float | None
    speedup: float | None


@dataclass
class Comparison:
    target: Target
    baseline: str
    rows: list[ComparisonRow]

    def row(self, algorithm: str) -> ComparisonRow:
        for r in self.rows:
            if r.algorithm == algorithm:
                return r
        raise KeyError(algorithm)


def compare_runs(traces: Iterable, target: Target | str | None = None, baseline: str = "clg-sgd") -> Comparison:
    """Median rounds-to-target per algorithm and speedup against ``baseline``.

    ``traces`` are trace paths or :class:`TraceFile` objects. All traces must
    carry the same target in their headers. ``target`` overrides the header
    target for the measurement itself.
    """
    files = [t if isinstance(t, TraceFile) else read_trace(t) for t in traces]
    # averaged summaries would double-count their repeats
    files = [f for f in files if f.meta.get("kind") != "summary"]
    if len(files) < 2:
        raise CompareError("compare needs at least two traces")
    header_targets = {f.target for f in files}
    if len(header_targets) > 1:
        raise CompareError(f"mismatched targets across traces: {sorted(map(str, header_targets))}")
    if target is None:
        (only,) = header_targets
        if only is None:
            raise CompareError("no target given and traces carry none")
        target = Target.parse(only)
    elif isinstance(target, str):
        target = Target.parse(target)

    by_alg: dict[str, list[int | None]] = {}
    for f in files:
        by_alg.setdefault(f.algorithm, []).append(rounds_to_target(f, target))
    if baseline not in by_alg:
        raise CompareError(f"baseline {baseline!r} not among traces ({', '.join(sorted(by_alg))})")

    base_med = _median(by_alg[baseline])
    rows = []
    order = [baseline] + sorted(a for a in by_alg if a != baseline)
    for alg in order:
        rounds = by_alg[alg]
        med = _median(rounds)
        mean = None if any(r is None for r in rounds) else statistics.fmean(rounds)
        if med is None or base_med is None:
            speed = None
        elif med == 0:
            speed = 1.0 if base_med == 0 else math.inf
        else:
            speed = base_med / med
        rows.append(ComparisonRow(alg, rounds, med, mean, speed))
    return Comparison(target, baseline, rows)


def _num(v: float | None) -> str:
    if v is None:
        return "not reached"
    return str(int(v)) if float(v).is_integer() else f"{v:.1f}"


def format_comparison(cmp: Comparison) -> str:
    """Plain-text table in the ``rounds (speedup x)`` style."""
    header = ("method", "repeats", "median rounds", "mean rounds", "rounds (speedup)")
    body = []
    for r in cmp.rows:
        if r.median is None:
            cell = "not reached"
        elif r.speedup is None:
            cell = f"{_num(r.median)} (n/a)"
        else:
            cell = f"{_num(r.median)} ({r.speedup:.2f}x)"
        body.append((r.algorithm, str(len(r.rounds)), _num(r.median),
                     "not reached" if r.mean is None else f"{r.mean:.1f}", cell))
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = [f"target: {cmp.target}  baseline: {cmp.baseline}"]
    for row in [header] + body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def parse_constants(path):
    """Read a ``[constants]`` file with keys L, sigma, sigma_g, f0, f_star."""
    from .theory import TheoremConstants

    path = Path(path)
    try:
        sections = _read_sections(path.read_text(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read constants file {path}: {exc}") from exc
    if set(sections) != {"constants"}:
        raise ConfigError("constants file must contain exactly one [constants] section")
    vals = sections["constants"]
    need = ("L", "sigma", "sigma_g", "f0", "f_star")
    for k in vals:
        if k not in need:
            raise ConfigError(f"unknown key constants.{k}", key=f"constants.{k}")
    out = {}
    for k in need:
        if k not in vals:
            raise ConfigError(f"missing required key constants.{k}", key=f"constants.{k}")
        try:
            out[k] = float(vals[k])
        except ValueError as exc:
            raise ConfigError(f"invalid value for constants.{k}: {vals[k]!r}", key=f"constants.{k}") from exc
    try:
        return TheoremConstants(**out)
    except ValueError as exc:
        raise ConfigError(f"invalid constants: {exc}") from exc


def render_constants(c) -> str:
    return "[constants]\n" + "".join(
        f"{k} = {getattr(c, k)!r}\n" for k in ("L", "sigma", "sigma_g", "f0", "f_star")
    )
