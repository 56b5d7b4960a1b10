"""Tabular ingestion, imputation, encoding, splitting and a synthetic benchmark.

Tables are CSV files with a header row and an accompanying JSON schema
``{column: {"kind": ..., "levels": [...]}}``. An empty field is a missing
value. Column kinds:

* ``numeric`` -- real-valued, may be missing; normalized for the networks
* ``categorical`` -- one of ``levels``, may be missing; one-hot encoded
* ``label`` -- the class (never missing)
* ``patient_id`` / ``encounter_order`` -- used by carry-forward imputation
* ``ignore`` -- carried along, never used
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

KINDS = ("numeric", "categorical", "label", "patient_id", "encounter_order", "ignore")


class ParseError(ValueError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


class RejectedTableError(ValueError):
    pass


class RejectedConfigurationError(ValueError):
    pass


@dataclass
class ColumnSpec:
    name: str
    kind: str
    levels: list[str] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.levels is not None:
            self.levels = [str(v) for v in self.levels]
            if len(set(self.levels)) != len(self.levels):
                raise ValueError(f"column {self.name!r}: duplicate levels")
        if self.kind == "categorical" and not self.levels:
            raise ValueError(f"categorical column {self.name!r} needs levels")


@dataclass
class Schema:
    columns: list[ColumnSpec]

    def __post_init__(self):
        kinds = [c.kind for c in self.columns]
        if kinds.count("label") != 1:
            raise ValueError("schema needs exactly one label column")
        for k in ("patient_id", "encounter_order"):
            if kinds.count(k) > 1:
                raise ValueError(f"at most one {k} column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names")

    def of_kind(self, kind: str) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind == kind]

    def column(self, kind: str) -> str | None:
        cols = self.of_kind(kind)
        return cols[0].name if cols else None

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for c in self.columns:
            out[c.name] = {"kind": c.kind}
            if c.levels is not None:
                out[c.name]["levels"] = list(c.levels)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Schema":
        return cls([ColumnSpec(name, v["kind"], v.get("levels")) for name, v in d.items()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RawTable:
    """Typed table: numeric columns are float with NaN for missing,
    categorical/label/id columns are strings with None for missing."""

    schema: Schema
    frame: pd.DataFrame

    def __len__(self) -> int:
        return len(self.frame)

    def copy(self) -> "RawTable":
        return RawTable(self.schema, self.frame.copy())

    @property
    def numeric_columns(self) -> list[str]:
        return [c.name for c in self.schema.of_kind("numeric")]

    @property
    def labels(self) -> pd.Series:
        return self.frame[self.schema.column("label")]

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.schema.names)
            for row in self.frame.itertuples(index=False):
                writer.writerow(["" if _is_missing(v) else _fmt(v) for v in row])


def _is_missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse_column(spec: ColumnSpec, raw: list[str]) -> list:
    out: list = []
    for i, cell in enumerate(raw, start=1):
        cell = cell.strip()
        if cell == "":
            if spec.kind == "label":
                raise ParseError("label is missing", i, spec.name)
            out.append(np.nan if spec.kind in ("numeric", "encounter_order") else None)
            continue
        if spec.kind in ("numeric", "encounter_order"):
            try:
                val = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric value {cell!r}", i, spec.name) from None
            if not math.isfinite(val):
                raise ParseError(f"non-finite value {cell!r}", i, spec.name)
            out.append(val)
        else:
            if spec.levels is not None and spec.kind in ("categorical", "label") and cell not in spec.levels:
                raise ParseError(f"unknown level {cell!r}", i, spec.name)
            out.append(cell)
    return out


def table_from_records(schema: Schema, records: list[list[str]]) -> RawTable:
    cols = {}
    for j, spec in enumerate(schema.columns):
        cols[spec.name] = _parse_column(spec, [r[j] for r in records])
    frame = pd.DataFrame(cols, columns=schema.names)
    for spec in schema.columns:
        if spec.kind in ("numeric", "encounter_order"):
            frame[spec.name] = frame[spec.name].astype(float)
        else:
            frame[spec.name] = frame[spec.name].astype(object)
    return RawTable(schema, frame)


def load_table(csv_path: str | Path, schema_path: str | Path) -> RawTable:
    schema = Schema.load(schema_path)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row") from None
        if [h.strip() for h in header] != schema.names:
            raise ParseError(f"header {header} does not match schema columns {schema.names}")
        records = []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", i)
            records.append(row)
    return table_from_records(schema, records)


# -- imputation ------------------------------------------------------------


def carry_forward_impute(table: RawTable) -> RawTable:
    """Fill missing numeric cells from the same patient's latest earlier encounter.

    Leading gaps stay missing. Row order of the table is preserved.
    """
    pid = table.schema.column("patient_id")
    order = table.schema.column("encounter_order")
    if pid is None or order is None:
        raise RejectedTableError("carry-forward needs patient_id and encounter_order columns")
    df = table.frame
    if df.duplicated([pid, order]).any():
        raise RejectedTableError("duplicate (patient_id, encounter_order) pairs")
    out = table.copy()
    num = table.numeric_columns
    if not num or len(df) == 0:
        return out
    ordered = df.sort_values([pid, order], kind="mergesort")
    filled = ordered.groupby(pid, sort=False)[num].ffill()
    out.frame.loc[filled.index, num] = filled
    return out


def impute_categoricals(table: RawTable) -> RawTable:
    """Missing categorical cells take the patient's most common level, else the global one."""
    out = table.copy()
    pid = table.schema.column("patient_id")
    for spec in table.schema.of_kind("categorical"):
        col = out.frame[spec.name]
        if not col.isna().any():
            continue
        observed = col.dropna()
        if observed.empty:
            raise RejectedTableError(f"categorical column {spec.name!r} is entirely missing")
        global_mode = _mode(observed, spec.levels)
        if pid is not None:
            patient_mode = observed.groupby(out.frame.loc[observed.index, pid]).agg(lambda s: _mode(s, spec.levels))
            fill = out.frame[pid].map(patient_mode)
        else:
            fill = pd.Series(index=col.index, dtype=object)
        fill = fill.where(fill.notna(), global_mode)
        out.frame[spec.name] = col.where(col.notna(), fill)
    return out


def _mode(values: pd.Series, levels: list[str]) -> str:
    counts = values.value_counts()
    top = counts.max()
    # ties resolved by declared level order
    return next(lv for lv in levels if counts.get(lv, 0) == top)


def _solve_regression(X: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    A = X.T @ X
    b = X.T @ y
    if np.linalg.matrix_rank(A) < A.shape[0]:
        A = A + ridge * np.eye(A.shape[0])
    return np.linalg.solve(A, b)


def chained_impute(
    table: RawTable,
    trials: int = 5,
    iterations: int = 10,
    seed: int = 0,
    ridge: float = 1e-6,
) -> RawTable:
    """Chained-equation imputation of numeric columns, averaged over trials.

    Each trial starts from column-mean fills, then repeatedly regresses each
    incomplete column on all other numeric columns (least squares with an
    intercept, fit on that column's observed rows) and overwrites its missing
    cells with the predictions. There is no random draw in this path, so all
    trials agree and ``seed`` only labels the run; the averaging is kept so
    stochastic variants can slot in.
    """
    num = table.numeric_columns
    out = table.copy()
    if not num or len(table) == 0:
        return out
    X0 = table.frame[num].to_numpy(dtype=float)
    missing = np.isnan(X0)
    if not missing.any():
        return out
    empty = [num[j] for j in range(len(num)) if missing[:, j].all()]
    if empty:
        raise RejectedTableError(f"numeric column(s) with no observed values: {empty}")
    col_means = np.nanmean(X0, axis=0)
    incomplete = [j for j in range(len(num)) if missing[:, j].any()]
    results = []
    for _ in range(trials):
        X = np.where(missing, col_means[None, :], X0)
        for _ in range(iterations):
            for j in incomplete:
                obs = ~missing[:, j]
                others = [k for k in range(len(num)) if k != j]
                design = np.hstack([np.ones((len(X), 1)), X[:, others]])
                coef = _solve_regression(design[obs], X[obs, j], ridge)
                X[~obs, j] = design[~obs] @ coef
        results.append(X)
    averaged = np.mean(results, axis=0)
    filled = np.where(missing, averaged, X0)
    out.frame[num] = filled
    return out


# -- encoding --------------------------------------------------------------


@dataclass
class Block:
    name: str
    kind: str  # numeric | categorical
    start: int
    stop: int
    levels: list[str] | None = None

    @property
    def likelihood(self) -> str:
        return "gaussian" if self.kind == "numeric" else "bernoulli"


@dataclass
class EncodedDataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    blocks: list[Block]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    floored: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def likelihood_blocks(self) -> list[tuple[str, int, int]]:
        """Contiguous ``(likelihood, start, stop)`` runs for the decoder."""
        runs: list[list] = []
        for b in self.blocks:
            if runs and runs[-1][0] == b.likelihood and runs[-1][2] == b.start:
                runs[-1][2] = b.stop
            else:
                runs.append([b.likelihood, b.start, b.stop])
        return [tuple(r) for r in runs]

    def decode_categorical(self, name: str) -> list[str]:
        b = next(b for b in self.blocks if b.name == name and b.kind == "categorical")
        return [b.levels[i] for i in np.argmax(self.features[:, b.start:b.stop], axis=1)]


def class_names_for(table: RawTable) -> list[str]:
    spec = table.schema.of_kind("label")[0]
    if spec.levels:
        return list(spec.levels)
    return sorted(set(table.labels.tolist()))


def encode(table: RawTable, train_indices=None, std_floor: float = 1e-8) -> EncodedDataset:
    """Z-score numeric columns with training-split statistics; one-hot categoricals."""
    df = table.frame
    n = len(df)
    train = np.arange(n) if train_indices is None else np.asarray(train_indices, dtype=int)
    cols: list[np.ndarray] = []
    blocks: list[Block] = []
    mean, std, floored = {}, {}, []
    pos = 0
    for spec in table.schema.columns:
        if spec.kind == "numeric":
            v = df[spec.name].to_numpy(dtype=float)
            if np.isnan(v).any():
                raise RejectedTableError(f"column {spec.name!r} still has missing values")
            m = float(v[train].mean()) if train.size else 0.0
            s = float(v[train].std()) if train.size else 1.0
            if s < std_floor:
                floored.append(spec.name)
                s = std_floor
            mean[spec.name], std[spec.name] = m, s
            cols.append(((v - m) / s)[:, None])
            blocks.append(Block(spec.name, "numeric", pos, pos + 1))
            pos += 1
        elif spec.kind == "categorical":
            vals = df[spec.name]
            if vals.isna().any():
                raise RejectedTableError(f"column {spec.name!r} still has missing values")
            index = {lv: i for i, lv in enumerate(spec.levels)}
            oh = np.zeros((n, len(spec.levels)))
            oh[np.arange(n), [index[v] for v in vals]] = 1.0
            cols.append(oh)
            blocks.append(Block(spec.name, "categorical", pos, pos + len(spec.levels), list(spec.levels)))
            pos += len(spec.levels)
    if floored:
        log.warning("zero-variance numeric columns, std floored: %s", floored)
    features = np.hstack(cols) if cols else np.zeros((n, 0))
    names = class_names_for(table)
    lookup = {c: i for i, c in enumerate(names)}
    labels = np.array([lookup[v] for v in table.labels], dtype=int)
    return EncodedDataset(features, labels, names, blocks, mean, std, floored)


# -- splits ----------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class SplitBundle:
    known: list[int]
    novel: list[int]
    train: np.ndarray
    validation: np.ndarray
    known_test: np.ndarray
    novel_test_sets: list[dict[int, np.ndarray]]
    seed: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "known": self.known,
            "novel": self.novel,
            "seed": self.seed,
            "train": self.train.tolist(),
            "validation": self.validation.tolist(),
            "known_test": self.known_test.tolist(),
            "novel_test_sets": [{str(c): idx.tolist() for c, idx in s.items()} for s in self.novel_test_sets],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SplitBundle":
        return cls(
            known=[int(c) for c in d["known"]],
            novel=[int(c) for c in d["novel"]],
            train=np.asarray(d["train"], dtype=int),
            validation=np.asarray(d["validation"], dtype=int),
            known_test=np.asarray(d["known_test"], dtype=int),
            novel_test_sets=[{int(c): np.asarray(v, dtype=int) for c, v in s.items()} for s in d["novel_test_sets"]],
            seed=int(d["seed"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "SplitBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def test_indices(self, set_index: int, n_novel: int) -> np.ndarray:
        """Known-test rows plus the first ``n_novel`` novel classes of one test set."""
        parts = [self.known_test] + [self.novel_test_sets[set_index][c] for c in self.novel[:n_novel]]
        return np.concatenate(parts).astype(int)


def make_splits(
    labels: np.ndarray,
    known: list[int],
    novel: list[int],
    n_test_sets: int = 100,
    seed: int = 0,
    min_class_size: int = 6,
) -> SplitBundle:
    """Stratified 2/3-1/6-1/6 split of the known classes plus resampled novel test sets.

    Every novel test set draws ``floor(n_c / 6)`` rows of each novel class
    ``c`` without replacement; sets are drawn independently, so rows repeat
    across sets. ``novel`` is the order in which novel classes are introduced.
    """
    labels = np.asarray(labels, dtype=int)
    known = [int(c) for c in known]
    novel = [int(c) for c in novel]
    if set(known) & set(novel):
        raise RejectedConfigurationError("known and novel classes overlap")
    for c in known + novel:
        n = int(np.sum(labels == c))
        if c in known and n < min_class_size:
            raise RejectedConfigurationError(f"known class {c} has {n} samples (< {min_class_size})")
        if c in novel and n // 6 < 1:
            raise RejectedConfigurationError(f"novel class {c} has {n} samples; need >= 6")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in known:
        idx = rng.permutation(np.flatnonzero(labels == c))
        n = len(idx)
        n_train = _round_half_up(2 * n / 3)
        n_val = _round_half_up(n / 6)
        train.append(idx[:n_train])
        val.append(idx[n_train:n_train + n_val])
        test.append(idx[n_train + n_val:])
    sets = []
    for s in range(n_test_sets):
        set_rng = np.random.default_rng([seed, s + 1])
        draw = {}
        for c in novel:
            members = np.flatnonzero(labels == c)
            draw[c] = np.sort(set_rng.choice(members, size=len(members) // 6, replace=False))
        sets.append(draw)
    return SplitBundle(
        known, novel,
        np.sort(np.concatenate(train)), np.sort(np.concatenate(val)), np.sort(np.concatenate(test)),
        sets, seed,
    )


def check_split_invariants(bundle: SplitBundle, labels: np.ndarray) -> None:
    """Raise AssertionError if any split invariant fails."""
    labels = np.asarray(labels, dtype=int)
    tr, va, te = (set(bundle.train.tolist()), set(bundle.validation.tolist()), set(bundle.known_test.tolist()))
    assert not (tr & va) and not (tr & te) and not (va & te), "known splits overlap"
    known = set(bundle.known)
    for name, part in (("train", tr), ("validation", va), ("known_test", te)):
        assert all(labels[i] in known for i in part), f"non-known sample in {name}"
    for c in bundle.known:
        n = int(np.sum(labels == c))
        ntr = sum(labels[i] == c for i in tr)
        nva = sum(labels[i] == c for i in va)
        nte = sum(labels[i] == c for i in te)
        assert ntr + nva + nte == n, f"class {c} not partitioned"
        assert ntr == _round_half_up(2 * n / 3), f"class {c} train size"
        assert abs(nva - n / 6) <= 1 and abs(nte - n / 6) <= 1, f"class {c} val/test size"
    for s in bundle.novel_test_sets:
        assert sorted(s) == sorted(bundle.novel), "novel set misses a class"
        for c, idx in s.items():
            assert len(idx) == int(np.sum(labels == c)) // 6, f"novel class {c} draw size"
            assert len(set(idx.tolist())) == len(idx), f"duplicate rows for novel class {c}"
            assert np.all(labels[idx] == c), f"wrong class in novel draw {c}"
            assert not (set(idx.tolist()) & (tr | va)), "novel sample leaked into train/validation"


# -- synthetic benchmark ---------------------------------------------------


@dataclass
class SynthConfig:
    n_classes: int = 5
    samples_per_class: int | list[int] = 600
    n_numeric: int = 12
    separation: float = 10.0
    sigma: float = 1.0
    means: list[list[float]] | None = None
    covariances: list[list[list[float]]] | None = None
    n_categorical: int = 0
    n_levels: int = 3
    missing_rate: float = 0.0
    encounters_per_patient: int = 5
    class_prefix: str = "class"
    seed: int = 0


def _class_means(cfg: SynthConfig) -> np.ndarray:
    if cfg.means is not None:
        means = np.asarray(cfg.means, dtype=float)
        if means.shape != (cfg.n_classes, cfg.n_numeric):
            raise RejectedConfigurationError("means must be n_classes x n_numeric")
        return means
    if cfg.n_classes > cfg.n_numeric:
        raise RejectedConfigurationError("default mean placement needs n_numeric >= n_classes")
    # scaled unit vectors: every pair of class means is `separation` sigmas apart
    means = np.zeros((cfg.n_classes, cfg.n_numeric))
    means[np.arange(cfg.n_classes), np.arange(cfg.n_classes)] = cfg.separation * cfg.sigma / np.sqrt(2.0)
    return means


def synth_generate(cfg: SynthConfig) -> tuple[RawTable, Schema, dict[str, Any]]:
    """Per-class Gaussian numeric features, optional per-class categoricals, MCAR gaps.

    Rows of one class are grouped into patients of ``encounters_per_patient``
    consecutive encounters. Returns the table, its schema and a ground-truth
    record of every generating parameter.
    """
    if cfg.n_classes < 3:
        raise RejectedConfigurationError("need at least 3 classes")
    if not 0.0 <= cfg.missing_rate < 1.0:
        raise RejectedConfigurationError("missing_rate must be in [0, 1)")
    rng = np.random.default_rng(cfg.seed)
    sizes = cfg.samples_per_class
    sizes = [int(sizes)] * cfg.n_classes if np.isscalar(sizes) else [int(s) for s in sizes]
    if len(sizes) != cfg.n_classes:
        raise RejectedConfigurationError("samples_per_class needs one entry per class")
    means = _class_means(cfg)
    if cfg.covariances is not None:
        covs = np.asarray(cfg.covariances, dtype=float)
    else:
        covs = np.stack([np.eye(cfg.n_numeric) * cfg.sigma**2] * cfg.n_classes)
    if covs.shape != (cfg.n_classes, cfg.n_numeric, cfg.n_numeric):
        raise RejectedConfigurationError("covariances must be n_classes x d x d")
    chols = []
    for c, cov in enumerate(covs):
        if not np.allclose(cov, cov.T):
            raise RejectedConfigurationError(f"covariance of class {c} is not symmetric")
        try:
            chols.append(np.linalg.cholesky(cov))
        except np.linalg.LinAlgError:
            raise RejectedConfigurationError(f"covariance of class {c} is not positive definite") from None
    names = [f"{cfg.class_prefix}{c + 1}" for c in range(cfg.n_classes)]
    levels = [f"L{j + 1}" for j in range(cfg.n_levels)]
    cat_probs = rng.dirichlet(np.ones(cfg.n_levels), size=(cfg.n_classes, cfg.n_categorical))

    numeric_cols = [f"x{j + 1}" for j in range(cfg.n_numeric)]
    cat_cols = [f"cat{j + 1}" for j in range(cfg.n_categorical)]
    rows_num, rows_cat, rows_label, rows_pid, rows_order = [], [], [], [], []
    pid_counter = 0
    for c in range(cfg.n_classes):
        n = sizes[c]
        x = means[c] + rng.standard_normal((n, cfg.n_numeric)) @ chols[c].T
        rows_num.append(x)
        cats = np.empty((n, cfg.n_categorical), dtype=object)
        for j in range(cfg.n_categorical):
            cats[:, j] = np.asarray(levels, dtype=object)[rng.choice(cfg.n_levels, size=n, p=cat_probs[c, j])]
        rows_cat.append(cats)
        rows_label += [names[c]] * n
        for i in range(n):
            if i % cfg.encounters_per_patient == 0:
                pid_counter += 1
            rows_pid.append(f"p{pid_counter:05d}")
            rows_order.append(float(i % cfg.encounters_per_patient + 1))
    X = np.vstack(rows_num)
    if cfg.missing_rate > 0:
        X = np.where(rng.random(X.shape) < cfg.missing_rate, np.nan, X)
    cats = np.vstack(rows_cat) if cfg.n_categorical else np.empty((len(X), 0), dtype=object)

    columns = [ColumnSpec("patient_id", "patient_id"), ColumnSpec("encounter", "encounter_order")]
    columns += [ColumnSpec(n_, "numeric") for n_ in numeric_cols]
    columns += [ColumnSpec(n_, "categorical", levels) for n_ in cat_cols]
    columns += [ColumnSpec("label", "label", names)]
    schema = Schema(columns)
    data = {"patient_id": rows_pid, "encounter": rows_order}
    for j, n_ in enumerate(numeric_cols):
        data[n_] = X[:, j]
    for j, n_ in enumerate(cat_cols):
        data[n_] = cats[:, j]
    data["label"] = rows_label
    frame = pd.DataFrame(data, columns=schema.names)
    for n_ in cat_cols + ["patient_id", "label"]:
        frame[n_] = frame[n_].astype(object)
    truth = {
        "class_names": names,
        "samples_per_class": sizes,
        "means": means.tolist(),
        "covariances": covs.tolist(),
        "categorical_levels": levels,
        "categorical_probabilities": cat_probs.tolist(),
        "missing_rate": cfg.missing_rate,
        "seed": cfg.seed,
    }
    return RawTable(schema, frame), schema, truth
