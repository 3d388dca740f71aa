"""Synthetic mixed-shift data, delimited-text loading and environment splits."""

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import ConfigError, ParseError, SchemaError, ShapeError
from .logutil import logger
from .models import SimulationSpec
from .numerics import make_rng

STD_FLOOR = 1e-12

SIMULATION_NOTE = (
    "simulation: labels uniform on {0,1}; x_inv and x_sp are signed copies of a "
    "label flipped with probability 1-p_v and 1-p_s(t), plus Gaussian noise; "
    "p_s(t) is piecewise constant over t<0.5 and t>=0.5"
)

_SPLIT_FILE = re.compile(r"^(train|test)_env(\d+)\.")


@dataclass
class Batch:
    """Rows of one split: features, labels, optional env ids, aux and global index."""
    x: np.ndarray
    y: np.ndarray
    env: Optional[np.ndarray] = None
    aux: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2:
            raise ShapeError("features must be a matrix")
        n = self.x.shape[0]
        if self.y.shape != (n,):
            raise ShapeError(f"{self.y.size} labels for {n} rows")
        if self.env is not None and np.shape(self.env) != (n,):
            raise ShapeError("environment ids must match the row count")
        if self.aux is not None and (np.ndim(self.aux) != 2 or np.shape(self.aux)[0] != n):
            raise ShapeError("auxiliary matrix must have one row per sample")
        if self.index is not None and np.shape(self.index) != (n,):
            raise ShapeError("sample index must match the row count")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def inference_inputs(self) -> np.ndarray:
        """Auxiliary variables when present, features otherwise."""
        return self.aux if self.aux is not None and self.aux.shape[1] > 0 else self.x

    def take(self, rows: np.ndarray) -> "Batch":
        def pick(a):
            return None if a is None else a[rows]

        return Batch(x=self.x[rows], y=self.y[rows], env=pick(self.env), aux=pick(self.aux), index=pick(self.index))


@dataclass
class Dataset:
    """Train and test environments sharing one feature layout."""
    train: List[Batch]
    test: List[Batch]
    feature_names: List[str]
    aux_names: List[str] = field(default_factory=list)
    has_env_ids: bool = True
    provenance: List[str] = field(default_factory=list)
    spec: Optional[SimulationSpec] = None

    def __post_init__(self):
        widths = {b.x.shape[1] for b in (*self.train, *self.test)}
        if len(widths) > 1:
            raise ShapeError(f"feature width differs across splits: {sorted(widths)}")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_train_envs(self) -> int:
        return len(self.train)

    @property
    def aux_dim(self) -> int:
        return len(self.aux_names)

    def pooled_train(self) -> Batch:
        """All training rows with env ids 0..E-1 and a global sample index."""
        x = np.vstack([b.x for b in self.train])
        y = np.concatenate([b.y for b in self.train])
        env = np.concatenate([np.full(len(b), k, dtype=int) for k, b in enumerate(self.train)])
        aux = np.vstack([b.aux for b in self.train]) if self.aux_names else None
        return Batch(
            x=x,
            y=y,
            env=env if self.has_env_ids else None,
            aux=aux,
            index=np.arange(len(y)),
        )


def _draw_environment(
    rng: np.random.Generator, t: np.ndarray, p_s: np.ndarray, spec: SimulationSpec, env_id: int
) -> Batch:
    n = t.size
    a, b = spec.feature_scale
    y = rng.integers(0, 2, size=n)
    y_inv = np.where(rng.random(n) < spec.p_v, y, 1 - y)
    y_sp = np.where(rng.random(n) < p_s, y, 1 - y)
    x_inv = (2 * y_inv - 1) * a + rng.normal(0.0, spec.noise_std, size=n)
    x_sp = (2 * y_sp - 1) * b + rng.normal(0.0, spec.noise_std, size=n)
    return Batch(
        x=np.column_stack([x_inv, x_sp]),
        y=y.astype(float),
        env=np.full(n, env_id, dtype=int),
        aux=t[:, None],
    )


def generate_simulation(spec: SimulationSpec) -> Dataset:
    """Two time-segment training environments and one test environment per p_s_test entry."""
    rng = make_rng(spec.seed)
    n = spec.n_per_env
    p_lo, p_hi = spec.p_s_train

    train = []
    for k, (start, stop, p_s) in enumerate(((0.0, 0.5, p_lo), (0.5, 1.0, p_hi))):
        t = rng.uniform(start, stop, size=n)
        train.append(_draw_environment(rng, t, np.full(n, p_s), spec, k))

    test = []
    for k, p_s in enumerate(spec.p_s_test):
        t = rng.uniform(0.0, 1.0, size=n)
        test.append(_draw_environment(rng, t, np.full(n, p_s), spec, k))

    logger.info("generated %d train and %d test environments of %d rows", len(train), len(test), n)
    return Dataset(
        train=train,
        test=test,
        feature_names=["x_inv", "x_sp"],
        aux_names=["t"],
        provenance=[SIMULATION_NOTE],
        spec=spec,
    )


@dataclass(frozen=True)
class ReferenceAccuracy:
    """Accuracy of the two single-feature threshold rules on one split."""
    split: str
    env: int
    invariant: float
    spurious: float


def split_metrics_oracle(dataset: Dataset) -> List[ReferenceAccuracy]:
    try:
        inv = dataset.feature_names.index("x_inv")
        sp = dataset.feature_names.index("x_sp")
    except ValueError as exc:
        raise SchemaError("reference rules need x_inv and x_sp features") from exc

    rows = []
    for split, batches in (("train", dataset.train), ("test", dataset.test)):
        for k, b in enumerate(batches):
            if len(b) == 0:
                continue
            label = b.y > 0.5
            rows.append(
                ReferenceAccuracy(
                    split=split,
                    env=k,
                    invariant=float(np.mean((b.x[:, inv] > 0) == label)),
                    spurious=float(np.mean((b.x[:, sp] > 0) == label)),
                )
            )
    return rows


def write_split_files(dataset: Dataset, out_dir: Path, delimiter: str = ",") -> List[Path]:
    """One delimited file per environment: train_env{k}.csv and test_env{k}.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = ".tsv" if delimiter == "\t" else ".csv"

    written = []
    for split, batches in (("train", dataset.train), ("test", dataset.test)):
        for k, b in enumerate(batches):
            frame = pd.DataFrame(b.x, columns=dataset.feature_names)
            # integer labels are written without a trailing ".0"
            frame["y"] = b.y.astype(int) if np.all(b.y == np.round(b.y)) else b.y
            frame["env_id"] = np.full(len(b), k, dtype=int)
            if b.aux is not None:
                for j, name in enumerate(dataset.aux_names):
                    frame[name] = b.aux[:, j]
            path = out_dir / f"{split}_env{k}{suffix}"
            frame.to_csv(
                path, sep=delimiter, index=False, lineterminator="\n", quoting=csv.QUOTE_NONE, encoding="utf-8"
            )
            written.append(path)
    logger.info("wrote %d split files to %s", len(written), out_dir)
    return written


@dataclass
class _Table:
    x: np.ndarray
    y: np.ndarray
    env: Optional[np.ndarray]
    aux: np.ndarray
    feature_names: List[str]
    aux_names: List[str]


def _check_schema(path: Path, header: List[str], schema: Dict[str, str]) -> None:
    unknown = [c for c in header if c not in schema]
    if unknown:
        raise SchemaError(f"{path}: columns without a role: {', '.join(unknown)}")
    missing = [c for c in schema if c not in header]
    if missing:
        raise SchemaError(f"{path}: schema columns missing from header: {', '.join(missing)}")
    roles = [schema[c] for c in header]
    if roles.count("label") != 1:
        raise SchemaError(f"{path}: exactly one label column is required")
    if roles.count("env_id") > 1:
        raise SchemaError(f"{path}: at most one env_id column is allowed")
    if roles.count("feature") == 0:
        raise SchemaError(f"{path}: no feature columns")


def _read_cells(path: Path, delimiter: str) -> Tuple[List[str], pd.DataFrame]:
    """Header names and every data cell as raw text, labelled by 0-based file line."""
    try:
        raw = pd.read_csv(
            path,
            sep=delimiter,
            header=None,
            dtype=str,
            keep_default_na=False,
            quoting=csv.QUOTE_NONE,
            skip_blank_lines=False,
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: missing header row") from None
    except pd.errors.ParserError as e:
        line = re.search(r"line (\d+)", str(e))
        raise ParseError(
            "row has more cells than the header", str(path), int(line.group(1)) if line else 0, "<extra>"
        ) from None

    header = [str(h).strip() for h in raw.iloc[0].fillna("")]
    if not any(header):
        raise SchemaError(f"{path}: missing header row")
    cells = raw.iloc[1:]
    blank = cells.replace(r"^\s*$", np.nan, regex=True).isna().all(axis=1)
    return header, cells[~blank]


def _read_table(path: Path, schema: Dict[str, str], delimiter: str) -> _Table:
    header, cells = _read_cells(path, delimiter)
    _check_schema(path, header, schema)

    short = cells.isna().any(axis=1)
    if short.any():
        line = short.idxmax()
        found = int(cells.loc[line].notna().sum())
        raise ParseError(
            f"expected {len(header)} cells, found {found}", str(path), int(line) + 1, header[max(found, 1) - 1]
        )

    wanted = [(j, name, schema[name]) for j, name in enumerate(header) if schema[name] != "ignore"]
    text = np.char.strip(cells.iloc[:, [j for j, _, _ in wanted]].to_numpy(dtype=str))
    parsed = pd.to_numeric(pd.Series(text.ravel(), dtype=object), errors="coerce")
    bad = ~np.isfinite(parsed.to_numpy(dtype=float).reshape(text.shape))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        cell = text[r, c]
        reason = "quoted fields are not supported" if '"' in cell or "'" in cell else f"malformed number '{cell}'"
        raise ParseError(reason, str(path), int(cells.index[r]) + 1, wanted[c][1])
    # numpy's decimal conversion is correctly rounded, so written values read back exactly
    values = text.astype(float).reshape(len(cells), len(wanted))

    by_role: Dict[str, List[int]] = {}
    names: Dict[str, List[str]] = {}
    for col, (_, name, role) in enumerate(wanted):
        by_role.setdefault(role, []).append(col)
        names.setdefault(role, []).append(name)

    env = None
    if "env_id" in by_role:
        raw = values[:, by_role["env_id"][0]]
        if np.any(raw != np.round(raw)):
            bad_row = int(np.flatnonzero(raw != np.round(raw))[0])
            raise ParseError(
                "environment id must be an integer", str(path), int(cells.index[bad_row]) + 1, names["env_id"][0]
            )
        env = raw.astype(int)

    return _Table(
        x=values[:, by_role["feature"]],
        y=values[:, by_role["label"][0]],
        env=env,
        aux=values[:, by_role.get("aux", [])],
        feature_names=names["feature"],
        aux_names=names.get("aux", []),
    )


def _to_batch(table: _Table, rows: Optional[np.ndarray] = None, env_id: Optional[int] = None) -> Batch:
    sel = slice(None) if rows is None else rows
    n = table.y[sel].size
    return Batch(
        x=table.x[sel],
        y=table.y[sel],
        env=None if env_id is None else np.full(n, env_id, dtype=int),
        aux=table.aux[sel] if table.aux_names else None,
    )


def _split_files(directory: Path) -> Tuple[List[Path], List[Path]]:
    found: Dict[str, List[Tuple[int, Path]]] = {"train": [], "test": []}
    for p in directory.iterdir():
        m = _SPLIT_FILE.match(p.name)
        if m and p.is_file():
            found[m.group(1)].append((int(m.group(2)), p))
    return [p for _, p in sorted(found["train"])], [p for _, p in sorted(found["test"])]


def standardize(dataset: Dataset) -> Dataset:
    """Zero-mean unit-variance features using train statistics; std floored at 1e-12."""
    pooled = np.vstack([b.x for b in dataset.train])
    mean = pooled.mean(axis=0)
    std = np.maximum(pooled.std(axis=0), STD_FLOOR)

    def scale(b: Batch) -> Batch:
        return replace(b, x=(b.x - mean) / std)

    return replace(
        dataset,
        train=[scale(b) for b in dataset.train],
        test=[scale(b) for b in dataset.test],
    )


def load_delimited(
    path: Path,
    schema: Dict[str, str],
    delimiter: str = ",",
    test_envs: Sequence[int] = (),
    standardize_features: bool = True,
) -> Dataset:
    """Load a directory of per-environment split files or one file split by env_id."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"data path does not exist: {path}")

    if path.is_dir():
        train_files, test_files = _split_files(path)
        if not train_files:
            raise ConfigError(f"{path}: no train_env* files")
        train_tables = [_read_table(p, schema, delimiter) for p in train_files]
        test_tables = [_read_table(p, schema, delimiter) for p in test_files]
        first = train_tables[0]
        dataset = Dataset(
            train=[_to_batch(t, env_id=k) for k, t in enumerate(train_tables)],
            test=[_to_batch(t, env_id=k) for k, t in enumerate(test_tables)],
            feature_names=first.feature_names,
            aux_names=first.aux_names,
            provenance=[f"loaded from directory {path}"],
        )
    else:
        table = _read_table(path, schema, delimiter)
        if table.env is None:
            if test_envs:
                raise ConfigError("test_envs needs an env_id column")
            dataset = Dataset(
                train=[_to_batch(table)],
                test=[],
                feature_names=table.feature_names,
                aux_names=table.aux_names,
                has_env_ids=False,
                provenance=[f"loaded from {path} without environment ids"],
            )
        else:
            ids = sorted(set(table.env.tolist()))
            missing = [e for e in test_envs if e not in ids]
            if missing:
                raise ConfigError(f"test environments not present in {path}: {missing}")
            train_ids = [e for e in ids if e not in test_envs]
            dataset = Dataset(
                train=[_to_batch(table, table.env == e, k) for k, e in enumerate(train_ids)],
                test=[_to_batch(table, table.env == e, k) for k, e in enumerate(test_envs)],
                feature_names=table.feature_names,
                aux_names=table.aux_names,
                provenance=[f"loaded from {path}; test environments {list(test_envs)}"],
            )

    if not dataset.train or sum(len(b) for b in dataset.train) == 0:
        raise ConfigError(f"{path}: no training rows")
    return standardize(dataset) if standardize_features else dataset
