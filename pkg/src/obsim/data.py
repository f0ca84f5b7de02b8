"""Dataset ingestion, synthetic benchmark generation, and bias diagnostics.

Two tabular sources feed the model: field observations and simulator output.
They overlap on a subset of columns, are aligned row-by-row by date, and are
min-max scaled to [0,1].  Overlap columns are scaled with a joint min/max
across both sources so that an additive simulator bias survives scaling and
stays visible to the distribution-matching loss.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from . import numcore as nc

OBSERVED = "observed"
SIMULATED = "simulated"


class IngestError(ValueError):
    """Raised when input tables cannot be turned into a usable DualDataset."""


# ---------------------------------------------------------------------------
# raw tables


@dataclass
class RawTable:
    """A timestamped table with float-or-missing cells (NaN = missing)."""

    columns: list[str]
    dates: list[dt.date]
    values: np.ndarray
    source: str

    def __post_init__(self):
        if self.source not in (OBSERVED, SIMULATED):
            raise IngestError(f"unknown source tag {self.source!r}")
        lowered = [c.lower() for c in self.columns]
        if len(set(lowered)) != len(lowered):
            raise IngestError("column names must be unique (case-insensitive)")
        if any(b < a for a, b in zip(self.dates, self.dates[1:])):
            raise IngestError("timestamps must be non-decreasing")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.dates), len(self.columns)):
            raise IngestError(
                f"value shape {self.values.shape} does not match "
                f"{len(self.dates)} rows x {len(self.columns)} columns"
            )

    @classmethod
    def from_csv(cls, path: str | Path, source: str) -> "RawTable":
        """Read a CSV whose first column is an ISO-8601 date; empty cell = missing."""
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise IngestError(f"{path} is empty") from None
            if len(header) < 2:
                raise IngestError(f"{path} needs a date column plus data columns")
            columns = [c.strip() for c in header[1:]]
            dates, rows = [], []
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not cell.strip() for cell in row):
                    continue
                if len(row) != len(header):
                    raise IngestError(f"{path}:{lineno}: expected {len(header)} cells")
                dates.append(_parse_date(row[0].strip(), path, lineno))
                rows.append(
                    [
                        float(cell) if cell.strip() else np.nan
                        for cell in row[1:]
                    ]
                )
        if not rows:
            raise IngestError(f"{path} has no data rows")
        return cls(columns, dates, np.array(rows, dtype=np.float64), source)


def _parse_date(text: str, path: Path, lineno: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        try:
            return dt.datetime.fromisoformat(text).date()
        except ValueError:
            raise IngestError(f"{path}:{lineno}: bad ISO-8601 date {text!r}") from None


# ---------------------------------------------------------------------------
# the aligned dual dataset


@dataclass
class DualDataset:
    """Standardized observed and simulated tables plus their overlap map.

    Rows 0..aligned_rows-1 of both tables refer to the same dates, in order.
    The simulated table may have extra trailing rows (larger simulation runs).
    mask_obs is 1.0 exactly where the observed table had a genuine value.
    """

    obs_names: list[str]
    sim_names: list[str]
    x_obs: np.ndarray
    x_sim: np.ndarray
    mask_obs: np.ndarray
    overlap: list[tuple[int, int]]
    target_index: int
    obs_min: np.ndarray
    obs_max: np.ndarray
    sim_min: np.ndarray
    sim_max: np.ndarray
    dates: list[str] | None = None

    def __post_init__(self):
        n_obs, p = self.x_obs.shape
        n_sim, d = self.x_sim.shape
        if len(self.obs_names) != p or len(self.sim_names) != d:
            raise IngestError("column-name counts do not match matrix widths")
        if n_sim < n_obs:
            raise IngestError("simulated table must have at least as many rows")
        if self.mask_obs.shape != self.x_obs.shape:
            raise IngestError("mask shape must match x_obs")
        eps = 1e-9
        for name, mat in (("x_obs", self.x_obs), ("x_sim", self.x_sim)):
            if mat.size and (mat.min() < -eps or mat.max() > 1.0 + eps):
                raise IngestError(f"{name} has values outside [0,1]")
        obs_side = [i for i, _ in self.overlap]
        sim_side = [j for _, j in self.overlap]
        if len(set(obs_side)) != len(obs_side) or len(set(sim_side)) != len(sim_side):
            raise IngestError("overlap pairs must be injective on both sides")
        if any(not (0 <= i < p and 0 <= j < d) for i, j in self.overlap):
            raise IngestError("overlap pair references a missing column")
        if not 0 <= self.target_index < p:
            raise IngestError(f"target index {self.target_index} out of range")

    @property
    def aligned_rows(self) -> int:
        return self.x_obs.shape[0]

    @property
    def target_name(self) -> str:
        return self.obs_names[self.target_index]

    def unscale(self, values: np.ndarray, source: str) -> np.ndarray:
        lo, hi = (
            (self.obs_min, self.obs_max)
            if source == OBSERVED
            else (self.sim_min, self.sim_max)
        )
        return values * (hi - lo) + lo

    def subset_aligned(self, idx: np.ndarray) -> "DualDataset":
        """Row-resampled copy over the aligned prefix (bootstrap support)."""
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size == 0 or idx.max() >= self.aligned_rows:
            raise IngestError("resample indices must lie in the aligned prefix")
        return DualDataset(
            obs_names=list(self.obs_names),
            sim_names=list(self.sim_names),
            x_obs=self.x_obs[idx],
            x_sim=self.x_sim[idx],
            mask_obs=self.mask_obs[idx],
            overlap=list(self.overlap),
            target_index=self.target_index,
            obs_min=self.obs_min.copy(),
            obs_max=self.obs_max.copy(),
            sim_min=self.sim_min.copy(),
            sim_max=self.sim_max.copy(),
            dates=None,
        )

    def union_nodes(self) -> tuple[list[str], list[int | None], list[int | None]]:
        """Union variable set: every observed column, then sim-only columns.

        Returns (names, obs_col_of_node, sim_col_of_node) with None where a
        node is absent from a source.  Overlap pairs fuse into one node.
        """
        sim_of_obs = dict(self.overlap)
        names = list(self.obs_names)
        obs_cols: list[int | None] = list(range(len(self.obs_names)))
        sim_cols: list[int | None] = [sim_of_obs.get(i) for i in obs_cols]
        fused = set(sim_of_obs.values())
        for j, name in enumerate(self.sim_names):
            if j not in fused:
                names.append(name)
                obs_cols.append(None)
                sim_cols.append(j)
        return names, obs_cols, sim_cols


# ---------------------------------------------------------------------------
# ground-truth graphs


@dataclass
class GroundTruthGraph:
    nodes: list[str]
    adjacency: np.ndarray

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.int64)
        v = len(self.nodes)
        if self.adjacency.shape != (v, v):
            raise ValueError("adjacency must be square over the node list")
        if not np.isin(self.adjacency, (0, 1)).all():
            raise ValueError("adjacency entries must be 0/1")
        if np.trace(self.adjacency) != 0:
            raise ValueError("adjacency diagonal must be zero")
        g = nx.from_numpy_array(self.adjacency, create_using=nx.DiGraph)
        if not nx.is_directed_acyclic_graph(g):
            raise ValueError("ground-truth graph must be acyclic")

    def edges(self) -> list[tuple[str, str]]:
        src, dst = np.nonzero(self.adjacency)
        return [(self.nodes[i], self.nodes[j]) for i, j in zip(src, dst)]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            payload = {"nodes": self.nodes, "adjacency": self.adjacency.tolist()}
            path.write_text(json.dumps(payload, indent=2) + "\n")
        else:
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["src", "dst"])
                writer.writerows(self.edges())

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruthGraph":
        path = Path(path)
        if path.suffix == ".json":
            payload = json.loads(path.read_text())
            return cls(list(payload["nodes"]), np.array(payload["adjacency"]))
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            rows = [r for r in reader if r and any(c.strip() for c in r)]
        if rows and [c.strip().lower() for c in rows[0]] == ["src", "dst"]:
            rows = rows[1:]
        nodes: list[str] = []
        for row in rows:
            if len(row) != 2:
                raise ValueError(f"{path}: edge rows must be 'src,dst'")
            for name in (row[0].strip(), row[1].strip()):
                if name not in nodes:
                    nodes.append(name)
        index = {n: i for i, n in enumerate(nodes)}
        adj = np.zeros((len(nodes), len(nodes)), dtype=np.int64)
        for src, dst in rows:
            adj[index[src.strip()], index[dst.strip()]] = 1
        return cls(nodes, adj)


# ---------------------------------------------------------------------------
# ingest pipeline


@dataclass
class IngestConfig:
    target: str
    overlap_pairs: list[tuple[str, str]] | None = None
    max_missing_fraction: float = 0.5
    imputer_hidden: int = 32
    imputer_epochs: int = 200
    seed: int = 0


def ingest(raw_obs: RawTable, raw_sim: RawTable, config: IngestConfig) -> DualDataset:
    """Run the preprocessing pipeline and align the two tables by date.

    Steps: drop columns with more missing cells than the configured fraction,
    resample to daily cadence by mean, intersect dates, impute remaining
    observed gaps with a small feed-forward regressor, min-max scale, and
    build the overlap map by case-insensitive column-name match (or the
    explicit override pairs).
    """
    if raw_obs.source != OBSERVED or raw_sim.source != SIMULATED:
        raise IngestError("ingest expects (observed, simulated) tables in order")
    obs = _daily_mean(_drop_sparse_columns(raw_obs, config.max_missing_fraction))
    sim = _daily_mean(_drop_sparse_columns(raw_sim, config.max_missing_fraction))
    target_matches = [
        i for i, c in enumerate(obs.columns) if c.lower() == config.target.lower()
    ]
    if not target_matches:
        raise IngestError(
            f"target column {config.target!r} missing from the observed table "
            "(not present, or dropped by the missing-value rule)"
        )
    target_index = target_matches[0]

    obs, sim = _intersect_dates(obs, sim)
    if not obs.dates:
        raise IngestError("observed and simulated tables share no dates")

    rng = np.random.default_rng(config.seed)
    obs_filled, mask_obs = _impute_table(
        obs.values, rng, config.imputer_hidden, config.imputer_epochs
    )
    sim_filled, _ = _impute_table(
        sim.values, rng, config.imputer_hidden, config.imputer_epochs
    )

    overlap = _build_overlap(obs.columns, sim.columns, config.overlap_pairs)
    if not overlap:
        raise IngestError(
            "no overlapping columns between observed and simulated tables; "
            "distribution matching is undefined"
        )

    x_obs, x_sim, obs_min, obs_max, sim_min, sim_max = _scale_pair(
        obs_filled, sim_filled, overlap
    )
    return DualDataset(
        obs_names=obs.columns,
        sim_names=sim.columns,
        x_obs=x_obs,
        x_sim=x_sim,
        mask_obs=mask_obs,
        overlap=overlap,
        target_index=target_index,
        obs_min=obs_min,
        obs_max=obs_max,
        sim_min=sim_min,
        sim_max=sim_max,
        dates=[d.isoformat() for d in obs.dates],
    )


def _drop_sparse_columns(table: RawTable, max_fraction: float) -> RawTable:
    missing = np.isnan(table.values).mean(axis=0)
    keep = [i for i, frac in enumerate(missing) if frac <= max_fraction]
    if not keep:
        raise IngestError(f"every {table.source} column exceeds the missing limit")
    return RawTable(
        [table.columns[i] for i in keep],
        list(table.dates),
        table.values[:, keep],
        table.source,
    )


def _daily_mean(table: RawTable) -> RawTable:
    """Collapse same-date rows by per-cell mean over present values."""
    order = np.argsort(np.array([d.toordinal() for d in table.dates]), kind="stable")
    values = table.values[order]
    dates = [table.dates[i] for i in order]
    out_dates: list[dt.date] = []
    out_rows: list[np.ndarray] = []
    start = 0
    for i in range(1, len(dates) + 1):
        if i == len(dates) or dates[i] != dates[start]:
            block = values[start:i]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices
                out_rows.append(np.nanmean(block, axis=0))
            out_dates.append(dates[start])
            start = i
    return RawTable(list(table.columns), out_dates, np.vstack(out_rows), table.source)


def _intersect_dates(a: RawTable, b: RawTable) -> tuple[RawTable, RawTable]:
    shared = sorted(set(a.dates) & set(b.dates))
    index_a = {d: i for i, d in enumerate(a.dates)}
    index_b = {d: i for i, d in enumerate(b.dates)}
    rows_a = [index_a[d] for d in shared]
    rows_b = [index_b[d] for d in shared]
    return (
        RawTable(list(a.columns), shared, a.values[rows_a], a.source),
        RawTable(list(b.columns), shared, b.values[rows_b], b.source),
    )


def _impute_table(
    values: np.ndarray, rng: np.random.Generator, hidden: int, epochs: int
) -> tuple[np.ndarray, np.ndarray]:
    """Fill NaN cells; mask is 1.0 where the value was genuinely present.

    A one-hidden-layer regressor maps the complete columns to the incomplete
    ones, trained on present cells only.  With no complete column to condition
    on, falls back to column means.
    """
    present = ~np.isnan(values)
    mask = present.astype(np.float64)
    filled = values.copy()
    col_means = np.zeros(values.shape[1])
    for j in range(values.shape[1]):
        if present[:, j].any():
            col_means[j] = values[present[:, j], j].mean()
    incomplete = [j for j in range(values.shape[1]) if not present[:, j].all()]
    if not incomplete:
        return filled, mask
    complete = [j for j in range(values.shape[1]) if present[:, j].all()]
    if not complete:
        warnings.warn(
            "no complete columns to train the imputer; falling back to column means",
            stacklevel=2,
        )
        for j in incomplete:
            filled[~present[:, j], j] = col_means[j]
        return filled, mask

    x = values[:, complete]
    x_mu, x_sd = x.mean(axis=0), x.std(axis=0)
    x_sd[x_sd == 0.0] = 1.0
    xs = (x - x_mu) / x_sd
    y = np.where(present[:, incomplete], values[:, incomplete], 0.0)
    y_mu = col_means[incomplete]
    y_sd = np.array(
        [
            values[present[:, j], j].std() if present[:, j].any() else 1.0
            for j in incomplete
        ]
    )
    y_sd[y_sd == 0.0] = 1.0
    ys = (y - y_mu) / y_sd
    w = mask[:, incomplete]

    params = {
        "w1": nc.Tensor(nc.glorot(rng, len(complete), hidden), requires_grad=True),
        "b1": nc.Tensor(np.zeros((1, hidden)), requires_grad=True),
        "w2": nc.Tensor(nc.glorot(rng, hidden, len(incomplete)), requires_grad=True),
        "b2": nc.Tensor(np.zeros((1, len(incomplete))), requires_grad=True),
    }
    state = nc.AdamState()
    xs_t, ys_t, w_t = nc.Tensor(xs), nc.Tensor(ys), nc.Tensor(w)
    denom = max(w.sum(), 1.0)
    for _ in range(epochs):
        with nc.Tape() as tape:
            h = nc.tanh(nc.add(nc.matmul(xs_t, params["w1"]), params["b1"]))
            pred = nc.add(nc.matmul(h, params["w2"]), params["b2"])
            err = nc.mul(nc.square(nc.sub(pred, ys_t)), w_t)
            loss = nc.mul(nc.tsum(err), 1.0 / denom)
            grads = nc.backward(tape, loss)
        nc.adam_step(state, params, {k: grads[t] for k, t in params.items()})

    h = np.tanh(xs @ params["w1"].value + params["b1"].value)
    pred = (h @ params["w2"].value + params["b2"].value) * y_sd + y_mu
    for col_pos, j in enumerate(incomplete):
        gaps = ~present[:, j]
        filled[gaps, j] = pred[gaps, col_pos]
    return filled, mask


def _build_overlap(
    obs_columns: list[str],
    sim_columns: list[str],
    override: list[tuple[str, str]] | None,
) -> list[tuple[int, int]]:
    obs_index = {c.lower(): i for i, c in enumerate(obs_columns)}
    sim_index = {c.lower(): j for j, c in enumerate(sim_columns)}
    if override is not None:
        pairs = []
        for obs_name, sim_name in override:
            if obs_name.lower() not in obs_index:
                raise IngestError(f"overlap override names unknown column {obs_name!r}")
            if sim_name.lower() not in sim_index:
                raise IngestError(f"overlap override names unknown column {sim_name!r}")
            pairs.append((obs_index[obs_name.lower()], sim_index[sim_name.lower()]))
        return pairs
    return [
        (i, sim_index[c.lower()])
        for i, c in enumerate(obs_columns)
        if c.lower() in sim_index
    ]


def _scale_pair(
    obs_values: np.ndarray, sim_values: np.ndarray, overlap: list[tuple[int, int]]
) -> tuple[np.ndarray, ...]:
    """Min-max scale both tables; overlap columns share a joint min/max."""
    obs_min = obs_values.min(axis=0)
    obs_max = obs_values.max(axis=0)
    sim_min = sim_values.min(axis=0)
    sim_max = sim_values.max(axis=0)
    for i, j in overlap:
        lo = min(obs_min[i], sim_min[j])
        hi = max(obs_max[i], sim_max[j])
        obs_min[i] = sim_min[j] = lo
        obs_max[i] = sim_max[j] = hi
    return (
        _apply_scale(obs_values, obs_min, obs_max),
        _apply_scale(sim_values, sim_min, sim_max),
        obs_min,
        obs_max,
        sim_min,
        sim_max,
    )


def _apply_scale(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    out = np.zeros_like(values)
    ok = span > 0
    out[:, ok] = (values[:, ok] - lo[ok]) / span[ok]
    return out


# ---------------------------------------------------------------------------
# synthetic observed/simulated pairs with known ground truth


@dataclass
class SyntheticSpec:
    """Configuration of the SEM benchmark generator.

    The simulator side runs the same structural equations as the observed
    side, shares exogenous noise on the aligned row prefix, and then deviates
    by additive shifts on chosen columns plus extra simulator-only downstream
    variables (systematic simulator bias).
    """

    n_nodes: int = 10
    edge_prob: float = 0.3
    nonlinear: bool = False
    noise_scale: float = 0.1
    n_shifted: int = 3
    shift_sigma: float = 0.5
    n_sim_only: int = 4
    n_obs: int = 500
    n_sim: int = 2000
    missing_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("need at least 2 nodes")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ValueError("edge_prob must be in [0,1]")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0,1)")
        if self.n_sim < self.n_obs:
            raise ValueError("n_sim must be >= n_obs")
        if self.n_shifted > self.n_nodes:
            raise ValueError("cannot shift more columns than exist")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "edge_prob": self.edge_prob,
            "nonlinear": self.nonlinear,
            "noise_scale": self.noise_scale,
            "n_shifted": self.n_shifted,
            "shift_sigma": self.shift_sigma,
            "n_sim_only": self.n_sim_only,
            "n_obs": self.n_obs,
            "n_sim": self.n_sim,
            "missing_rate": self.missing_rate,
            "seed": self.seed,
        }


@dataclass
class _Sem:
    """Sampled structural equations for the base variables plus extras."""

    order: np.ndarray
    parents: list[np.ndarray]
    mechanisms: list[dict]
    noise_ratio: np.ndarray


def _sample_mechanism(rng: np.random.Generator, n_par: int, nonlinear: bool) -> dict:
    def coef(size):
        return rng.uniform(0.5, 2.0, size=size) * rng.choice((-1.0, 1.0), size=size)

    if not nonlinear or n_par == 0:
        return {"kind": "linear", "w": coef(n_par)}
    return {"kind": "mlp", "w1": coef((n_par, 4)), "w2": coef(4)}


def _apply_mechanism(mech: dict, parents: np.ndarray) -> np.ndarray:
    if mech["kind"] == "linear":
        return parents @ mech["w"] if parents.shape[1] else np.zeros(parents.shape[0])
    return np.tanh(parents @ mech["w1"]) @ mech["w2"]


def _evaluate_sem(sem: _Sem, z: np.ndarray) -> np.ndarray:
    """Evaluate the SEM on standard-normal exogenous draws z.

    noise_sd holds per-node noise-to-signal ratios: each child's noise sd is
    ratio * sd(parent mechanism output), so min/max scaling cannot erase it.
    Roots are pure unit-scale noise.
    """
    values = np.zeros_like(z)
    for node in sem.order:
        par = sem.parents[node]
        signal = _apply_mechanism(sem.mechanisms[node], values[:, par])
        if len(par):
            base = float(signal.std())
            sd = sem.noise_ratio[node] * (base if base > 0 else 1.0)
        else:
            sd = 1.0
        values[:, node] = signal + sd * z[:, node]
    return values


def generate_synthetic_pair(
    spec: SyntheticSpec,
) -> tuple[DualDataset, GroundTruthGraph]:
    """Sample a DAG and SEM, then emit the aligned observed/simulated pair.

    The first n_obs simulated rows reuse the observed exogenous noise, so the
    two sources genuinely describe the same days before bias is applied.
    Missing observed cells are filled with column means (mask 0); the full
    imputation network only runs in the CSV ingest path.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_nodes
    total = n + spec.n_sim_only

    order = rng.permutation(n)
    rank = np.empty(n, dtype=np.intp)
    rank[order] = np.arange(n)
    adj = np.zeros((total, total), dtype=np.int64)
    parents: list[np.ndarray] = [np.empty(0, dtype=np.intp)] * total
    for pos, node in enumerate(order):
        earlier = order[:pos]
        chosen = earlier[rng.random(pos) < spec.edge_prob]
        parents[node] = np.sort(chosen)
        adj[parents[node], node] = 1
    for e in range(spec.n_sim_only):
        node = n + e
        pool = np.arange(node)
        n_par = int(rng.integers(1, min(3, node) + 1))
        chosen = rng.choice(pool, size=n_par, replace=False)
        parents[node] = np.sort(chosen)
        adj[parents[node], node] = 1

    mechanisms = [
        _sample_mechanism(rng, len(parents[v]), spec.nonlinear) for v in range(total)
    ]
    noise_ratio = spec.noise_scale * rng.uniform(0.5, 1.5, size=total)
    full_order = np.concatenate([order, np.arange(n, total)])
    sem = _Sem(full_order, parents, mechanisms, noise_ratio)

    z_sim = rng.normal(size=(spec.n_sim, total))
    sim_values = _evaluate_sem(sem, z_sim)
    obs_values = sim_values[: spec.n_obs, :n].copy()

    shifted = rng.choice(n, size=spec.n_shifted, replace=False) if spec.n_shifted else []
    for col in shifted:
        sim_values[:, col] += spec.shift_sigma * sim_values[:, col].std()

    missing = rng.random(obs_values.shape) < spec.missing_rate
    for j in range(n):  # keep every column estimable
        if missing[:, j].all():
            missing[rng.integers(spec.n_obs), j] = False
    mask = (~missing).astype(np.float64)
    filled = obs_values.copy()
    for j in range(n):
        filled[missing[:, j], j] = obs_values[~missing[:, j], j].mean()

    overlap = [(i, i) for i in range(n)]
    x_obs, x_sim, obs_min, obs_max, sim_min, sim_max = _scale_pair(
        filled, sim_values, overlap
    )

    obs_names = [f"x{i}" for i in range(n)]
    sim_names = obs_names + [f"u{e}" for e in range(spec.n_sim_only)]
    target_index = int(order[-1])
    ds = DualDataset(
        obs_names=obs_names,
        sim_names=sim_names,
        x_obs=x_obs,
        x_sim=x_sim,
        mask_obs=mask,
        overlap=overlap,
        target_index=target_index,
        obs_min=obs_min,
        obs_max=obs_max,
        sim_min=sim_min,
        sim_max=sim_max,
    )
    truth = GroundTruthGraph(sim_names, adj)
    return ds, truth


# ---------------------------------------------------------------------------
# simulator-bias diagnostics


@dataclass
class BiasEntry:
    obs_name: str
    sim_name: str
    mean_diff: float
    hist_kl: float


def histogram_kl(
    sample_p: np.ndarray, sample_q: np.ndarray, bins: int = 20
) -> float:
    """KL(p || q) between 20-bin histograms of [0,1] with add-one smoothing."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    cp, _ = np.histogram(np.clip(sample_p, 0.0, 1.0), bins=edges)
    cq, _ = np.histogram(np.clip(sample_q, 0.0, 1.0), bins=edges)
    p = (cp + 1.0) / (cp.sum() + bins)
    q = (cq + 1.0) / (cq.sum() + bins)
    return float(np.sum(p * np.log(p / q)))


def overlap_divergence(
    x_obs: np.ndarray,
    x_sim: np.ndarray,
    overlap: list[tuple[int, int]],
) -> list[tuple[float, float]]:
    """Per overlap pair: (sim-minus-obs mean difference, histogram KL sim||obs)."""
    out = []
    for i, j in overlap:
        obs_col, sim_col = x_obs[:, i], x_sim[:, j]
        out.append(
            (
                float(sim_col.mean() - obs_col.mean()),
                histogram_kl(sim_col, obs_col),
            )
        )
    return out


def bias_report(ds: DualDataset) -> list[BiasEntry]:
    """Overlap columns ranked by histogram KL between the two marginals."""
    if not ds.overlap:
        raise IngestError("bias_report needs at least one overlap column")
    stats = overlap_divergence(ds.x_obs, ds.x_sim, ds.overlap)
    entries = [
        BiasEntry(ds.obs_names[i], ds.sim_names[j], diff, kl)
        for (i, j), (diff, kl) in zip(ds.overlap, stats)
    ]
    entries.sort(key=lambda e: e.hist_kl, reverse=True)
    return entries
