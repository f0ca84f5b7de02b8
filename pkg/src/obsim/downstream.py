"""Skeleton-conditioned regressors with out-of-distribution evaluation.

Every predictor sees the same (rows, variables) feature matrix; the target
column is structurally masked to zero before any forward pass, so a model can
only reach the target's value through the readout on the target node.  Graph
predictors propagate messages parent-to-child along a fixed binary skeleton;
the plain MLP ignores the skeleton and reads all features at once, which is
exactly the contrast the out-of-distribution splits are built to expose.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import data as od
from . import numcore as nc

KINDS = ("ecmpnn", "sage", "mlp", "random_guess")
AGGREGATORS = ("mean", "sum")


@dataclass
class SiteDataset:
    """Feature rows tagged with the site (collection regime) they came from."""

    node_names: list[str]
    features: np.ndarray
    site_ids: np.ndarray
    target_index: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.site_ids = np.asarray(self.site_ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be 2-d")
        n, v = self.features.shape
        if len(self.node_names) != v:
            raise ValueError("node-name count must match the feature width")
        if self.site_ids.shape != (n,):
            raise ValueError("site_ids must have one entry per row")
        if not 0 <= self.target_index < v:
            raise ValueError("target index out of range")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")

    @property
    def target(self) -> np.ndarray:
        return self.features[:, self.target_index]


@dataclass
class SplitSpec:
    """Which sites train, which test, and how many test rows leak into training."""

    train_sites: tuple[int, ...]
    test_sites: tuple[int, ...]
    few_shot_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.train_sites = tuple(self.train_sites)
        self.test_sites = tuple(self.test_sites)
        if set(self.train_sites) & set(self.test_sites):
            raise ValueError("train and test sites must be disjoint")
        if not self.train_sites or not self.test_sites:
            raise ValueError("need at least one train site and one test site")
        if not 0.0 <= self.few_shot_fraction < 1.0:
            raise ValueError("few_shot_fraction must lie in [0, 1)")


def split_rows(split: SplitSpec, data: SiteDataset) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train_idx, test_idx); fraction 0 reduces to pure zero-shot."""
    train = np.flatnonzero(np.isin(data.site_ids, split.train_sites))
    test_pool = np.flatnonzero(np.isin(data.site_ids, split.test_sites))
    if len(train) == 0 or len(test_pool) == 0:
        raise ValueError("a named site has no rows")
    k = int(round(split.few_shot_fraction * len(test_pool)))
    if k > 0:
        order = np.random.default_rng(split.seed).permutation(len(test_pool))
        moved = test_pool[order[:k]]
        held = np.sort(test_pool[order[k:]])
        return np.sort(np.concatenate([train, moved])), held
    return np.sort(train), np.sort(test_pool)


@dataclass
class PredictorConfig:
    kind: str
    skeleton: np.ndarray | None = None
    layers: int = 2
    hidden: int = 16
    aggregator: str = "mean"
    undirected: bool = False
    seed: int = 0
    lr: float = 1e-2
    epochs: int = 300
    patience: int = 30

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden width must be positive")
        if self.epochs < 1 or self.lr <= 0 or self.patience < 1:
            raise ValueError("epochs, lr, and patience must be positive")
        if self.kind in ("ecmpnn", "sage"):
            if self.skeleton is None:
                raise ValueError(f"{self.kind} requires a skeleton adjacency")
            self.skeleton = np.asarray(self.skeleton)
            v = self.skeleton.shape[0]
            if self.skeleton.ndim != 2 or self.skeleton.shape != (v, v):
                raise ValueError("skeleton must be square")
            if not np.isin(self.skeleton, (0, 1)).all():
                raise ValueError("skeleton entries must be 0/1")
            if self.undirected:
                self.skeleton = ((self.skeleton + self.skeleton.T) > 0).astype(np.int64)


class Predictor:
    """One regressor; build via fit_predictor so parameters are trained."""

    def __init__(self, config: PredictorConfig, n_nodes: int, target_index: int):
        if config.kind in ("ecmpnn", "sage") and config.skeleton.shape[0] != n_nodes:
            raise ValueError("skeleton size must match the feature width")
        if not 0 <= target_index < n_nodes:
            raise ValueError("target index out of range")
        self.config = config
        self.n_nodes = n_nodes
        self.target_index = target_index
        self.params: dict[str, nc.Tensor] = {}
        self.train_targets: np.ndarray | None = None
        self.val_mse: float = float("inf")
        if config.kind != "random_guess":
            self.params = self._init_params(np.random.default_rng(config.seed))

    def _init_params(self, rng: np.random.Generator) -> dict[str, nc.Tensor]:
        cfg, v = self.config, self.n_nodes
        shapes: dict[str, tuple[int, int]] = {}
        if cfg.kind == "mlp":
            shapes["w_in"] = (v, cfg.hidden)
            shapes["b_in"] = (1, cfg.hidden)
            for layer in range(1, cfg.layers):
                shapes[f"w{layer}"] = (cfg.hidden, cfg.hidden)
                shapes[f"b{layer}"] = (1, cfg.hidden)
        else:
            # Shared scalar lift: every node uses the same (1 -> hidden) map, so
            # the network never learns node identities from input position.
            shapes["w_in"] = (1, cfg.hidden)
            shapes["b_in"] = (1, cfg.hidden)
            width = 2 * cfg.hidden if cfg.kind == "sage" else cfg.hidden
            for layer in range(cfg.layers):
                shapes[f"w{layer}"] = (width, cfg.hidden)
                shapes[f"b{layer}"] = (1, cfg.hidden)
        shapes["w_out"] = (cfg.hidden, 1)
        shapes["b_out"] = (1, 1)
        params = {}
        for name, (n_in, n_out) in shapes.items():
            value = np.zeros((n_in, n_out)) if name.startswith("b") else nc.glorot(rng, n_in, n_out)
            params[name] = nc.Tensor(value, requires_grad=True, name=name)
        return params

    def _edge_plumbing(self, n_rows: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src, dst = np.nonzero(self.config.skeleton)
        v = self.n_nodes
        base = np.repeat(np.arange(n_rows) * v, len(src))
        send = base + np.tile(src, n_rows)
        recv = base + np.tile(dst, n_rows)
        if self.config.aggregator == "mean":
            denom = np.maximum(self.config.skeleton.sum(axis=0).astype(np.float64), 1.0)
        else:
            denom = np.ones(v)
        inv = np.tile((1.0 / denom).reshape(-1, 1), (n_rows, 1))
        return send, recv, inv

    def forward(self, features: np.ndarray) -> nc.Tensor:
        """Predictions as an (n, 1) tensor; the target column reads as zero."""
        x = np.asarray(features, dtype=np.float64).copy()
        if x.ndim != 2 or x.shape[1] != self.n_nodes:
            raise ValueError(f"features must have {self.n_nodes} columns")
        x[:, self.target_index] = 0.0
        p, cfg = self.params, self.config
        if cfg.kind == "mlp":
            h = nc.tanh(nc.add(nc.matmul(nc.Tensor(x), p["w_in"]), p["b_in"]))
            for layer in range(1, cfg.layers):
                h = nc.tanh(nc.add(nc.matmul(h, p[f"w{layer}"]), p[f"b{layer}"]))
            return nc.add(nc.matmul(h, p["w_out"]), p["b_out"])
        n, v = x.shape
        h = nc.add(nc.matmul(nc.reshape(nc.Tensor(x), (n * v, 1)), p["w_in"]), p["b_in"])
        send, recv, inv = self._edge_plumbing(n)
        for layer in range(cfg.layers):
            if len(send):
                summed = nc.scatter_add_rows(nc.gather_rows(h, send), recv, n * v)
                agg = nc.mul(summed, nc.Tensor(inv))
            else:
                agg = nc.Tensor(np.zeros((n * v, cfg.hidden)))
            if cfg.kind == "ecmpnn":
                # Linear update on aggregated parent states only: a node with no
                # skeleton parents therefore outputs a constant.
                h = nc.add(nc.matmul(agg, p[f"w{layer}"]), p[f"b{layer}"])
            else:
                pair = nc.concat([h, agg], axis=1)
                h = nc.tanh(nc.add(nc.matmul(pair, p[f"w{layer}"]), p[f"b{layer}"]))
        target_rows = np.arange(n) * v + self.target_index
        head = nc.gather_rows(h, target_rows)
        return nc.add(nc.matmul(head, p["w_out"]), p["b_out"])

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if self.config.kind == "random_guess":
            if self.train_targets is None:
                raise RuntimeError("random_guess predictor was never fitted")
            rng = np.random.default_rng(self.config.seed)
            return rng.choice(self.train_targets, size=len(features), replace=True)
        return self.forward(features).value[:, 0]


def fit_predictor(config: PredictorConfig, data: SiteDataset, row_idx: np.ndarray) -> Predictor:
    """Full-batch Adam on squared error, early-stopped on a 10% validation slice."""
    row_idx = np.asarray(row_idx, dtype=np.int64)
    if len(row_idx) == 0:
        raise ValueError("training set is empty")
    if len(row_idx) == 1:
        warnings.warn("fitting on a single row", stacklevel=2)
    x = data.features[row_idx]
    y = data.target[row_idx]
    predictor = Predictor(config, x.shape[1], data.target_index)
    if config.kind == "random_guess":
        predictor.train_targets = y.copy()
        return predictor

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_val = len(x) // 10
    val_idx, fit_idx = order[:n_val], order[n_val:]
    if len(fit_idx) == 0:
        fit_idx, val_idx = order, order[:0]
    x_fit, y_fit = x[fit_idx], y[fit_idx].reshape(-1, 1)
    x_val, y_val = x[val_idx], y[val_idx]

    adam = nc.AdamState(lr=config.lr)
    best_val = np.inf
    best_params = {k: t.value.copy() for k, t in predictor.params.items()}
    stale = 0
    for _ in range(config.epochs):
        with nc.Tape() as tape:
            for tensor in predictor.params.values():
                tape.watch(tensor)
            pred = predictor.forward(x_fit)
            loss = nc.tmean(nc.square(nc.sub(pred, nc.Tensor(y_fit))))
            grads = nc.backward(tape, loss)
        named = {k: grads[t] for k, t in predictor.params.items()}
        nc.adam_step(adam, predictor.params, named)

        if len(val_idx):
            val_mse = float(np.mean((predictor.forward(x_val).value[:, 0] - y_val) ** 2))
        else:
            val_mse = float(loss.value[0, 0])
        if val_mse < best_val - 1e-12:
            best_val = val_mse
            best_params = {k: t.value.copy() for k, t in predictor.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    for name, tensor in predictor.params.items():
        tensor.value = best_params[name]
    predictor.val_mse = best_val
    return predictor


def gnn_forward(predictor: Predictor, features: np.ndarray) -> np.ndarray:
    """Run the configured network on feature rows (target input masked to 0)."""
    return predictor.forward(features).value[:, 0]


def evaluate_ood(predictor: Predictor, split: SplitSpec, data: SiteDataset) -> dict:
    """MSE and MAE on the split's held-out test rows."""
    _, test_idx = split_rows(split, data)
    if len(test_idx) == 0:
        raise ValueError("test set is empty")
    pred = predictor.predict(data.features[test_idx])
    truth = data.target[test_idx]
    err = pred - truth
    return {
        "mse": float(np.mean(err**2)),
        "mae": float(np.mean(np.abs(err))),
        "n_test": int(len(test_idx)),
    }


def fit_predictor_grid(
    config: PredictorConfig,
    data: SiteDataset,
    row_idx: np.ndarray,
    widths: tuple[int, ...] = (8, 16, 32),
    lrs: tuple[float, ...] = (3e-3, 1e-2, 3e-2),
) -> tuple[Predictor, list[dict]]:
    """Fixed width-by-lr grid; picks the cell with the lowest validation MSE.

    Selection reuses each fit's own 10% validation slice (same seed, so the
    slice is identical across cells), making the search deterministic.
    """
    row_idx = np.asarray(row_idx, dtype=np.int64)
    if config.kind == "random_guess":
        return fit_predictor(config, data, row_idx), []
    table: list[dict] = []
    best = None
    for hidden in widths:
        for lr in lrs:
            cell_cfg = replace(config, hidden=hidden, lr=lr)
            fitted = fit_predictor(cell_cfg, data, row_idx)
            cell = {"hidden": hidden, "lr": lr, "val_mse": fitted.val_mse}
            table.append(cell)
            if best is None or fitted.val_mse < best.val_mse:
                best = fitted
    return best, table


def compare_predictors(
    configs: dict[str, PredictorConfig], data: SiteDataset, split: SplitSpec
) -> dict[str, dict]:
    """Train every config on the same split and report test metrics side by side."""
    train_idx, _ = split_rows(split, data)
    results = {}
    for label, config in configs.items():
        fitted = fit_predictor(config, data, train_idx)
        results[label] = evaluate_ood(fitted, split, data)
    return results


def dual_from_rows(rows: np.ndarray, names: list[str], target_index: int) -> od.DualDataset:
    """Wrap one plain table as a fully-overlapping dual dataset.

    Lets the structure-discovery pipeline (which wants an observed and a
    simulated source) run on single-source prediction data: both sides carry
    the same min-max-scaled rows with a complete mask.
    """
    rows = np.asarray(rows, dtype=np.float64)
    lo = rows.min(axis=0)
    span = np.where(rows.max(axis=0) > lo, rows.max(axis=0) - lo, 1.0)
    scaled = (rows - lo) / span
    return od.DualDataset(
        obs_names=list(names),
        sim_names=list(names),
        x_obs=scaled,
        x_sim=scaled.copy(),
        mask_obs=np.ones_like(scaled),
        overlap=[(i, i) for i in range(rows.shape[1])],
        target_index=target_index,
        obs_min=lo,
        obs_max=lo + span,
        sim_min=lo.copy(),
        sim_max=lo + span,
    )


def make_two_site_dataset(
    n_per_site: int = 400, seed: int = 0, trap_flip: bool = True
) -> tuple[SiteDataset, np.ndarray]:
    """Two-site benchmark where a non-causal shortcut reverses across sites.

    Variables: three parents p1, p2, p3 drive the target y; d is a descendant
    of y whose regression on y flips sign (and shifts) in the second site; nz
    is inert noise with the same law in both sites.  In site 0 d is a nearly
    noiseless readout of y, so a regressor fit there leans on it and loses
    badly out of site; one restricted to y's parents transfers unharmed.
    Returns the dataset and the true adjacency over its six nodes.
    """
    rng = np.random.default_rng(seed)
    names = ["p1", "p2", "p3", "y", "d", "nz"]
    rows, sites = [], []
    for site in (0, 1):
        p = rng.normal(0.0, 1.0, size=(n_per_site, 3))
        y = 1.2 * p[:, 0] - 0.8 * p[:, 1] + 0.5 * p[:, 2] + 0.3 * rng.normal(size=n_per_site)
        slope = -1.5 if (trap_flip and site == 1) else 1.5
        d = slope * y + (2.0 if site == 1 else 0.0) + 0.3 * rng.normal(size=n_per_site)
        nz = rng.normal(0.0, 1.0, size=n_per_site)
        rows.append(np.column_stack([p, y, d, nz]))
        sites.append(np.full(n_per_site, site))
    features = np.concatenate(rows)
    site_ids = np.concatenate(sites)
    adjacency = np.zeros((6, 6), dtype=np.int64)
    adjacency[0, 3] = adjacency[1, 3] = adjacency[2, 3] = 1
    adjacency[3, 4] = 1
    data = SiteDataset(names, features, site_ids, target_index=3)
    return data, adjacency
