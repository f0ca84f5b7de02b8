"""Graph-evaluation metrics and lightweight discovery baselines.

All scoring runs over ordered off-diagonal node pairs of the intersection of
the prediction's and the truth's node sets.  Thresholding is strict (> t), so
a probability sitting exactly at the threshold is not an edge; AUC uses the
Mann-Whitney convention with ties counted one half, which places an
uninformative all-equal matrix at exactly 0.5.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from .data import DualDataset, GroundTruthGraph


@dataclass
class EdgeProbMatrix:
    """Named V x V edge-probability matrix with a method provenance tag."""

    node_names: list[str]
    probabilities: np.ndarray
    method: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        v = len(self.node_names)
        if len(set(self.node_names)) != v:
            raise ValueError("node names must be unique")
        if self.probabilities.shape != (v, v):
            raise ValueError("probabilities must be square over the node list")
        if not np.isfinite(self.probabilities).all():
            raise ValueError("probabilities must be finite")
        eps = 1e-12
        if self.probabilities.min() < -eps or self.probabilities.max() > 1.0 + eps:
            raise ValueError("probabilities must lie in [0, 1]")
        if np.abs(np.diag(self.probabilities)).max(initial=0.0) > 0.0:
            raise ValueError("diagonal must be zero")

    def to_csv(self, path: str | Path) -> None:
        """V x V floats under a node-name header row."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.node_names)
            for row in self.probabilities:
                writer.writerow([f"{x:.17g}" for x in row])

    @classmethod
    def from_csv(cls, path: str | Path, method: str = "imported") -> "EdgeProbMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty edge-matrix file")
        names = rows[0]
        v = len(names)
        if len(rows) != v + 1:
            raise ValueError(f"{path}: expected {v} data rows, found {len(rows) - 1}")
        try:
            probs = np.array([[float(x) for x in row] for row in rows[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric entry ({exc})") from exc
        return cls(node_names=names, probabilities=probs, method=method)


@dataclass
class EvalReport:
    """Edge-classification scores plus the L1 edge errors at one threshold.

    recall is None when the truth has no edges, precision when nothing was
    predicted, auc when either class is empty.
    """

    recall: float | None
    precision: float | None
    auc: float | None
    l1: float
    l1_standardized: float
    threshold: float
    true_positive_edges: list[tuple[str, str]]
    false_positive_edges: list[tuple[str, str]]
    false_negative_edges: list[tuple[str, str]]

    def to_dict(self) -> dict:
        return {
            "recall": self.recall,
            "precision": self.precision,
            "auc": self.auc,
            "l1": self.l1,
            "l1_standardized": self.l1_standardized,
            "threshold": self.threshold,
            "true_positive_edges": [list(e) for e in self.true_positive_edges],
            "false_positive_edges": [list(e) for e in self.false_positive_edges],
            "false_negative_edges": [list(e) for e in self.false_negative_edges],
        }


def _truth_names_adjacency(truth) -> tuple[list[str], np.ndarray]:
    if isinstance(truth, GroundTruthGraph):
        return list(truth.nodes), (truth.adjacency != 0).astype(np.int64)
    if isinstance(truth, EdgeProbMatrix):
        return list(truth.node_names), (truth.probabilities > 0.5).astype(np.int64)
    raise TypeError("truth must be a GroundTruthGraph or a binary EdgeProbMatrix")


def _align(pred: EdgeProbMatrix, truth) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Intersect node sets; order follows the prediction's node list."""
    t_names, t_adj = _truth_names_adjacency(truth)
    t_index = {n: i for i, n in enumerate(t_names)}
    shared = [n for n in pred.node_names if n in t_index]
    dropped = sorted(set(pred.node_names) ^ set(t_names))
    if dropped:
        warnings.warn(f"scoring over {len(shared)} shared nodes; dropped {dropped}", stacklevel=3)
    if len(shared) < 2:
        raise ValueError("need at least two shared nodes to score a graph")
    p_idx = [pred.node_names.index(n) for n in shared]
    t_idx = [t_index[n] for n in shared]
    p = pred.probabilities[np.ix_(p_idx, p_idx)]
    t = t_adj[np.ix_(t_idx, t_idx)]
    return shared, p, t


def _tie_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Mann-Whitney AUC with midranks (ties count one half)."""
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_metrics(pred: EdgeProbMatrix, truth, threshold: float = 0.5) -> EvalReport:
    """Recall/precision at a strict threshold, tie-aware AUC, and L1 errors."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly inside (0, 1)")
    names, p, t = _align(pred, truth)
    v = len(names)
    off = ~np.eye(v, dtype=bool)
    scores = p[off]
    labels = t[off].astype(np.int64)
    predicted = scores > threshold

    tp = int((predicted & (labels == 1)).sum())
    fp = int((predicted & (labels == 0)).sum())
    fn = int((~predicted & (labels == 1)).sum())
    n_true = int(labels.sum())
    recall = None if n_true == 0 else tp / n_true
    precision = None if tp + fp == 0 else tp / (tp + fp)
    auc = _tie_auc(scores, labels)

    pairs = [(i, j) for i in range(v) for j in range(v) if i != j]
    confusion = {"tp": [], "fp": [], "fn": []}
    for (i, j), hit, lab in zip(pairs, predicted, labels):
        if hit and lab:
            confusion["tp"].append((names[i], names[j]))
        elif hit:
            confusion["fp"].append((names[i], names[j]))
        elif lab:
            confusion["fn"].append((names[i], names[j]))

    l1 = _l1_on_aligned(p, t)
    return EvalReport(
        recall=recall,
        precision=precision,
        auc=auc,
        l1=l1,
        l1_standardized=l1 / (v * (v - 1) / 2.0),
        threshold=threshold,
        true_positive_edges=confusion["tp"],
        false_positive_edges=confusion["fp"],
        false_negative_edges=confusion["fn"],
    )


def _l1_on_aligned(p: np.ndarray, t: np.ndarray) -> float:
    """Sum over unordered pairs; absent pairs use P(independent) = (1-Pij)(1-Pji)."""
    v = p.shape[0]
    terms = []
    for i in range(v):
        for j in range(i + 1, v):
            if t[i, j]:
                terms.append(1.0 - p[i, j])
            if t[j, i]:
                terms.append(1.0 - p[j, i])
            if not t[i, j] and not t[j, i]:
                terms.append((1.0 - p[i, j]) * (1.0 - p[j, i]))
    return math.fsum(terms)


def l1_edge_error(pred: EdgeProbMatrix, truth, standardized: bool = False) -> float:
    names, p, t = _align(pred, truth)
    raw = _l1_on_aligned(p, t)
    if not standardized:
        return raw
    v = len(names)
    return raw / (v * (v - 1) / 2.0)


def correlation_graph(dataset: DualDataset, threshold_r: float = 0.5) -> EdgeProbMatrix:
    """|Pearson r| between union-node value series, symmetric both directions.

    Pairs of genuinely-observed columns correlate over pairwise-complete
    observed rows; any pair touching a simulator-only variable falls back to
    the simulated table (full length when both sides carry it, the aligned
    prefix otherwise).  Constant or under-sampled pairs score 0.  threshold_r
    is the conventional binarization level recorded for downstream edge
    extraction; it does not alter the probabilities.
    """
    names, obs_cols, sim_cols = dataset.union_nodes()
    v = len(names)
    aligned = dataset.aligned_rows
    probs = np.zeros((v, v))
    for a in range(v):
        for b in range(a + 1, v):
            if obs_cols[a] is not None and obs_cols[b] is not None:
                ca, cb = obs_cols[a], obs_cols[b]
                rows = (dataset.mask_obs[:, ca] > 0) & (dataset.mask_obs[:, cb] > 0)
                xa = dataset.x_obs[rows, ca]
                xb = dataset.x_obs[rows, cb]
            elif sim_cols[a] is not None and sim_cols[b] is not None:
                xa = dataset.x_sim[:, sim_cols[a]]
                xb = dataset.x_sim[:, sim_cols[b]]
            else:
                # one node observed-only, the other simulator-only: pair them
                # over the aligned prefix where the observed cell is genuine
                oc = obs_cols[a] if obs_cols[a] is not None else obs_cols[b]
                sc = sim_cols[a] if sim_cols[a] is not None else sim_cols[b]
                rows = dataset.mask_obs[:aligned, oc] > 0
                obs_series = dataset.x_obs[:aligned, oc][rows]
                sim_series = dataset.x_sim[:aligned, sc][rows]
                xa, xb = (obs_series, sim_series) if obs_cols[a] is not None else (sim_series, obs_series)
            r = _pearson(xa, xb)
            probs[a, b] = probs[b, a] = abs(r)
    return EdgeProbMatrix(
        node_names=names,
        probabilities=probs,
        method="correlation",
        info={"threshold_r": threshold_r},
    )


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if len(x) < 2:
        return 0.0
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0
    r = float(np.corrcoef(x, y)[0, 1])
    if not np.isfinite(r):
        return 0.0
    return max(-1.0, min(1.0, r))


def bootstrap_edge_probs(discoverer, dataset: DualDataset, b: int, seed: int) -> EdgeProbMatrix:
    """Edge probability = fraction of row resamples whose discovery has the edge.

    Rows of the aligned prefix are drawn with replacement; each resample gets
    its own derived seed so results are reproducible and order-independent.
    A resample where the discoverer raises is skipped and counted in
    info["failures"].
    """
    if b < 1:
        raise ValueError("need at least one bootstrap resample")
    names = dataset.union_nodes()[0]
    v = len(names)
    counts = np.zeros((v, v))
    successes = 0
    failures = 0
    for child_seed in np.random.SeedSequence(seed).spawn(b):
        rng = np.random.default_rng(child_seed)
        idx = rng.integers(0, dataset.aligned_rows, size=dataset.aligned_rows)
        try:
            adjacency = np.asarray(discoverer(dataset.subset_aligned(idx)))
        except Exception as exc:  # noqa: BLE001 - resample-level isolation
            failures += 1
            warnings.warn(f"bootstrap resample failed: {exc}", stacklevel=2)
            continue
        if adjacency.shape != (v, v):
            raise ValueError(f"discoverer returned shape {adjacency.shape}, expected ({v}, {v})")
        counts += adjacency != 0
        successes += 1
    if successes == 0:
        raise RuntimeError("every bootstrap resample failed")
    probs = counts / successes
    np.fill_diagonal(probs, 0.0)
    return EdgeProbMatrix(
        node_names=names,
        probabilities=probs,
        method="bootstrap",
        info={"resamples": b, "failures": failures, "failure_rate": failures / b},
    )


def _union_complete_matrix(dataset: DualDataset) -> tuple[list[str], np.ndarray]:
    """Aligned rows with every observed cell genuine, in source units.

    The [0,1] table scaling is inverted because it flattens the per-column
    variance ordering that a linear least-squares fit uses to orient edges.
    """
    names, obs_cols, sim_cols = dataset.union_nodes()
    complete = dataset.mask_obs.min(axis=1) > 0
    if complete.sum() < 2:
        raise ValueError("need at least two mask-complete rows")
    cols = []
    for oc, sc in zip(obs_cols, sim_cols):
        if oc is not None:
            lo, hi = dataset.obs_min[oc], dataset.obs_max[oc]
            cols.append(dataset.x_obs[complete, oc] * (hi - lo) + lo)
        else:
            lo, hi = dataset.sim_min[sc], dataset.sim_max[sc]
            cols.append(dataset.x_sim[: dataset.aligned_rows][complete, sc] * (hi - lo) + lo)
    return names, np.column_stack(cols)


def _prune_to_dag(w: np.ndarray) -> np.ndarray:
    """Zero the weakest |w| entry on each remaining cycle until acyclic."""
    w = w.copy()
    graph = nx.DiGraph((int(i), int(j)) for i, j in zip(*np.nonzero(w)))
    graph.add_nodes_from(range(w.shape[0]))
    while True:
        try:
            cycle = nx.find_cycle(graph, orientation="original")
        except nx.NetworkXNoCycle:
            return w
        weakest = min(cycle, key=lambda e: (abs(w[e[0], e[1]]), e[0], e[1]))
        w[weakest[0], weakest[1]] = 0.0
        graph.remove_edge(weakest[0], weakest[1])


def notears_linear(
    dataset: DualDataset,
    lambda1: float = 0.1,
    max_iter: int = 100,
    h_tol: float = 1e-8,
    rho_max: float = 1e16,
) -> EdgeProbMatrix:
    """Linear-SEM least squares under a trace-polynomial acyclicity constraint.

    Minimizes (1/2n)||X - XW||^2 + lambda1*||W||_1 with an augmented
    Lagrangian driving h(W) = tr[(I + (1/V) W.W)^V] - V to zero; W splits
    into positive and negative parts so L-BFGS-B handles the L1 term exactly.
    Columns are centered and divided by one shared scale (the mean column
    standard deviation): per-column standardization would equalize variances
    and leave linear least squares with no way to orient an edge.  The
    returned matrix is |W| scaled into [0, 1]; any residual cycles are pruned
    weakest-edge-first so the output is always acyclic.
    """
    names, x = _union_complete_matrix(dataset)
    v = len(names)
    n = x.shape[0]
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    keep = std > 0
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} constant columns excluded from the fit", stacklevel=2)
    shared_scale = std[keep].mean() if keep.any() else 1.0
    z = np.zeros_like(x)
    z[:, keep] = (x[:, keep] - mean[keep]) / shared_scale
    alpha, m = 1.0 / v, v
    eye = np.eye(v)

    def h_and_grad(w: np.ndarray) -> tuple[float, np.ndarray]:
        a = w * w
        base = eye + alpha * a
        power = np.linalg.matrix_power(base, m - 1)
        h = float(np.trace(power @ base)) - v
        return h, 2.0 * w * (alpha * m * power.T)

    def objective(theta: np.ndarray, rho: float, gamma: float):
        w = (theta[: v * v] - theta[v * v :]).reshape(v, v)
        resid = z - z @ w
        loss = 0.5 / n * float((resid * resid).sum())
        h, h_grad = h_and_grad(w)
        value = loss + lambda1 * theta.sum() + 0.5 * rho * h * h + gamma * h
        g_w = -z.T @ resid / n + (rho * h + gamma) * h_grad
        grad = np.concatenate([g_w.ravel(), -g_w.ravel()]) + lambda1
        return value, grad

    bounds = [
        (0.0, 0.0) if i == j else (0.0, None)
        for _ in range(2)
        for i in range(v)
        for j in range(v)
    ]
    theta = np.zeros(2 * v * v)
    rho, gamma, h = 1.0, 0.0, np.inf
    converged = False
    for _ in range(max_iter):
        while rho < rho_max:
            sol = minimize(
                objective, theta, args=(rho, gamma), jac=True, method="L-BFGS-B", bounds=bounds
            )
            w_new = (sol.x[: v * v] - sol.x[v * v :]).reshape(v, v)
            h_new = h_and_grad(w_new)[0]
            if h_new > 0.25 * h:
                rho *= 10.0
            else:
                break
        theta, h = sol.x, h_new
        gamma += rho * h
        if h <= h_tol or rho >= rho_max:
            converged = h <= h_tol
            break
    if not converged:
        warnings.warn(f"acyclicity not reached (h={h:.3e}); returning best iterate", stacklevel=2)
    w = _prune_to_dag((theta[: v * v] - theta[v * v :]).reshape(v, v))
    magnitude = np.abs(w)
    probs = magnitude / max(1.0, magnitude.max(initial=0.0))
    np.fill_diagonal(probs, 0.0)
    return EdgeProbMatrix(
        node_names=names,
        probabilities=probs,
        method="notears",
        info={"converged": converged, "h_final": float(h), "rho_final": float(rho)},
    )
