"""Every term of the training objective and their weighted combination.

Sign convention: the trainer minimizes, so `total_loss` returns the negated
evidence lower bound plus the weighted penalties.  All term functions return
scalar tensors and run under an active tape; fed plain arrays they just
compute values.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import numcore as nc

LN2 = math.log(2.0)


@dataclass
class LossConfig:
    lambda_dm: float = 0.5
    lambda_sp: float = 0.1
    lambda_a: float = 1.0
    alpha: float = 1.0
    power_m: int | None = None  # None: use the node count
    sigma_rec: float = 0.1
    dm_empty_overlap_error: bool = False

    def __post_init__(self):
        for name in ("lambda_dm", "lambda_sp", "lambda_a"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and non-negative")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.power_m is not None and self.power_m < 1:
            raise ValueError("power_m must be >= 1")
        if self.sigma_rec <= 0.0:
            raise ValueError("sigma_rec must be positive")

    def to_dict(self) -> dict:
        return {
            "lambda_dm": self.lambda_dm,
            "lambda_sp": self.lambda_sp,
            "lambda_a": self.lambda_a,
            "alpha": self.alpha,
            "power_m": self.power_m,
            "sigma_rec": self.sigma_rec,
            "dm_empty_overlap_error": self.dm_empty_overlap_error,
        }


@dataclass
class LossBreakdown:
    sim_recon_ll: float
    sim_kl: float
    obs_recon_ll: float
    obs_kl: float
    graph_kl: float
    loss_dm: float
    loss_sp: float
    loss_a: float
    total: float

    def elbo(self) -> float:
        return (
            self.sim_recon_ll
            - self.sim_kl
            + self.obs_recon_ll
            - self.obs_kl
            - self.graph_kl
        )

    def to_dict(self) -> dict:
        return {
            "sim_recon_ll": self.sim_recon_ll,
            "sim_kl": self.sim_kl,
            "obs_recon_ll": self.obs_recon_ll,
            "obs_kl": self.obs_kl,
            "graph_kl": self.graph_kl,
            "loss_dm": self.loss_dm,
            "loss_sp": self.loss_sp,
            "loss_a": self.loss_a,
            "total": self.total,
        }


# ---------------------------------------------------------------------------
# ELBO pieces


def gaussian_recon_ll(x, xhat, sigma_rec: float, mask=None) -> nc.Tensor:
    """Sum of fixed-variance Gaussian log-densities over (masked) cells."""
    if sigma_rec <= 0.0:
        raise ValueError("sigma_rec must be positive")
    x = x if isinstance(x, nc.Tensor) else nc.Tensor(x)
    sq = nc.square(nc.sub(x, xhat))
    if mask is not None:
        mask_arr = np.asarray(mask, dtype=np.float64)
        sq = nc.mul(sq, nc.Tensor(mask_arr))
        n_cells = float(mask_arr.sum())
    else:
        n_cells = float(np.prod(x.shape))
    const = 0.5 * n_cells * math.log(2.0 * math.pi * sigma_rec**2)
    quad = nc.mul(nc.tsum(sq), -0.5 / sigma_rec**2)
    return nc.sub(quad, const)


def encoding_kl(mu: nc.Tensor, sigma: nc.Tensor, row_weights=None) -> nc.Tensor:
    """Summed KL of the per-feature posteriors to the standard-normal prior."""
    kl = nc.gaussian_kl(mu, sigma, 0.0, 1.0)
    if row_weights is not None:
        kl = nc.mul(kl, nc.Tensor(np.asarray(row_weights, dtype=np.float64)))
    return nc.tsum(kl)


def graph_kl_bernoulli(logits: nc.Tensor) -> nc.Tensor:
    """Sum over edges of KL(Bernoulli(sigmoid(l)) || Bernoulli(1/2)).

    Written as p*l - softplus(l) + ln 2, which is exactly 0 at l = 0.
    """
    p = nc.sigmoid(logits)
    per_edge = nc.add(nc.sub(nc.mul(p, logits), nc.softplus(logits)), LN2)
    return nc.tsum(per_edge)


def elbo(
    enc_obs: tuple[nc.Tensor, nc.Tensor],
    enc_sim: tuple[nc.Tensor, nc.Tensor],
    recon_obs: nc.Tensor,
    recon_sim: nc.Tensor,
    x_obs,
    x_sim,
    mask_obs,
    graph_logits: nc.Tensor,
    sigma_rec: float,
    obs_row_weights=None,
) -> dict[str, nc.Tensor]:
    """The five-term decomposition (likelihoods positive, KLs positive).

    The observed-side reconstruction is masked to genuinely observed cells;
    obs_row_weights additionally drops rows with no observed-side sample.
    """
    return {
        "sim_recon_ll": gaussian_recon_ll(x_sim, recon_sim, sigma_rec),
        "sim_kl": encoding_kl(*enc_sim),
        "obs_recon_ll": gaussian_recon_ll(x_obs, recon_obs, sigma_rec, mask=mask_obs),
        "obs_kl": encoding_kl(*enc_obs, row_weights=obs_row_weights),
        "graph_kl": graph_kl_bernoulli(graph_logits),
    }


# ---------------------------------------------------------------------------
# penalties


def loss_dm(
    enc_sim: tuple[nc.Tensor, nc.Tensor],
    enc_obs: tuple[nc.Tensor, nc.Tensor],
    overlap_sim_idx: np.ndarray,
    overlap_obs_idx: np.ndarray,
    row_weights=None,
    on_empty: str = "warn",
) -> nc.Tensor:
    """Distribution matching: KL of the simulated posterior to the observed
    posterior, summed over rows and overlap latent coordinates.

    The observed side is detached: it is the reference distribution, not a
    moving target, so gradients flow into the simulated encoder only.
    """
    overlap_sim_idx = np.asarray(overlap_sim_idx, dtype=np.intp)
    overlap_obs_idx = np.asarray(overlap_obs_idx, dtype=np.intp)
    if overlap_sim_idx.size != overlap_obs_idx.size:
        raise ValueError("overlap index arrays must have equal length")
    if overlap_sim_idx.size == 0:
        if on_empty == "error":
            raise ValueError("loss_dm is undefined with an empty overlap")
        warnings.warn("empty overlap: loss_dm is 0", stacklevel=2)
        return nc.Tensor(0.0)
    mu_s = nc.gather_cols(enc_sim[0], overlap_sim_idx)
    sd_s = nc.gather_cols(enc_sim[1], overlap_sim_idx)
    mu_o = nc.detach(nc.gather_cols(enc_obs[0], overlap_obs_idx))
    sd_o = nc.detach(nc.gather_cols(enc_obs[1], overlap_obs_idx))
    kl = nc.gaussian_kl(mu_s, sd_s, mu_o, sd_o)
    if row_weights is not None:
        kl = nc.mul(kl, nc.Tensor(np.asarray(row_weights, dtype=np.float64)))
    return nc.tsum(kl)


def loss_sp(
    recon_obs: nc.Tensor,
    x_obs,
    mask_obs,
    target_index: int,
    sigma_rec: float,
) -> nc.Tensor:
    """Supervision: negative Gaussian log-likelihood of the target column,
    restricted to rows where the target was genuinely observed."""
    x_obs = np.asarray(x_obs.value if isinstance(x_obs, nc.Tensor) else x_obs)
    if not 0 <= target_index < x_obs.shape[1]:
        raise ValueError(f"target index {target_index} out of range")
    mask_col = np.asarray(mask_obs, dtype=np.float64)[:, target_index : target_index + 1]
    m_rows = float(mask_col.sum())
    if m_rows == 0.0:
        warnings.warn("no observed target rows in batch: loss_sp is 0", stacklevel=2)
        return nc.Tensor(0.0)
    pred = nc.gather_cols(recon_obs, [target_index])
    truth = nc.Tensor(x_obs[:, target_index : target_index + 1])
    sq = nc.mul(nc.square(nc.sub(truth, pred)), nc.Tensor(mask_col))
    const = 0.5 * m_rows * math.log(2.0 * math.pi * sigma_rec**2)
    return nc.add(nc.mul(nc.tsum(sq), 0.5 / sigma_rec**2), const)


def loss_acyclicity(p, alpha: float = 1.0, m: int | None = None) -> nc.Tensor:
    """tr[(I + alpha * P (.) P)^m] minus the trace of the identity.

    Zero exactly when the weighted digraph with weights P (.) P has no
    directed cycle of length <= m; with the default m = V that means acyclic.
    """
    p = p if isinstance(p, nc.Tensor) else nc.Tensor(np.asarray(p, dtype=np.float64))
    v = p.shape[0]
    if p.shape != (v, v):
        raise ValueError("P must be square")
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    if m is None:
        m = v
    if m < 1:
        raise ValueError("m must be >= 1")
    base = nc.add(nc.Tensor(np.eye(v)), nc.mul(nc.square(p), alpha))
    power = base
    for _ in range(m - 1):
        power = nc.matmul(power, base)
    return nc.sub(nc.trace(power), float(v))


def total_loss(
    elbo_terms: dict[str, nc.Tensor],
    dm: nc.Tensor,
    sp: nc.Tensor,
    la: nc.Tensor,
    config: LossConfig,
) -> tuple[nc.Tensor, LossBreakdown]:
    """Weighted composite (minimization convention) plus its logged breakdown."""
    e = elbo_terms
    neg_elbo = nc.sub(
        nc.add(nc.add(e["sim_kl"], e["obs_kl"]), e["graph_kl"]),
        nc.add(e["sim_recon_ll"], e["obs_recon_ll"]),
    )
    total = nc.add(
        nc.add(neg_elbo, nc.mul(dm, config.lambda_dm)),
        nc.add(nc.mul(sp, config.lambda_sp), nc.mul(la, config.lambda_a)),
    )
    breakdown = LossBreakdown(
        sim_recon_ll=e["sim_recon_ll"].item(),
        sim_kl=e["sim_kl"].item(),
        obs_recon_ll=e["obs_recon_ll"].item(),
        obs_kl=e["obs_kl"].item(),
        graph_kl=e["graph_kl"].item(),
        loss_dm=dm.item(),
        loss_sp=sp.item(),
        loss_a=la.item(),
        total=total.item(),
    )
    return total, breakdown
