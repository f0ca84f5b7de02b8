"""The structure-learning model: variational encoders over both sources, a
Bernoulli edge posterior, and a shared message-passing decoder.

Every observed column and every simulator-only column becomes one node of the
union graph; overlap pairs fuse into a single node.  Encoders are shared
scalar MLPs applied per feature, so a latent block holds information about
its own feature only.  A node's state is the concatenation of its
observed-side and simulated-side latent encodings (k values each),
zero-padded where a source does not carry the variable.  The decoder
discards node states each round and rebuilds them purely from incoming
messages, so reconstruction quality is evidence about which edges exist.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import numcore as nc

_ACTIVATIONS = ("tanh", "identity")


@dataclass
class ModelConfig:
    latent_k: int = 8
    enc_hidden: int = 64
    msg_dim: int = 16
    dec_hidden: int = 64
    rounds: int = 2
    activation: str = "tanh"
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if min(self.latent_k, self.enc_hidden, self.msg_dim, self.dec_hidden) < 1:
            raise ValueError("widths must be positive")

    def to_dict(self) -> dict:
        return {
            "latent_k": self.latent_k,
            "enc_hidden": self.enc_hidden,
            "msg_dim": self.msg_dim,
            "dec_hidden": self.dec_hidden,
            "rounds": self.rounds,
            "activation": self.activation,
            "sigma_floor": self.sigma_floor,
        }


def canonical_hash(obj) -> str:
    """Stable sha256 of a JSON-representable object."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


CHECKPOINT_VERSION = 1

# raw-sigma bias init: softplus(-2) ~ 0.127, a sane spread for [0,1] data
_RAW_SIGMA_INIT = -2.0


class Model:
    """Holds all trainable tensors plus the node map and index plumbing."""

    def __init__(
        self,
        config: ModelConfig,
        node_names: list[str],
        obs_cols: list[int | None],
        sim_cols: list[int | None],
        rng: np.random.Generator,
    ):
        if len(node_names) != len(obs_cols) or len(node_names) != len(sim_cols):
            raise ValueError("node map lists must have equal length")
        self.config = config
        self.node_names = list(node_names)
        self.obs_cols = list(obs_cols)
        self.sim_cols = list(sim_cols)
        self.n_nodes = len(node_names)
        self.n_obs_cols = sum(c is not None for c in obs_cols)
        self.n_sim_cols = sum(c is not None for c in sim_cols)

        v = self.n_nodes
        k = config.latent_k
        self.state_dim = 2 * k
        edge_src, edge_dst = [], []
        for q in range(v):
            for i in range(v):
                if q != i:
                    edge_src.append(q)
                    edge_dst.append(i)
        self.edge_src = np.array(edge_src, dtype=np.intp)
        self.edge_dst = np.array(edge_dst, dtype=np.intp)
        self.edge_flat = self.edge_src * v + self.edge_dst
        self.n_edges = len(self.edge_flat)

        self._placement_obs = self._placement(self.obs_cols, offset=0)
        self._placement_sim = self._placement(self.sim_cols, offset=k)
        self._obs_out_cols = np.array(
            [2 * n for n, c in enumerate(self.obs_cols) if c is not None], dtype=np.intp
        )
        self._sim_out_cols = np.array(
            [2 * n + 1 for n, c in enumerate(self.sim_cols) if c is not None],
            dtype=np.intp,
        )
        self._batch_cache: dict[int, tuple] = {}
        self.params = self._init_params(rng)

    def _placement(self, cols: list[int | None], offset: int) -> np.ndarray:
        """Constant matrix routing a source encoding into node-state slots."""
        k = self.config.latent_k
        n_source = sum(c is not None for c in cols)
        mat = np.zeros((n_source * k, self.n_nodes * self.state_dim))
        for node, col in enumerate(cols):
            if col is None:
                continue
            for t in range(k):
                mat[col * k + t, node * self.state_dim + offset + t] = 1.0
        return mat

    def _init_params(self, rng: np.random.Generator) -> dict[str, nc.Tensor]:
        cfg = self.config
        k, s, v = cfg.latent_k, self.state_dim, self.n_nodes
        shapes: dict[str, tuple[int, int]] = {}
        for src in ("obs", "sim"):
            shapes[f"enc_{src}_w1"] = (1, cfg.enc_hidden)
            shapes[f"enc_{src}_b1"] = (1, cfg.enc_hidden)
            shapes[f"enc_{src}_w2"] = (cfg.enc_hidden, 2 * k)
            shapes[f"enc_{src}_b2"] = (1, 2 * k)
        shapes["f_w1"] = (2 * s, cfg.dec_hidden)
        shapes["f_b1"] = (1, cfg.dec_hidden)
        shapes["f_w2"] = (cfg.dec_hidden, cfg.msg_dim)
        shapes["f_b2"] = (1, cfg.msg_dim)
        shapes["u_w1"] = (cfg.msg_dim, cfg.dec_hidden)
        shapes["u_b1"] = (1, cfg.dec_hidden)
        shapes["u_w2"] = (cfg.dec_hidden, s)
        shapes["u_b2"] = (1, s)
        shapes["r_w1"] = (s + v, cfg.dec_hidden)
        shapes["r_b1"] = (1, cfg.dec_hidden)
        shapes["r_w2"] = (cfg.dec_hidden, 2)
        shapes["r_b2"] = (1, 2)
        params: dict[str, nc.Tensor] = {}
        for name, (n_in, n_out) in shapes.items():
            if name.endswith(("b1", "b2")):
                value = np.zeros((n_in, n_out))
            else:
                value = nc.glorot(rng, n_in, n_out)
            params[name] = nc.Tensor(value, requires_grad=True, name=name)
        for src in ("obs", "sim"):
            b2 = params[f"enc_{src}_b2"].value
            b2[0, k:] = _RAW_SIGMA_INIT
        params["g_logits"] = nc.Tensor(
            np.zeros((self.n_edges, 1)), requires_grad=True, name="g_logits"
        )
        return params

    def _act(self, x: nc.Tensor) -> nc.Tensor:
        return nc.tanh(x) if self.config.activation == "tanh" else x

    def _mlp(self, x: nc.Tensor, prefix: str) -> nc.Tensor:
        p = self.params
        h = self._act(nc.add(nc.matmul(x, p[f"{prefix}_w1"]), p[f"{prefix}_b1"]))
        return nc.add(nc.matmul(h, p[f"{prefix}_w2"]), p[f"{prefix}_b2"])

    # -- encoders ----------------------------------------------------------

    def encode(
        self,
        batch: np.ndarray,
        source: str,
        eps: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> tuple[nc.Tensor, nc.Tensor, nc.Tensor]:
        """Per-feature Gaussian parameters and one reparameterized draw.

        Each feature value runs through the source's shared scalar MLP on its
        own, so a feature's latent coordinates depend on nothing but that
        feature; any cross-feature information must travel over graph edges.
        Returns (mu, sigma, sample), each (batch, features*k).  Pass eps to
        pin the noise (eps=0 gives the posterior mean); otherwise it is drawn
        from rng.
        """
        if source not in ("obs", "sim"):
            raise ValueError("source must be 'obs' or 'sim'")
        width = self.n_obs_cols if source == "obs" else self.n_sim_cols
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != width:
            raise ValueError(f"{source} batch must have {width} columns")
        if not np.isfinite(batch).all():
            raise ValueError("batch contains non-finite values; ingest must impute")
        k = self.config.latent_k
        n = batch.shape[0]
        half = width * k
        flat = nc.reshape(nc.Tensor(batch), (n * width, 1))
        out = self._mlp(flat, f"enc_{source}")
        mu = nc.reshape(nc.gather_cols(out, np.arange(k)), (n, half))
        raw = nc.reshape(nc.gather_cols(out, np.arange(k, 2 * k)), (n, half))
        sigma = nc.add(nc.softplus(raw), self.config.sigma_floor)
        if eps is None:
            if rng is None:
                raise ValueError("encode needs eps or rng")
            eps = rng.standard_normal((batch.shape[0], half))
        sample = nc.add(mu, nc.mul(sigma, nc.Tensor(np.asarray(eps, dtype=np.float64))))
        return mu, sigma, sample

    # -- graph posterior ----------------------------------------------------

    def _edges_to_dense(self, edge_vals: nc.Tensor) -> nc.Tensor:
        flat = nc.scatter_add_rows(edge_vals, self.edge_flat, self.n_nodes**2)
        return nc.reshape(flat, (self.n_nodes, self.n_nodes))

    def graph_prob_tensor(self) -> nc.Tensor:
        """Dense (V,V) edge probabilities, zero diagonal, gradient-carrying."""
        return self._edges_to_dense(nc.sigmoid(self.params["g_logits"]))

    def graph_probabilities(self) -> np.ndarray:
        probs = expit(self.params["g_logits"].value)
        dense = np.zeros((self.n_nodes, self.n_nodes))
        dense.flat[self.edge_flat] = probs[:, 0]
        return dense

    def sample_graph(
        self,
        temperature: float,
        u: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> nc.Tensor:
        """Binary-concrete relaxed adjacency sample, dense (V,V), zero diagonal."""
        if temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if u is None:
            if rng is None:
                raise ValueError("sample_graph needs u or rng")
            u = rng.uniform(1e-12, 1.0 - 1e-12, size=(self.n_edges, 1))
        u = np.asarray(u, dtype=np.float64)
        logistic = np.log(u) - np.log1p(-u)
        shifted = nc.add(self.params["g_logits"], nc.Tensor(logistic))
        relaxed = nc.sigmoid(nc.mul(shifted, 1.0 / temperature))
        return self._edges_to_dense(relaxed)

    # -- decoder -------------------------------------------------------------

    def _batch_plumbing(self, batch_size: int) -> tuple:
        cached = self._batch_cache.get(batch_size)
        if cached is None:
            base = np.repeat(np.arange(batch_size) * self.n_nodes, self.n_edges)
            send = base + np.tile(self.edge_src, batch_size)
            recv = base + np.tile(self.edge_dst, batch_size)
            edge_idx = np.tile(self.edge_flat, batch_size)
            cached = (send, recv, edge_idx)
            self._batch_cache[batch_size] = cached
        return cached

    def node_states(
        self,
        enc_obs_sample: nc.Tensor | None,
        enc_sim_sample: nc.Tensor | None,
        aligned: np.ndarray | None = None,
    ) -> nc.Tensor:
        """Assemble (batch*V, state_dim) initial node states from encodings.

        aligned is an optional (batch, 1) 0/1 column zeroing the observed
        half for rows without an observed-side sample.
        """
        parts = []
        if enc_obs_sample is not None:
            obs = enc_obs_sample
            if aligned is not None:
                obs = nc.mul(obs, nc.Tensor(aligned))
            parts.append(nc.matmul(obs, nc.Tensor(self._placement_obs)))
        if enc_sim_sample is not None:
            parts.append(nc.matmul(enc_sim_sample, nc.Tensor(self._placement_sim)))
        if not parts:
            raise ValueError("need at least one source encoding")
        flat = parts[0] if len(parts) == 1 else nc.add(parts[0], parts[1])
        batch = flat.shape[0]
        return nc.reshape(flat, (batch * self.n_nodes, self.state_dim))

    def message_passing(
        self,
        g_dense: nc.Tensor,
        states: nc.Tensor,
        batch_size: int,
        node_feats: np.ndarray | None = None,
    ) -> nc.Tensor:
        """T rounds of n2m/m2n updates, then the shared readout.

        Each round maps every directed pair (q, i) to a message from both
        endpoint states, scales it by G[q, i], sums messages into the
        receiver, and rebuilds the receiver's state from that sum alone.
        Returns (batch, 2V): per node, an observed-side and a simulated-side
        reconstruction.  node_feats defaults to the identity (one-hot node
        identity appended before the readout); tests may permute it.
        """
        v = self.n_nodes
        if g_dense.shape != (v, v):
            raise ValueError(f"G_sample must be ({v}, {v})")
        if states.shape != (batch_size * v, self.state_dim):
            raise ValueError("node states do not match the node map")
        send, recv, edge_idx = self._batch_plumbing(batch_size)
        g_flat = nc.reshape(g_dense, (v * v, 1))
        edge_w = nc.gather_rows(g_flat, edge_idx)
        for _ in range(self.config.rounds):
            pair = nc.concat(
                [nc.gather_rows(states, send), nc.gather_rows(states, recv)], axis=1
            )
            msg = nc.mul(self._mlp(pair, "f"), edge_w)
            agg = nc.scatter_add_rows(msg, recv, batch_size * v)
            states = self._mlp(agg, "u")
        if node_feats is None:
            node_feats = np.eye(v)
        feats = nc.Tensor(np.tile(node_feats, (batch_size, 1)))
        out = self._mlp(nc.concat([states, feats], axis=1), "r")
        return nc.reshape(out, (batch_size, 2 * v))

    def decode_forward(
        self,
        g_dense: nc.Tensor,
        enc_obs_sample: nc.Tensor | None,
        enc_sim_sample: nc.Tensor | None,
        aligned: np.ndarray | None = None,
    ) -> tuple[nc.Tensor, nc.Tensor]:
        """Reconstruct both sources' columns from encodings and a graph sample."""
        states = self.node_states(enc_obs_sample, enc_sim_sample, aligned)
        batch_size = states.shape[0] // self.n_nodes
        node_out = self.message_passing(g_dense, states, batch_size)
        xhat_obs = nc.gather_cols(node_out, self._obs_out_cols)
        xhat_sim = nc.gather_cols(node_out, self._sim_out_cols)
        return xhat_obs, xhat_sim

    # -- persistence ---------------------------------------------------------

    def to_checkpoint(self) -> dict:
        config = self.config.to_dict()
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": config,
            "config_hash": canonical_hash(config),
            "node_names": self.node_names,
            "obs_cols": self.obs_cols,
            "sim_cols": self.sim_cols,
            "params": {k: t.value.tolist() for k, t in self.params.items()},
        }

    @classmethod
    def from_checkpoint(cls, payload: dict) -> "Model":
        version = payload.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        config = ModelConfig(**payload["config"])
        model = cls(
            config,
            payload["node_names"],
            [c if c is None else int(c) for c in payload["obs_cols"]],
            [c if c is None else int(c) for c in payload["sim_cols"]],
            np.random.default_rng(0),
        )
        for name, values in payload["params"].items():
            arr = np.asarray(values, dtype=np.float64)
            if name not in model.params or model.params[name].value.shape != arr.shape:
                raise ValueError(f"checkpoint parameter {name!r} does not fit")
            model.params[name].value[...] = arr
        return model
