"""Graph autoencoders (GCN, STG-GCN, STG-GAT, STG-RGCN) and the per-node MLP autoencoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import RowIndex, Segments, Tensor
from .errors import CheckpointError, ConfigMismatch, MissingRelationWeight, ShapeMismatch
from .graph import GraphTopology, build_st_topology, build_static_topology

MAGIC = "FTAED-MODEL v1"
N_FEATURES = 3
ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "identity": None}


class Architecture(str, Enum):
    MLP = "mlp"
    GCN = "gcn"
    STG_GCN = "stg_gcn"
    STG_GAT = "stg_gat"
    STG_RGCN = "stg_rgcn"

    @property
    def spatiotemporal(self) -> bool:
        return self.value.startswith("stg_")


@dataclass(frozen=True)
class ModelConfig:
    architecture: Architecture
    hidden_dim: int
    latent_dim: int
    n_layers: int
    dropout: float = 0.0
    learning_rate: float = 1e-3
    gat_heads: int = 1
    timesteps: int = 0
    activation: str = "relu"
    gat_self_loops: bool = True
    rgcn_learned_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        if self.latent_dim < 1 or self.hidden_dim < 1 or self.n_layers < 1:
            raise ConfigMismatch("dimensions and layer count must be positive")
        if self.architecture is Architecture.MLP and self.latent_dim > 2:
            raise ConfigMismatch("the MLP latent vector is limited to 1 or 2 dimensions")
        if self.architecture is Architecture.STG_GAT and self.hidden_dim % self.gat_heads:
            raise ConfigMismatch("hidden_dim must be divisible by gat_heads")
        if not self.architecture.spatiotemporal and self.timesteps:
            raise ConfigMismatch(f"{self.architecture.value} takes a single time slice")
        if self.activation not in ACTIVATIONS:
            raise ConfigMismatch(f"unknown activation {self.activation!r}")

    @property
    def window(self) -> int:
        return self.timesteps + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architecture"] = self.architecture.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in d.items():
            if key not in kinds:
                raise ConfigMismatch(f"unknown model config key {key!r}")
            kind = kinds[key]
            if kind == "int":
                out[key] = int(raw)
            elif kind == "float":
                out[key] = float(raw)
            elif kind == "bool":
                out[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
            else:
                out[key] = raw
        return cls(**out)


# Optimized hyperparameters; STG-GCN borrows the GCN column with the RGCN window.
DEFAULT_CONFIGS = {
    Architecture.GCN: ModelConfig("gcn", hidden_dim=64, latent_dim=128, n_layers=2, dropout=0.03, learning_rate=0.0047),
    Architecture.STG_GCN: ModelConfig(
        "stg_gcn", hidden_dim=64, latent_dim=128, n_layers=2, dropout=0.03, learning_rate=0.0047, timesteps=8
    ),
    Architecture.STG_GAT: ModelConfig(
        "stg_gat", hidden_dim=128, latent_dim=256, n_layers=1, dropout=0.09, learning_rate=0.0004, gat_heads=4, timesteps=2
    ),
    Architecture.STG_RGCN: ModelConfig(
        "stg_rgcn", hidden_dim=128, latent_dim=32, n_layers=1, dropout=0.45, learning_rate=0.0017, timesteps=8
    ),
    Architecture.MLP: ModelConfig("mlp", hidden_dim=128, latent_dim=2, n_layers=2, dropout=0.0, learning_rate=0.0023),
}


def default_config(architecture, **overrides) -> ModelConfig:
    return replace(DEFAULT_CONFIGS[Architecture(architecture)], **overrides)


# ---------------------------------------------------------------------------
# Message plans: index arrays for a batch of identical graphs


class _Plan:
    """Index arrays for ``batch`` disjoint copies of one topology."""

    def __init__(self, topology: GraphTopology, batch: int):
        n = topology.n_nodes
        self.n = n * batch

        def tile(a):
            if batch == 1:
                return a
            return (a[None, :] + (np.arange(batch) * n)[:, None]).ravel()

        # GCN: self loops, symmetric normalization by degree + 1
        src, dst, _ = topology.messages(self_loops=True)
        deg = np.bincount(dst, minlength=n).astype(np.float64)
        coef = 1.0 / np.sqrt(deg[src] * deg[dst])
        self.gcn_src = RowIndex(tile(src))
        self.gcn_dst = RowIndex(tile(dst))
        self.gcn_coef = np.tile(coef, batch)[:, None]

        # GAT: neighbors plus optional self loop, softmax segments by destination
        self.gat = {}
        for loops in (True, False):
            s, d, _ = topology.messages(self_loops=loops)
            s, d = tile(s), tile(d)
            self.gat[loops] = (RowIndex(s), RowIndex(d), Segments(d, self.n) if len(d) else None)

        # RGCN: per relation, mean over that relation's neighbors
        src, dst, rel = topology.messages(self_loops=False)
        self.rgcn = {}
        for r in np.unique(rel):
            m = rel == r
            s, d = src[m], dst[m]
            c = np.bincount(d, minlength=n).astype(np.float64)
            self.rgcn[int(r)] = (RowIndex(tile(s)), RowIndex(tile(d)), np.tile(1.0 / c[d], batch)[:, None])

        self.pool = Segments(np.repeat(np.arange(batch), n), batch)
        cur = topology.current_slice
        self.current = RowIndex(tile(cur))


def plan(topology: GraphTopology, batch: int = 1) -> _Plan:
    key = ("plan", batch)
    if key not in topology._cache:
        topology._cache[key] = _Plan(topology, batch)
    return topology._cache[key]


def _act(h, activation):
    fn = ACTIVATIONS[activation] if isinstance(activation, str) else activation
    return h if fn is None else fn(h)


def _check(kind, H, W):
    if H.shape[1] != W.shape[0]:
        raise ShapeMismatch(kind, H.shape, W.shape)


# ---------------------------------------------------------------------------
# Layers


def gcn_layer(H, topology: GraphTopology, W, b=None, activation=None, batch: int = 1) -> Tensor:
    """Symmetric-normalized graph convolution with self loops, evaluated edge-wise."""
    H, W = ad._t(H), ad._t(W)
    _check("gcn_layer", H, W)
    p = plan(topology, batch)
    if H.shape[0] != p.n:
        raise ShapeMismatch("gcn_layer", H.shape, (p.n, W.shape[0]))
    hw = ad.matmul(H, W)
    msg = ad.mul(ad.gather(hw, p.gcn_src), p.gcn_coef.astype(hw.data.dtype))
    out = ad.scatter_add(msg, p.gcn_dst, p.n)
    if b is not None:
        out = ad.add(out, b)
    return _act(out, activation)


def _block_sum(heads: int, width: int, dtype) -> np.ndarray:
    return np.kron(np.eye(heads), np.ones((width, 1))).astype(dtype)


def gat_layer(
    H,
    topology: GraphTopology,
    W,
    a_src,
    a_dst,
    heads: int = 1,
    b=None,
    activation=None,
    self_loops: bool = True,
    slope: float = 0.2,
    batch: int = 1,
    return_attention: bool = False,
):
    """Multi-head graph attention; head outputs are concatenated.

    ``W`` is ``[f_in, heads * f_out]``; ``a_src``/``a_dst`` are ``[1, heads * f_out]``
    and score ``LeakyReLU(a_dst . Wh_i + a_src . Wh_j)`` for the message j -> i.
    """
    H, W, a_src, a_dst = (ad._t(x) for x in (H, W, a_src, a_dst))
    _check("gat_layer", H, W)
    if W.shape[1] % heads or a_src.shape != (1, W.shape[1]) or a_dst.shape != (1, W.shape[1]):
        raise ShapeMismatch("gat_layer", W.shape, a_src.shape, a_dst.shape)
    p = plan(topology, batch)
    src, dst, seg = p.gat[self_loops]
    width = W.shape[1] // heads
    hw = ad.matmul(H, W)
    if seg is None:
        out = Tensor(np.zeros((p.n, W.shape[1]), dtype=hw.data.dtype))
        alpha = None
    else:
        blk = _block_sum(heads, width, hw.data.dtype)
        s_src = ad.matmul(ad.mul(hw, a_src), blk)
        s_dst = ad.matmul(ad.mul(hw, a_dst), blk)
        e = ad.leaky_relu(ad.add(ad.gather(s_dst, dst), ad.gather(s_src, src)), slope)
        alpha = ad.segment_softmax(e, seg)
        msg = ad.mul(ad.gather(hw, src), ad.matmul(alpha, blk.T.copy()))
        out = ad.scatter_add(msg, dst, p.n)
    if b is not None:
        out = ad.add(out, b)
    out = _act(out, activation)
    return (out, alpha) if return_attention else out


def rgcn_layer(
    H, topology: GraphTopology, W_rel, W_self, b=None, activation=None, norm_scales=None, batch: int = 1
) -> Tensor:
    """Relational convolution: per-relation neighbor means through ``W_rel[r]`` plus ``W_self``."""
    H, W_self = ad._t(H), ad._t(W_self)
    _check("rgcn_layer", H, W_self)
    p = plan(topology, batch)
    out = ad.matmul(H, W_self)
    for r, (src, dst, coef) in p.rgcn.items():
        if r >= len(W_rel) or W_rel[r] is None:
            raise MissingRelationWeight(f"no weight for relation {r}")
        hw = ad.matmul(H, W_rel[r])
        msg = ad.mul(ad.gather(hw, src), coef.astype(hw.data.dtype))
        if norm_scales is not None:
            msg = ad.mul(msg, norm_scales[r])
        out = ad.add(out, ad.scatter_add(msg, dst, p.n))
    if b is not None:
        out = ad.add(out, b)
    return _act(out, activation)


def dense_gcn_reference(H: np.ndarray, topology: GraphTopology, W: np.ndarray) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2 H W`` with dense matrices; oracle for :func:`gcn_layer`."""
    a = topology.adjacency() + np.eye(topology.n_nodes)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return (d[:, None] * a * d[None, :]) @ H @ W


# ---------------------------------------------------------------------------
# Autoencoder


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class AutoencoderModel:
    """Encoder -> global mean pool -> latent -> per-node latent rows -> decoder.

    Inputs are stacked node features ``[batch * n_nodes, 3]``; for spatiotemporal
    models each sample holds ``timesteps + 1`` slices, oldest first.
    """

    def __init__(self, config: ModelConfig, n_milemarkers: int, n_lanes: int, seed: int = 0, params=None):
        self.config = config
        self.n_milemarkers = n_milemarkers
        self.n_lanes = n_lanes
        base = build_static_topology(n_milemarkers, n_lanes)
        self.topology = build_st_topology(base, config.timesteps) if config.architecture.spatiotemporal else base
        self.params: dict[str, Tensor] = params if params is not None else self._init_params(np.random.default_rng(seed))

    @property
    def n_base(self) -> int:
        return self.n_milemarkers * self.n_lanes

    @property
    def n_nodes(self) -> int:
        return self.topology.n_nodes

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _init_params(self, rng) -> dict[str, Tensor]:
        c = self.config
        p: dict[str, np.ndarray] = {}
        arch = c.architecture

        def graph_layer(prefix, f_in, f_out, heads=1):
            if arch in (Architecture.GCN, Architecture.STG_GCN):
                p[f"{prefix}.W"] = _glorot(rng, f_in, f_out)
            elif arch is Architecture.STG_GAT:
                per = f_out // heads
                p[f"{prefix}.W"] = _glorot(rng, f_in, heads * per)
                p[f"{prefix}.a_src"] = _glorot(rng, 1, heads * per)
                p[f"{prefix}.a_dst"] = _glorot(rng, 1, heads * per)
            elif arch is Architecture.STG_RGCN:
                p[f"{prefix}.W_self"] = _glorot(rng, f_in, f_out)
                for r in range(self.topology.n_relations):
                    p[f"{prefix}.W_rel{r}"] = _glorot(rng, f_in, f_out)
                if c.rgcn_learned_norm:
                    for r in range(self.topology.n_relations):
                        p[f"{prefix}.norm{r}"] = np.ones((1, 1))
            else:
                p[f"{prefix}.W"] = _glorot(rng, f_in, f_out)
            p[f"{prefix}.b"] = np.zeros((1, f_out))

        if arch is Architecture.MLP:
            enc = [N_FEATURES] + [c.hidden_dim] * (c.n_layers - 1) + [c.latent_dim]
            dec = [c.latent_dim] + [c.hidden_dim] * (c.n_layers - 1) + [N_FEATURES]
            for i in range(c.n_layers):
                graph_layer(f"enc{i}", enc[i], enc[i + 1])
            for i in range(c.n_layers):
                graph_layer(f"dec{i}", dec[i], dec[i + 1])
        else:
            heads = c.gat_heads if arch is Architecture.STG_GAT else 1
            enc = [N_FEATURES] + [c.hidden_dim] * c.n_layers
            for i in range(c.n_layers):
                graph_layer(f"enc{i}", enc[i], enc[i + 1], heads)
            p["latent.W"] = _glorot(rng, c.hidden_dim, c.latent_dim)
            p["latent.b"] = np.zeros((1, c.latent_dim))
            p["expand.W"] = _glorot(rng, c.latent_dim, c.latent_dim * self.n_nodes)
            p["expand.b"] = np.zeros((1, c.latent_dim * self.n_nodes))
            dec = [c.latent_dim] + [c.hidden_dim] * (c.n_layers - 1) + [N_FEATURES]
            for i in range(c.n_layers):
                last = i == c.n_layers - 1
                graph_layer(f"dec{i}", dec[i], dec[i + 1], 1 if last else heads)
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def _graph_layer(self, prefix, h, act, batch, heads=1):
        c, p, arch = self.config, self.params, self.config.architecture
        b = p[f"{prefix}.b"]
        if arch in (Architecture.GCN, Architecture.STG_GCN):
            return gcn_layer(h, self.topology, p[f"{prefix}.W"], b, act, batch)
        if arch is Architecture.STG_GAT:
            return gat_layer(
                h, self.topology, p[f"{prefix}.W"], p[f"{prefix}.a_src"], p[f"{prefix}.a_dst"],
                heads, b, act, c.gat_self_loops, batch=batch,
            )
        w_rel = [p.get(f"{prefix}.W_rel{r}") for r in range(self.topology.n_relations)]
        norms = None
        if c.rgcn_learned_norm:
            norms = [p[f"{prefix}.norm{r}"] for r in range(self.topology.n_relations)]
        return rgcn_layer(h, self.topology, w_rel, p[f"{prefix}.W_self"], b, act, norms, batch)

    def forward(self, X, batch: int = 1, training: bool = False, rng=None) -> Tensor:
        """Reconstruct every node of ``batch`` stacked samples, ``[batch * n_nodes, 3]``."""
        c, p = self.config, self.params
        X = ad._t(X)
        if X.shape != (batch * self.n_nodes, N_FEATURES):
            raise ConfigMismatch(
                f"expected input {(batch * self.n_nodes, N_FEATURES)} for {c.architecture.value}, got {X.shape}"
            )
        drop = c.dropout if training else 0.0
        act = c.activation

        if c.architecture is Architecture.MLP:
            h = X
            for i in range(c.n_layers):
                h = ad.add(ad.matmul(h, p[f"enc{i}.W"]), p[f"enc{i}.b"])
                if i < c.n_layers - 1:
                    h = ad.dropout(_act(h, act), drop, rng, training)
            for i in range(c.n_layers):
                h = ad.add(ad.matmul(h, p[f"dec{i}.W"]), p[f"dec{i}.b"])
                if i < c.n_layers - 1:
                    h = ad.dropout(_act(h, act), drop, rng, training)
            return h

        heads = c.gat_heads if c.architecture is Architecture.STG_GAT else 1
        h = X
        for i in range(c.n_layers):
            h = ad.dropout(self._graph_layer(f"enc{i}", h, act, batch, heads), drop, rng, training)
        pooled = ad.mean_pool(h, plan(self.topology, batch).pool)
        z = ad.add(ad.matmul(pooled, p["latent.W"]), p["latent.b"])
        h = ad.add(ad.matmul(z, p["expand.W"]), p["expand.b"])
        h = ad.reshape(h, batch * self.n_nodes, c.latent_dim)
        for i in range(c.n_layers):
            last = i == c.n_layers - 1
            h = self._graph_layer(f"dec{i}", h, None if last else act, batch, 1 if last else heads)
            if not last:
                h = ad.dropout(h, drop, rng, training)
        return h

    def current_rows(self, batch: int = 1) -> RowIndex:
        """Rows of the newest slice within a stacked batch."""
        return plan(self.topology, batch).current

    def loss(self, X, batch: int, training: bool = False, rng=None) -> Tensor:
        """Per-node squared error summed over features, averaged over current-slice nodes."""
        X = ad._t(X)
        rows = self.current_rows(batch)
        recon = ad.gather(self.forward(X, batch, training, rng), rows)
        target = X.data[rows.idx]
        return ad.mse(recon, target, reduction="row_sum")

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        header = [MAGIC]
        header += [f"{k}={v}" for k, v in self.config.to_dict().items()]
        header += [f"n_milemarkers={self.n_milemarkers}", f"n_lanes={self.n_lanes}"]
        header += [f"tensor {name} {t.shape[0]} {t.shape[1]}" for name, t in self.params.items()]
        header.append("end")
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            for t in self.params.values():
                fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "AutoencoderModel":
        with open(path, "rb") as fh:
            if fh.readline().decode("ascii", "replace").rstrip("\n") != MAGIC:
                raise CheckpointError(f"{path}: not an {MAGIC} checkpoint")
            cfg, shapes = {}, []
            while True:
                line = fh.readline().decode("ascii").rstrip("\n")
                if not line:
                    raise CheckpointError(f"{path}: truncated header")
                if line == "end":
                    break
                if line.startswith("tensor "):
                    _, name, r, c = line.split()
                    shapes.append((name, int(r), int(c)))
                else:
                    k, v = line.split("=", 1)
                    cfg[k] = v
            blob = fh.read()
        n_mm, n_lanes = int(cfg.pop("n_milemarkers")), int(cfg.pop("n_lanes"))
        model = cls(ModelConfig.from_dict(cfg), n_mm, n_lanes)
        expected = [(k, *t.shape) for k, t in model.params.items()]
        if expected != shapes:
            raise CheckpointError(f"{path}: tensor layout does not match the declared config")
        total = sum(r * c for _, r, c in shapes)
        if len(blob) != 4 * total:
            raise CheckpointError(f"{path}: expected {4 * total} payload bytes, found {len(blob)}")
        flat = np.frombuffer(blob, dtype="<f4")
        pos = 0
        for name, r, c in shapes:
            model.params[name].data = flat[pos : pos + r * c].reshape(r, c).astype(np.float32)
            pos += r * c
        return model

    def copy(self) -> "AutoencoderModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k, dtype=v.data.dtype) for k, v in self.params.items()}
        m = AutoencoderModel.__new__(AutoencoderModel)
        m.config, m.n_milemarkers, m.n_lanes, m.topology, m.params = (
            self.config, self.n_milemarkers, self.n_lanes, self.topology, params,
        )
        return m


def window_stack(values: np.ndarray, t: int, timesteps: int) -> np.ndarray:
    """Stack slices ``t - timesteps .. t`` of a ``[time, node, 3]`` array into rows, oldest first."""
    if t < timesteps:
        raise ConfigMismatch(f"time index {t} has fewer than {timesteps} previous slices")
    return values[t - timesteps : t + 1].reshape(-1, values.shape[-1])


def model_forward(model: AutoencoderModel, window: np.ndarray) -> np.ndarray:
    """Reconstruct the current slice ``[n_base, 3]`` from one input window."""
    window = np.asarray(window)
    if window.ndim == 3:
        if window.shape[0] != model.config.window:
            raise ConfigMismatch(f"window of {window.shape[0]} slices, model expects {model.config.window}")
        window = window.reshape(-1, N_FEATURES)
    out = model.forward(Tensor(window), batch=1)
    return out.data[model.current_rows(1).idx]
