"""Context-conditioned graph-attention backbone with forecast and reconstruction heads.

Data flow for one batch of windows ``x`` (B, L, k)::

    ctx      = embed_context(batch)                       # per-step dynamic + static
    c        = relu(film_conv(relu(film_conv(x, 1)), 2))  # length-preserving, k channels
    fused    = [c | feature_attention(c) | temporal_attention(c)]   # (B, L, 3k)
    latent   = GRU encoder(fused)[:, -1]
    forecast = MLP(latent) -> (B, H, k)
    recon    = autonomous GRU decoder(latent) -> (B, L, k)
"""

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError

CONTEXT_BLOCKS = {"none": (), "block1": (1,), "block2": (2,), "both": (1, 2)}
CONTEXT_MODES = ("full", "dynamic_only", "static_only")


@dataclass
class ModelConfig:
    L: int
    H: int
    k: int
    kernel_size: int = 4
    use_gatv2: bool = True
    gru_layers: int = 1
    gru_hidden: int = 32
    forecast_layers: int = 1
    forecast_hidden: int = 32
    recon_layers: int = 1
    recon_hidden: int = 32
    dropout: float = 0.0
    lr: float = 1e-3
    embed_dim: int = 8
    gamma: float = 1.0
    context_blocks: str = "both"
    context_mode: str = "full"
    dyn_cardinalities: tuple = ()
    static_cardinalities: tuple = ()
    n_static_real: int = 0
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.dyn_cardinalities = tuple(int(c) for c in self.dyn_cardinalities)
        self.static_cardinalities = tuple(int(c) for c in self.static_cardinalities)
        dims = ("L", "H", "k", "kernel_size", "gru_layers", "gru_hidden", "forecast_hidden",
                "recon_layers", "recon_hidden", "embed_dim")
        bad = [d for d in dims if int(getattr(self, d)) < 1]
        if bad or self.forecast_layers < 0:
            raise ConfigurationError(f"dimensions must be positive: {bad or ['forecast_layers']}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if self.context_blocks not in CONTEXT_BLOCKS:
            raise ConfigurationError(f"context_blocks must be one of {sorted(CONTEXT_BLOCKS)}")
        if self.context_mode not in CONTEXT_MODES:
            raise ConfigurationError(f"context_mode must be one of {CONTEXT_MODES}")
        if any(c < 1 for c in self.dyn_cardinalities + self.static_cardinalities):
            raise ConfigurationError("embedding cardinalities must include the null row")

    @property
    def dyn_ctx_dim(self):
        return len(self.dyn_cardinalities) * self.embed_dim

    @property
    def static_ctx_dim(self):
        return (len(self.static_cardinalities) + (1 if self.n_static_real else 0)) * self.embed_dim

    def to_dict(self):
        d = asdict(self)
        d["dyn_cardinalities"] = list(self.dyn_cardinalities)
        d["static_cardinalities"] = list(self.static_cardinalities)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ContextBundle:
    dyn: Tensor | None  # (B, L, d_dyn * E)
    static: Tensor | None  # (B, d_stat * E + E)


@dataclass
class ModelState:
    params: dict
    config: ModelConfig
    rng_seed: int = 0
    meta: dict = field(default_factory=dict)

    def parameters(self):
        return list(self.params.values())

    def copy(self):
        return ModelState({n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()},
                          self.config, self.rng_seed, dict(self.meta))

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))


# ---------------------------------------------------------------- parameters


def parameter_shapes(cfg):
    """Ordered name -> shape map implied by the configuration."""
    k, L, E = cfg.k, cfg.L, cfg.embed_dim
    shapes = {}
    for i, card in enumerate(cfg.dyn_cardinalities):
        shapes[f"emb_dyn_{i}"] = (card, E)
    for i, card in enumerate(cfg.static_cardinalities):
        shapes[f"emb_static_{i}"] = (card, E)
    if cfg.n_static_real:
        shapes["static_real_w"] = (cfg.n_static_real, E)
        shapes["static_real_b"] = (E,)
    for blk in (1, 2):
        shapes[f"conv{blk}_w"] = (cfg.kernel_size, k, k)
        shapes[f"conv{blk}_b"] = (k,)
        if cfg.dyn_ctx_dim:
            shapes[f"film{blk}_wd"] = (cfg.dyn_ctx_dim, 2 * k)
        if cfg.static_ctx_dim:
            shapes[f"film{blk}_ws"] = (cfg.static_ctx_dim, 2 * k)
        shapes[f"film{blk}_b"] = (2 * k,)
    for name, dim in (("fa", L), ("ta", k)):
        if cfg.use_gatv2:
            emb = 2 * dim
            shapes[f"{name}_w"] = (2 * dim, emb)
            shapes[f"{name}_b"] = (emb,)
            shapes[f"{name}_a"] = (emb, 1)
        else:
            emb = dim
            shapes[f"{name}_w"] = (dim, emb)
            shapes[f"{name}_b"] = (emb,)
            shapes[f"{name}_a"] = (2 * emb, 1)
    din = 3 * k
    for i in range(cfg.gru_layers):
        G = cfg.gru_hidden
        shapes[f"enc{i}_wx"] = (din, 3 * G)
        shapes[f"enc{i}_wh"] = (G, 3 * G)
        shapes[f"enc{i}_bx"] = (3 * G,)
        shapes[f"enc{i}_bh"] = (3 * G,)
        din = G
    din = cfg.gru_hidden
    for i in range(cfg.forecast_layers):
        shapes[f"fc{i}_w"] = (din, cfg.forecast_hidden)
        shapes[f"fc{i}_b"] = (cfg.forecast_hidden,)
        din = cfg.forecast_hidden
    shapes["fc_out_w"] = (din, cfg.H * k)
    shapes["fc_out_b"] = (cfg.H * k,)
    R = cfg.recon_hidden
    shapes["dec_init_w"] = (cfg.gru_hidden, R)
    shapes["dec_init_b"] = (R,)
    for i in range(cfg.recon_layers):
        shapes[f"dec{i}_wx"] = (R, 3 * R)
        shapes[f"dec{i}_wh"] = (R, 3 * R)
        shapes[f"dec{i}_bx"] = (3 * R,)
        shapes[f"dec{i}_bh"] = (3 * R,)
    shapes["rec_out_w"] = (R, k)
    shapes["rec_out_b"] = (k,)
    return shapes


def _init_value(name, shape, rng):
    if name.startswith("film"):
        return np.zeros(shape)  # FiLM starts as the identity
    if name.startswith("emb_"):
        return rng.normal(0.0, 1.0, shape)
    if len(shape) == 1:
        if name.startswith(("enc", "dec")):
            bound = 1.0 / np.sqrt(shape[0] // 3)
            return rng.uniform(-bound, bound, shape)
        return np.zeros(shape)
    if name.startswith(("enc", "dec")) and name[-2:] in ("wx", "wh"):
        bound = 1.0 / np.sqrt(shape[1] // 3)
        return rng.uniform(-bound, bound, shape)
    fan_in = int(np.prod(shape[:-1]))
    fan_out = shape[-1] * (shape[0] if len(shape) == 3 else 1)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


def init_model(cfg, seed=0):
    rng = np.random.default_rng(seed)
    params = {n: Tensor(_init_value(n, s, rng), requires_grad=True)
              for n, s in parameter_shapes(cfg).items()}
    return ModelState(params, cfg, int(seed))


# ---------------------------------------------------------------- components


def embed_context(batch, state):
    """Embed categorical context and project static reals to the embedding space."""
    cfg, P = state.config, state.params
    B, L = batch.inputs.shape[0], batch.inputs.shape[1]
    dyn = static = None
    if cfg.dyn_cardinalities:
        parts = [ad.embedding(P[f"emb_dyn_{i}"], batch.dyn_ctx[:, :, i])
                 for i in range(len(cfg.dyn_cardinalities))]
        dyn = ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
        if cfg.context_mode == "static_only":
            dyn = Tensor(np.zeros((B, L, cfg.dyn_ctx_dim)))
    if cfg.static_ctx_dim:
        parts = [ad.embedding(P[f"emb_static_{i}"], batch.static_codes[:, i])
                 for i in range(len(cfg.static_cardinalities))]
        if cfg.n_static_real:
            parts.append(ad.matmul(Tensor(batch.static_reals), P["static_real_w"]) + P["static_real_b"])
        static = ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
        if cfg.context_mode == "dynamic_only":
            static = Tensor(np.zeros((B, cfg.static_ctx_dim)))
    return ContextBundle(dyn, static)


def film_conv_block(x, ctx, block_id, state):
    """Convolution followed by ``(1 + gamma) * conv + beta`` context modulation."""
    cfg, P = state.config, state.params
    y = ad.conv1d(x, P[f"conv{block_id}_w"]) + P[f"conv{block_id}_b"]
    if block_id not in CONTEXT_BLOCKS[cfg.context_blocks]:
        return y
    B, L, k = y.shape
    proj = P[f"film{block_id}_b"]
    if ctx.dyn is not None:
        proj = proj + ad.matmul(ctx.dyn, P[f"film{block_id}_wd"])
    if ctx.static is not None:
        s = ad.matmul(ctx.static, P[f"film{block_id}_ws"])
        proj = proj + ad.reshape(s, (B, 1, 2 * k))
    if proj.ndim == 1:
        proj = ad.reshape(proj, (1, 1, 2 * k))
    return ad.affine_modulate(y, proj[..., :k], proj[..., k:])


def attention_scores(v, w, b, a, use_gatv2, slope=0.2):
    """Pairwise scores e[i, j] for target node i and source node j.

    GATv2: ``a . LeakyReLU(W [v_i || v_j] + b)``.
    GAT:   ``LeakyReLU(a . [W v_i + b || W v_j + b])``.
    ``v`` is (B, N, D); returns (B, N, N).
    """
    B, N, D = v.shape
    if use_gatv2:
        E = w.shape[1]
        left = ad.matmul(v, w[:D]) + b
        right = ad.matmul(v, w[D:])
        pair = ad.reshape(left, (B, N, 1, E)) + ad.reshape(right, (B, 1, N, E))
        e = ad.matmul(ad.leaky_relu(pair, slope), a)
        return ad.reshape(e, (B, N, N))
    E = w.shape[1]
    wv = ad.matmul(v, w) + b
    left = ad.matmul(wv, a[:E])
    right = ad.matmul(wv, a[E:])
    return ad.leaky_relu(left + ad.reshape(right, (B, 1, N)), slope)


def _graph_attention(v, prefix, state, trace):
    cfg, P = state.config, state.params
    e = attention_scores(v, P[f"{prefix}_w"], P[f"{prefix}_b"], P[f"{prefix}_a"],
                         cfg.use_gatv2, cfg.leaky_slope)
    att = ad.softmax(e, axis=-1)
    if trace is not None:
        trace[prefix] = att.data
    return ad.sigmoid(ad.matmul(att, v))


def feature_attention(h, state, trace=None):
    """KPIs as nodes; each node carries its length-L series."""
    v = ad.transpose(h, (0, 2, 1))
    out = _graph_attention(v, "fa", state, trace)
    return ad.transpose(out, (0, 2, 1))


def temporal_attention(h, state, trace=None):
    """Timesteps as nodes; each node carries its k-vector."""
    return _graph_attention(h, "ta", state, trace)


def _check_batch(batch, cfg):
    B = batch.inputs.shape[0]
    if batch.inputs.shape[1:] != (cfg.L, cfg.k):
        raise DimensionError(f"batch inputs {batch.inputs.shape} do not match L={cfg.L}, k={cfg.k}")
    if batch.dyn_ctx.shape != (B, cfg.L, len(cfg.dyn_cardinalities)):
        raise DimensionError(f"dynamic context {batch.dyn_ctx.shape} does not match config")
    if batch.static_codes.shape[1] != len(cfg.static_cardinalities):
        raise DimensionError(f"static codes {batch.static_codes.shape} do not match config")


def forward(batch, state, train_mode=False, rng=None, trace=None):
    """Return ``(forecast (B, H, k), recon (B, L, k))`` as tensors."""
    cfg, P = state.config, state.params
    _check_batch(batch, cfg)
    if train_mode and cfg.dropout > 0 and rng is None:
        raise ContractError("train_mode with dropout needs an rng")
    drop = cfg.dropout if train_mode else 0.0
    B, L, k = batch.inputs.shape

    x = Tensor(batch.inputs)
    ctx = embed_context(batch, state)
    c = ad.relu(film_conv_block(x, ctx, 1, state))
    c = ad.relu(film_conv_block(c, ctx, 2, state))
    fused = ad.concat([c, feature_attention(c, state, trace), temporal_attention(c, state, trace)], axis=-1)
    fused = ad.dropout(fused, drop, rng)

    seq = fused
    for i in range(cfg.gru_layers):
        h0 = Tensor(np.zeros((B, cfg.gru_hidden)))
        seq = ad.gru(seq, h0, P[f"enc{i}_wx"], P[f"enc{i}_wh"], P[f"enc{i}_bx"], P[f"enc{i}_bh"])
    latent = seq[:, -1, :]
    if trace is not None:
        trace["latent"] = latent.data

    z = latent
    for i in range(cfg.forecast_layers):
        z = ad.relu(ad.matmul(z, P[f"fc{i}_w"]) + P[f"fc{i}_b"])
        z = ad.dropout(z, drop, rng)
    forecast = ad.reshape(ad.matmul(z, P["fc_out_w"]) + P["fc_out_b"], (B, cfg.H, k))

    h0 = ad.tanh(ad.matmul(latent, P["dec_init_w"]) + P["dec_init_b"])
    dec = None
    for i in range(cfg.recon_layers):
        dec = ad.gru(dec, h0, P[f"dec{i}_wx"], P[f"dec{i}_wh"], P[f"dec{i}_bx"], P[f"dec{i}_bh"],
                     steps=L)
    recon = ad.matmul(dec, P["rec_out_w"]) + P["rec_out_b"]
    return forecast, recon


def predict(batch, state):
    """Inference without graph recording; returns numpy arrays."""
    with ad.no_grad():
        f, r = forward(batch, state, train_mode=False)
    return f.data, r.data


# ---------------------------------------------------------------- checkpoints

MAGIC = b"TELADCK1"


def save_state(state, path):
    """Write a checkpoint.

    Layout: 8-byte magic ``TELADCK1``, little-endian uint64 header length,
    UTF-8 JSON header ``{"format", "config", "rng_seed", "meta", "tensors":
    [{"name", "shape", "offset", "nbytes"}]}``, then the concatenated raw
    little-endian float64 payloads in header order.
    """
    entries, payload, offset = [], [], 0
    for name, p in state.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"format": 1, "config": state.config.to_dict(), "rng_seed": state.rng_seed,
                         "meta": state.meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)


def load_state(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    body = blob[16 + hlen:]
    cfg = ModelConfig.from_dict(header["config"])
    expected = parameter_shapes(cfg)
    got = {e["name"]: tuple(e["shape"]) for e in header["tensors"]}
    if got != expected:
        diff = {n: (got.get(n), expected.get(n)) for n in set(got) | set(expected)
                if got.get(n) != expected.get(n)}
        raise DimensionError(f"{path}: parameter shapes do not match config: {diff}")
    params = {}
    for e in header["tensors"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
        params[e["name"]] = Tensor(arr, requires_grad=True)
    params = {n: params[n] for n in expected}
    return ModelState(params, cfg, int(header["rng_seed"]), header.get("meta", {}))
