"""Entity-set policy network.

Per-category weight-shared MLPs whose outputs are element-wise max-pooled
into one fixed-size feature per category; the concatenated features plus the
ego vector feed a trunk with Beta-distribution action heads and a value head.
Forward, exact reverse-mode backward, and gradient-based entity saliency are
all hand-written in numpy so that gradients are checkable against finite
differences and pooling invariance holds bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, digamma, polygamma

from .config import digest_of

CHECKPOINT_MAGIC = b"SWPL"
CHECKPOINT_VERSION = 1
SAMPLE_EPS = 1e-6


class CapacityError(ValueError):
    """Fixed-capacity (concatenation) encoder got more entities than it supports."""


@dataclass(frozen=True)
class CategorySpec:
    name: str
    input_dim: int
    hidden: tuple = (64, 64)
    feat_dim: int = 32


@dataclass(frozen=True)
class GeeConfig:
    ego_dim: int
    categories: tuple  # of CategorySpec
    trunk_hidden: tuple = (128, 128)
    action_dim: int = 3
    action_bounds: tuple = ((-2.0, 2.0), (-1.0, 1.0), (-1.5, 1.5))
    aggregator: str = "max"  # "max" or fixed-capacity "concat"
    max_entities: tuple = ()  # per category, only used by "concat"

    def __post_init__(self):
        assert len(self.categories) >= 1
        assert self.action_dim == len(self.action_bounds)
        if self.aggregator == "concat":
            assert len(self.max_entities) == len(self.categories)

    def pooled_dim(self, e: int) -> int:
        spec = self.categories[e]
        if self.aggregator == "concat":
            return spec.feat_dim * self.max_entities[e]
        return spec.feat_dim

    @property
    def trunk_in_dim(self) -> int:
        return self.ego_dim + sum(self.pooled_dim(e) for e in range(len(self.categories)))

    def to_dict(self) -> dict:
        return {
            "ego_dim": self.ego_dim,
            "categories": [
                [c.name, c.input_dim, list(c.hidden), c.feat_dim] for c in self.categories
            ],
            "trunk_hidden": list(self.trunk_hidden),
            "action_dim": self.action_dim,
            "action_bounds": [list(b) for b in self.action_bounds],
            "aggregator": self.aggregator,
            "max_entities": list(self.max_entities),
        }

    def digest(self) -> str:
        return digest_of(self.to_dict())


@dataclass
class Layer:
    w: np.ndarray  # (in, out)
    b: np.ndarray  # (out,)
    act: str  # tanh | relu | linear


@dataclass
class Mlp:
    layers: list

    def dims(self):
        return [self.layers[0].w.shape[0]] + [l.w.shape[1] for l in self.layers]


@dataclass
class PolicyParams:
    encoders: list  # Mlp per category
    trunk: Mlp
    alpha_head: Layer
    beta_head: Layer
    value_head: Layer
    config: GeeConfig = field(repr=False, default=None)


def _make_mlp(dims, acts, rng, scale=1.0) -> Mlp:
    layers = []
    for i in range(len(dims) - 1):
        w = rng.normal(0.0, scale / np.sqrt(dims[i]), size=(dims[i], dims[i + 1]))
        layers.append(Layer(w, np.zeros(dims[i + 1]), acts[i]))
    return Mlp(layers)


def init_params(config: GeeConfig, rng: np.random.Generator) -> PolicyParams:
    encoders = []
    for spec in config.categories:
        dims = [spec.input_dim, *spec.hidden, spec.feat_dim]
        acts = ["tanh"] * len(spec.hidden) + ["linear"]
        encoders.append(_make_mlp(dims, acts, rng))
    trunk_dims = [config.trunk_in_dim, *config.trunk_hidden]
    trunk = _make_mlp(trunk_dims, ["tanh"] * len(config.trunk_hidden), rng)
    h = config.trunk_hidden[-1]
    # small head init keeps alpha ~= beta at start (near-uniform actions)
    alpha_head = Layer(rng.normal(0, 0.01, (h, config.action_dim)), np.zeros(config.action_dim), "linear")
    beta_head = Layer(rng.normal(0, 0.01, (h, config.action_dim)), np.zeros(config.action_dim), "linear")
    value_head = Layer(rng.normal(0, 0.01, (h, 1)), np.zeros(1), "linear")
    return PolicyParams(encoders, trunk, alpha_head, beta_head, value_head, config)


@dataclass
class ObservationBundle:
    """Ego feature vector plus per-category variable-length entity matrices."""

    ego: np.ndarray
    categories: dict  # name -> (n_entities, input_dim) float64 array


# ---------------------------------------------------------------------------
# forward


def _act(x, kind):
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    return x


def _act_grad(post, pre, kind):
    if kind == "tanh":
        return 1.0 - post * post
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    return np.ones_like(pre)


def mlp_forward(mlp: Mlp, x: np.ndarray):
    """Run the MLP; returns (output, cache) where cache holds per-layer i/o."""
    cache = [x]
    pres = []
    h = x
    for layer in mlp.layers:
        pre = h @ layer.w + layer.b
        h = _act(pre, layer.act)
        pres.append(pre)
        cache.append(h)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite activations")
    return h, (cache, pres)


def mlp_backward(mlp: Mlp, cache, d_out: np.ndarray):
    """Exact reverse pass; returns (layer grads as [(dW, db)], d_input)."""
    acts, pres = cache
    grads = [None] * len(mlp.layers)
    d = d_out
    for i in reversed(range(len(mlp.layers))):
        layer = mlp.layers[i]
        d = d * _act_grad(acts[i + 1], pres[i], layer.act)
        x = acts[i]
        if x.ndim == 1:
            dw = np.outer(x, d)
            db = d.copy()
        else:
            dw = x.T @ d
            db = d.sum(axis=0)
        grads[i] = (dw, db)
        d = d @ layer.w.T
    return grads, d


def local_features(enc: Mlp, entities: np.ndarray):
    """Per-entity features with shared weights; empty input gives empty output."""
    entities = np.asarray(entities, dtype=np.float64)
    if entities.size == 0:
        return np.zeros((0, enc.layers[-1].w.shape[1]))
    if entities.ndim != 2 or entities.shape[1] != enc.layers[0].w.shape[0]:
        raise ValueError("entity dimension mismatch")
    out, _ = mlp_forward(enc, entities)
    return out


def max_pool(features: np.ndarray, feat_dim: int | None = None):
    """Element-wise max over the entity axis; empty set pools to zeros."""
    features = np.asarray(features, dtype=np.float64)
    if features.size == 0:
        if feat_dim is None:
            raise ValueError("feat_dim required for empty pooling")
        return np.zeros(feat_dim)
    if features.ndim != 2:
        raise ValueError("expected (n, feat_dim) feature matrix")
    return features.max(axis=0)


def universal_feature(global_feats: list) -> np.ndarray:
    """Concatenate per-category global features in fixed category order."""
    return np.concatenate([np.asarray(g, dtype=np.float64) for g in global_feats])


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardCache:
    cat_inputs: list
    cat_caches: list
    cat_feats: list
    argmax: list  # per category: (feat_dim,) entity index array, or None if empty
    trunk_in: np.ndarray
    trunk_cache: tuple
    trunk_out: np.ndarray
    raw_alpha: np.ndarray
    raw_beta: np.ndarray


def forward(params: PolicyParams, obs: ObservationBundle, config: GeeConfig | None = None):
    """Policy forward pass; returns (alpha, beta, value, cache)."""
    cfg = config or params.config
    cat_inputs, cat_caches, cat_feats, argmax, pooled_list = [], [], [], [], []
    for e, spec in enumerate(cfg.categories):
        ents = np.asarray(obs.categories.get(spec.name, np.zeros((0, spec.input_dim))),
                          dtype=np.float64)
        if ents.size == 0:
            ents = ents.reshape(0, spec.input_dim)
        if ents.shape[1] != spec.input_dim:
            raise ValueError(f"category {spec.name}: entity dim {ents.shape[1]} != {spec.input_dim}")
        cat_inputs.append(ents)
        if cfg.aggregator == "concat":
            cap = cfg.max_entities[e]
            if ents.shape[0] > cap:
                raise CapacityError(
                    f"category {spec.name}: {ents.shape[0]} entities exceeds capacity {cap}")
            if ents.shape[0] > 0:
                feats, cache = mlp_forward(params.encoders[e], ents)
            else:
                feats, cache = np.zeros((0, spec.feat_dim)), None
            padded = np.zeros(cap * spec.feat_dim)
            padded[: feats.size] = feats.reshape(-1)
            cat_caches.append(cache)
            cat_feats.append(feats)
            argmax.append(None)
            pooled_list.append(padded)
        else:
            if ents.shape[0] > 0:
                feats, cache = mlp_forward(params.encoders[e], ents)
                am = np.argmax(feats, axis=0)  # ties -> lowest entity index
                pooled = feats[am, np.arange(spec.feat_dim)]
            else:
                feats, cache, am = np.zeros((0, spec.feat_dim)), None, None
                pooled = np.zeros(spec.feat_dim)
            cat_caches.append(cache)
            cat_feats.append(feats)
            argmax.append(am)
            pooled_list.append(pooled)
    ego = np.asarray(obs.ego, dtype=np.float64)
    if ego.shape[0] != cfg.ego_dim:
        raise ValueError(f"ego dim {ego.shape[0]} != {cfg.ego_dim}")
    trunk_in = np.concatenate([ego] + pooled_list)
    trunk_out, trunk_cache = mlp_forward(params.trunk, trunk_in)
    raw_alpha = trunk_out @ params.alpha_head.w + params.alpha_head.b
    raw_beta = trunk_out @ params.beta_head.w + params.beta_head.b
    alpha = 1.0 + softplus(raw_alpha)
    beta = 1.0 + softplus(raw_beta)
    value = float((trunk_out @ params.value_head.w + params.value_head.b)[0])
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta)) and np.isfinite(value)):
        raise FloatingPointError("non-finite policy outputs")
    cache = ForwardCache(cat_inputs, cat_caches, cat_feats, argmax,
                         trunk_in, trunk_cache, trunk_out, raw_alpha, raw_beta)
    return alpha, beta, value, cache


# ---------------------------------------------------------------------------
# backward


def zeros_like_params(params: PolicyParams) -> PolicyParams:
    def z_mlp(m):
        return Mlp([Layer(np.zeros_like(l.w), np.zeros_like(l.b), l.act) for l in m.layers])

    def z_layer(l):
        return Layer(np.zeros_like(l.w), np.zeros_like(l.b), l.act)

    return PolicyParams([z_mlp(m) for m in params.encoders], z_mlp(params.trunk),
                        z_layer(params.alpha_head), z_layer(params.beta_head),
                        z_layer(params.value_head), params.config)


def backward(params: PolicyParams, cache: ForwardCache,
             d_alpha: np.ndarray, d_beta: np.ndarray, d_value: float,
             grads: PolicyParams | None = None, config: GeeConfig | None = None) -> PolicyParams:
    """Accumulate exact gradients of a scalar loss given d(loss)/d(alpha, beta, value).

    Max-pool routes gradient only to the arg-max entity per feature dimension
    (ties already broken to the lowest index by the forward pass); shared
    encoders sum gradients over entities.
    """
    if cache is None:
        raise ValueError("backward requires the forward cache")
    cfg = config or params.config
    if grads is None:
        grads = zeros_like_params(params)
    d_raw_a = np.asarray(d_alpha) * sigmoid(cache.raw_alpha)
    d_raw_b = np.asarray(d_beta) * sigmoid(cache.raw_beta)
    t = cache.trunk_out
    grads.alpha_head.w += np.outer(t, d_raw_a)
    grads.alpha_head.b += d_raw_a
    grads.beta_head.w += np.outer(t, d_raw_b)
    grads.beta_head.b += d_raw_b
    grads.value_head.w += d_value * t[:, None]
    grads.value_head.b += np.asarray([d_value])
    d_trunk_out = (d_raw_a @ params.alpha_head.w.T + d_raw_b @ params.beta_head.w.T
                   + d_value * params.value_head.w[:, 0])
    t_grads, d_trunk_in = mlp_backward(params.trunk, cache.trunk_cache, d_trunk_out)
    for layer_grad, (dw, db) in zip(grads.trunk.layers, t_grads):
        layer_grad.w += dw
        layer_grad.b += db
    offset = cfg.ego_dim
    for e, spec in enumerate(cfg.categories):
        width = cfg.pooled_dim(e)
        d_pooled = d_trunk_in[offset: offset + width]
        offset += width
        n = cache.cat_inputs[e].shape[0]
        if n == 0:
            continue
        if cfg.aggregator == "concat":
            d_feats = d_pooled[: n * spec.feat_dim].reshape(n, spec.feat_dim)
        else:
            d_feats = np.zeros((n, spec.feat_dim))
            am = cache.argmax[e]
            d_feats[am, np.arange(spec.feat_dim)] = d_pooled
        e_grads, _ = mlp_backward(params.encoders[e], cache.cat_caches[e], d_feats)
        for layer_grad, (dw, db) in zip(grads.encoders[e].layers, e_grads):
            layer_grad.w += dw
            layer_grad.b += db
    return grads


# ---------------------------------------------------------------------------
# flat parameter vector and checkpoints


def _iter_layers(params: PolicyParams):
    for m in params.encoders:
        yield from m.layers
    yield from params.trunk.layers
    yield params.alpha_head
    yield params.beta_head
    yield params.value_head


def params_to_flat(params: PolicyParams) -> np.ndarray:
    parts = []
    for layer in _iter_layers(params):
        parts.append(layer.w.reshape(-1))
        parts.append(layer.b.reshape(-1))
    return np.concatenate(parts)


def flat_to_params(flat: np.ndarray, template: PolicyParams) -> PolicyParams:
    out = zeros_like_params(template)
    i = 0
    for layer in _iter_layers(out):
        n = layer.w.size
        layer.w[...] = flat[i: i + n].reshape(layer.w.shape)
        i += n
        n = layer.b.size
        layer.b[...] = flat[i: i + n]
        i += n
    if i != flat.size:
        raise ValueError("flat parameter size mismatch")
    return out


def save_checkpoint(path, params: PolicyParams, config: GeeConfig | None = None):
    cfg = config or params.config
    flat = params_to_flat(params)
    digest = bytes.fromhex(cfg.digest())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(digest)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path, config: GeeConfig) -> PolicyParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic")
    version, = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    digest = data[8:40]
    if digest != bytes.fromhex(config.digest()):
        raise ValueError("checkpoint config digest mismatch")
    count, = struct.unpack_from("<Q", data, 40)
    flat = np.frombuffer(data, dtype="<f8", offset=48, count=count).copy()
    rng = np.random.default_rng(0)
    template = init_params(config, rng)
    return flat_to_params(flat, template)


# ---------------------------------------------------------------------------
# Beta distribution


def beta_logprob(alpha, beta, u):
    """Sum of per-dimension Beta log densities at u; u must be interior."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("u must lie strictly inside (0, 1)")
    lp = (alpha - 1.0) * np.log(u) + (beta - 1.0) * np.log1p(-u) - betaln(alpha, beta)
    return float(np.sum(lp))


def beta_logprob_grads(alpha, beta, u):
    """Per-dimension d(logprob)/d(alpha), d(logprob)/d(beta)."""
    psi_ab = digamma(alpha + beta)
    da = np.log(u) - digamma(alpha) + psi_ab
    db = np.log1p(-u) - digamma(beta) + psi_ab
    return da, db


def beta_sample(alpha, beta, rng: np.random.Generator):
    u = rng.beta(alpha, beta)
    return np.clip(u, SAMPLE_EPS, 1.0 - SAMPLE_EPS)


def beta_mean(alpha, beta):
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    return alpha / (alpha + beta)


def beta_entropy(alpha, beta):
    """Sum of per-dimension differential entropies of Beta(alpha, beta)."""
    a = np.asarray(alpha, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    h = betaln(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) \
        + (a + b - 2.0) * digamma(a + b)
    return float(np.sum(h))


def beta_entropy_grads(alpha, beta):
    a = np.asarray(alpha, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    da = -(a - 1.0) * polygamma(1, a) + (a + b - 2.0) * polygamma(1, a + b)
    db = -(b - 1.0) * polygamma(1, b) + (a + b - 2.0) * polygamma(1, a + b)
    return da, db


def scale_action(u, bounds):
    """Map u in (0,1)^A linearly onto the per-dimension action bounds."""
    u = np.asarray(u, dtype=np.float64)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return lo + u * (hi - lo)


def deterministic_action(alpha, beta, bounds):
    return scale_action(beta_mean(alpha, beta), bounds)


# ---------------------------------------------------------------------------
# saliency


def _mlp_jacobian(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Jacobian of a single-sample MLP output w.r.t. its input, (out_dim, in_dim)."""
    out, (acts, pres) = mlp_forward(mlp, x)
    g = np.eye(out.shape[0])
    for i in reversed(range(len(mlp.layers))):
        layer = mlp.layers[i]
        g = g * _act_grad(acts[i + 1], pres[i], layer.act)
        g = g @ layer.w.T
    return g


def saliency(params: PolicyParams, obs: ObservationBundle,
             config: GeeConfig | None = None) -> dict:
    """Per-entity gradient-magnitude attribution of the pooled category feature.

    For each entity: the Frobenius norm of the Jacobian of its category's
    pooled global feature w.r.t. that entity's state vector, normalized per
    category to [0, 1] by the max over entities.
    """
    cfg = config or params.config
    _, _, _, cache = forward(params, obs, cfg)
    result = {}
    for e, spec in enumerate(cfg.categories):
        ents = cache.cat_inputs[e]
        n = ents.shape[0]
        scores = np.zeros(n)
        if n > 0:
            am = cache.argmax[e]
            for ent in range(n):
                if am is None:
                    dims = np.arange(spec.feat_dim)  # concat: entity owns its slice
                else:
                    dims = np.nonzero(am == ent)[0]
                    if dims.size == 0:
                        continue
                jac = _mlp_jacobian(params.encoders[e], ents[ent])
                scores[ent] = np.sqrt(np.sum(jac[dims] ** 2))
            top = scores.max()
            if top > 0.0:
                scores = scores / top
        result[spec.name] = scores
    return result
