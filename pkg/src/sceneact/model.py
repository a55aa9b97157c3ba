"""Actor-scene relation model.

Actor detector features and their box geometry are linearly embedded;
scene grid tokens are embedded and tagged with a fixed sinusoidal
positional code. Three relation architectures share the embedding and
classification head:

* unified      -- one self-attention stack over the concatenation of
                  actor and scene tokens (every token attends to all),
* decoder_only -- actor tokens cross-attend into the raw scene tokens,
* encoder_decoder -- scene tokens are self-encoded first, then actor
                  tokens run self-attention plus cross-attention blocks.

Blocks are pre-norm residual: z = Attn(LN(x)) + x, x' = MLP(LN(z)) + z.
Zeroing every residual-branch output layer (attention output projection
and second MLP layer) makes each stack an exact identity, which is the
initialization sanity check used by the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .boxes import BoundingBox
from .errors import ConfigError, ContractError, DimensionError
from .rng import RngStream

LAYER_NORM_EPS = 1e-5

VARIANTS = ("unified", "decoder_only", "encoder_decoder")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (published defaults)."""

    embed_dim: int = 256
    layers: int = 6
    heads: int = 8
    ffn_dim: int = 1024
    dropout: float = 0.1
    pre_norm: bool = True
    activation: str = "gelu"
    variant: str = "unified"
    num_classes: int = 12

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.activation != "gelu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.pre_norm:
            raise ConfigError("only pre-norm blocks are supported")


@dataclass
class TokenSequence:
    """Concatenated embeddings: first K columns actors, next N scene."""

    tokens: Tensor  # (D, K + N)
    actor_count: int
    scene_count: int


@dataclass
class AttentionParams:
    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter


@dataclass
class BlockParams:
    ln1_gain: Parameter
    ln1_bias: Parameter
    attn: AttentionParams
    ln2_gain: Parameter
    ln2_bias: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter


@dataclass
class DecoderBlockParams:
    ln_self_gain: Parameter
    ln_self_bias: Parameter
    self_attn: AttentionParams
    ln_cross_gain: Parameter
    ln_cross_bias: Parameter
    cross_attn: AttentionParams
    ln_mlp_gain: Parameter
    ln_mlp_bias: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter


@dataclass
class ModelParams:
    """All trainable parameters, registered under unique names."""

    cfg: ModelConfig
    actor_dim: int
    scene_dim: int
    actor_proj: Parameter
    geom_proj: Parameter
    scene_proj: Parameter
    blocks: list = field(default_factory=list)
    scene_blocks: list = field(default_factory=list)
    head_w1: Parameter | None = None
    head_b1: Parameter | None = None
    head_w2: Parameter | None = None
    head_b2: Parameter | None = None
    _registry: dict = field(default_factory=dict)

    def register(self, param: Parameter) -> Parameter:
        if param.name in self._registry:
            raise ContractError(f"duplicate parameter name {param.name!r}")
        self._registry[param.name] = param
        return param

    def parameters(self) -> list[Parameter]:
        return list(self._registry.values())

    def by_name(self, name: str) -> Parameter:
        return self._registry[name]


def _glorot(rng: RngStream, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.generator().uniform(-limit, limit, size=(out_dim, in_dim))


def init_params(
    cfg: ModelConfig, actor_dim: int, scene_dim: int, rng: RngStream
) -> ModelParams:
    """Variance-preserving uniform init for projections; LN gain 1, biases 0."""
    d = cfg.embed_dim

    made: dict[str, Parameter] = {}

    def make(name: str, data) -> Parameter:
        p = Parameter(name, data)
        made[name] = p
        return p

    def linear(name: str, out_dim: int, in_dim: int) -> tuple[Parameter, Parameter]:
        w = make(f"{name}.w", _glorot(rng.child_named(name), out_dim, in_dim))
        b = make(f"{name}.b", np.zeros(out_dim))
        return w, b

    def attention(prefix: str) -> AttentionParams:
        wq, bq = linear(f"{prefix}.q", d, d)
        wk, bk = linear(f"{prefix}.k", d, d)
        wv, bv = linear(f"{prefix}.v", d, d)
        wo, bo = linear(f"{prefix}.out", d, d)
        return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo)

    def norm(name: str) -> tuple[Parameter, Parameter]:
        return make(f"{name}.gain", np.ones(d)), make(f"{name}.bias", np.zeros(d))

    def block(prefix: str) -> BlockParams:
        g1, b1n = norm(f"{prefix}.ln1")
        attn = attention(f"{prefix}.attn")
        g2, b2n = norm(f"{prefix}.ln2")
        w1, b1 = linear(f"{prefix}.mlp.fc1", cfg.ffn_dim, d)
        w2, b2 = linear(f"{prefix}.mlp.fc2", d, cfg.ffn_dim)
        return BlockParams(g1, b1n, attn, g2, b2n, w1, b1, w2, b2)

    def decoder_block(prefix: str) -> DecoderBlockParams:
        gs, bs = norm(f"{prefix}.ln_self")
        sa = attention(f"{prefix}.self")
        gc, bc = norm(f"{prefix}.ln_cross")
        ca = attention(f"{prefix}.cross")
        gm, bm = norm(f"{prefix}.ln_mlp")
        w1, b1 = linear(f"{prefix}.mlp.fc1", cfg.ffn_dim, d)
        w2, b2 = linear(f"{prefix}.mlp.fc2", d, cfg.ffn_dim)
        return DecoderBlockParams(gs, bs, sa, gc, bc, ca, gm, bm, w1, b1, w2, b2)

    actor_proj = make("embed.actor", _glorot(rng.child_named("embed.actor"), d, actor_dim))
    geom_proj = make("embed.geom", _glorot(rng.child_named("embed.geom"), d, 6))
    scene_proj = make("embed.scene", _glorot(rng.child_named("embed.scene"), d, scene_dim))

    params = ModelParams(cfg, actor_dim, scene_dim, actor_proj, geom_proj, scene_proj)

    if cfg.variant == "unified":
        params.blocks = [block(f"enc{l}") for l in range(cfg.layers)]
    elif cfg.variant == "decoder_only":
        params.blocks = [block(f"dec{l}") for l in range(cfg.layers)]
    else:
        params.scene_blocks = [block(f"scene{l}") for l in range(cfg.layers)]
        params.blocks = [decoder_block(f"dec{l}") for l in range(cfg.layers)]

    params.head_w1, params.head_b1 = linear("head.fc1", d, d)
    params.head_w2, params.head_b2 = linear("head.fc2", cfg.num_classes, d)

    for name in made:
        params.register(made[name])
    return params


def zero_residual_projections(params: ModelParams):
    """Zero every residual-branch output layer; the stacks become identities."""

    def zero(p: Parameter):
        p.assign(np.zeros(p.shape))

    for blk in params.blocks + params.scene_blocks:
        if isinstance(blk, DecoderBlockParams):
            attns = [blk.self_attn, blk.cross_attn]
        else:
            attns = [blk.attn]
        for attn in attns:
            zero(attn.wo)
            zero(attn.bo)
        zero(blk.w2)
        zero(blk.b2)


# ---------------------------------------------------------------------------
# embeddings


def sinusoidal_pe(n: int, d: int) -> np.ndarray:
    """(d, n) positional code: channel pairs (sin, cos) at geometric frequencies."""
    if d % 2 != 0:
        raise ConfigError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(n)
    freq = np.power(10000.0, -np.arange(d // 2) * 2.0 / d)
    angles = np.outer(freq, pos)  # (d/2, n)
    pe = np.empty((d, n))
    pe[0::2] = np.sin(angles)
    pe[1::2] = np.cos(angles)
    return pe


def embed_actors(proposals, params: ModelParams) -> Tensor:
    """Columns E_a f + E_g g for each proposal, in the given order."""
    c = params.actor_dim
    feats = []
    geoms = []
    for p in proposals:
        f = np.asarray(p.feature, dtype=np.float64)
        if f.shape != (c,):
            raise DimensionError(f"actor feature shape {f.shape}, expected ({c},)")
        feats.append(f)
        geoms.append(p.geometry.as_list())
    f_a = Tensor(np.stack(feats, axis=1))  # (C, K)
    g = Tensor(np.array(geoms).T)  # (6, K)
    return ad.add(ad.matmul(params.actor_proj.value, f_a), ad.matmul(params.geom_proj.value, g))


def embed_scene(grid, params: ModelParams) -> Tensor:
    """Project flattened grid tokens and add the positional code."""
    f_v = np.asarray(grid.features, dtype=np.float64)
    if f_v.shape[0] != params.scene_dim:
        raise DimensionError(
            f"scene token length {f_v.shape[0]}, expected {params.scene_dim}"
        )
    proj = ad.matmul(params.scene_proj.value, Tensor(f_v))
    pe = Tensor(sinusoidal_pe(f_v.shape[1], params.cfg.embed_dim))
    return ad.add(proj, pe)


# ---------------------------------------------------------------------------
# attention stacks (row-token layout internally: (tokens, D))


def _linear_rows(x: Tensor, w: Parameter, b: Parameter) -> Tensor:
    return ad.add_rowvec(ad.matmul(x, ad.transpose(w.value)), b.value)


def _mha(
    q_rows: Tensor,
    kv_rows: Tensor,
    attn: AttentionParams,
    cfg: ModelConfig,
    rng: RngStream,
    training: bool,
    sink: list | None,
    layer: int,
) -> Tensor:
    d = cfg.embed_dim
    dh = d // cfg.heads
    q = _linear_rows(q_rows, attn.wq, attn.bq)
    k = _linear_rows(kv_rows, attn.wk, attn.bk)
    v = _linear_rows(kv_rows, attn.wv, attn.bv)
    outs = []
    inv_sqrt = 1.0 / np.sqrt(dh)
    for h in range(cfg.heads):
        qh = ad.narrow(q, 1, h * dh, (h + 1) * dh)
        kh = ad.narrow(k, 1, h * dh, (h + 1) * dh)
        vh = ad.narrow(v, 1, h * dh, (h + 1) * dh)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt)
        weights = ad.softmax(scores, axis=-1)
        if sink is not None:
            sink.append((layer, h, weights.data.copy()))
        weights = ad.dropout(weights, cfg.dropout, rng.child(0, h), training)
        outs.append(ad.matmul(weights, vh))
    merged = ad.concat(outs, axis=1)
    out = _linear_rows(merged, attn.wo, attn.bo)
    return ad.dropout(out, cfg.dropout, rng.child(1), training)


def _mlp(x: Tensor, blk, cfg: ModelConfig, rng: RngStream, training: bool) -> Tensor:
    h = ad.gelu(_linear_rows(x, blk.w1, blk.b1))
    out = _linear_rows(h, blk.w2, blk.b2)
    return ad.dropout(out, cfg.dropout, rng.child(2), training)


def _encoder_block(
    x: Tensor,
    blk: BlockParams,
    cfg: ModelConfig,
    rng: RngStream,
    training: bool,
    sink: list | None,
    layer: int,
    kv: Tensor | None = None,
) -> Tensor:
    """Pre-norm residual block; with ``kv`` the attention is cross-attention."""
    normed = ad.layer_norm(x, blk.ln1_gain.value, blk.ln1_bias.value, LAYER_NORM_EPS)
    if kv is None:
        kv_normed = normed
    else:
        kv_normed = ad.layer_norm(kv, blk.ln1_gain.value, blk.ln1_bias.value, LAYER_NORM_EPS)
    z = ad.add(x, _mha(normed, kv_normed, blk.attn, cfg, rng, training, sink, layer))
    z_normed = ad.layer_norm(z, blk.ln2_gain.value, blk.ln2_bias.value, LAYER_NORM_EPS)
    return ad.add(z, _mlp(z_normed, blk, cfg, rng, training))


def _decoder_block(
    x: Tensor,
    memory: Tensor,
    blk: DecoderBlockParams,
    cfg: ModelConfig,
    rng: RngStream,
    training: bool,
    sink: list | None,
    layer: int,
) -> Tensor:
    normed = ad.layer_norm(x, blk.ln_self_gain.value, blk.ln_self_bias.value, LAYER_NORM_EPS)
    z = ad.add(x, _mha(normed, normed, blk.self_attn, cfg, rng.child(10), training, None, layer))
    zn = ad.layer_norm(z, blk.ln_cross_gain.value, blk.ln_cross_bias.value, LAYER_NORM_EPS)
    mem = ad.layer_norm(memory, blk.ln_cross_gain.value, blk.ln_cross_bias.value, LAYER_NORM_EPS)
    z2 = ad.add(z, _mha(zn, mem, blk.cross_attn, cfg, rng.child(11), training, sink, layer))
    z2n = ad.layer_norm(z2, blk.ln_mlp_gain.value, blk.ln_mlp_bias.value, LAYER_NORM_EPS)
    return ad.add(z2, _mlp(z2n, blk, cfg, rng.child(12), training))


def encode(
    seq: TokenSequence,
    params: ModelParams,
    cfg: ModelConfig,
    rng: RngStream,
    training: bool = False,
    attn_sink: list | None = None,
) -> TokenSequence:
    """Run the unified stack over all K + N tokens."""
    if cfg.variant != "unified":
        raise ContractError(f"encode handles the unified variant, not {cfg.variant!r}")
    x = ad.transpose(seq.tokens)  # (K+N, D)
    for l, blk in enumerate(params.blocks):
        x = _encoder_block(x, blk, cfg, rng.child(l), training, attn_sink, l)
    return TokenSequence(ad.transpose(x), seq.actor_count, seq.scene_count)


def encode_variant(
    actor_tokens: Tensor,
    scene_tokens: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    rng: RngStream,
    training: bool = False,
    attn_sink: list | None = None,
) -> Tensor:
    """Run a non-unified stack; returns the refined actor tokens (D, K)."""
    if cfg.variant == "unified":
        raise ContractError("unified variant is handled by encode()")
    a = ad.transpose(actor_tokens)
    s = ad.transpose(scene_tokens)
    if cfg.variant == "decoder_only":
        for l, blk in enumerate(params.blocks):
            a = _encoder_block(a, blk, cfg, rng.child(l), training, attn_sink, l, kv=s)
    else:
        for l, blk in enumerate(params.scene_blocks):
            s = _encoder_block(s, blk, cfg, rng.child(100 + l), training, None, l)
        for l, blk in enumerate(params.blocks):
            a = _decoder_block(a, s, blk, cfg, rng.child(l), training, attn_sink, l)
    return ad.transpose(a)


def classify(actor_tokens: Tensor, params: ModelParams) -> Tensor:
    """Two-layer perceptron per actor token; returns (num_classes, K) logits."""
    x = ad.transpose(actor_tokens)  # (K, D)
    h = ad.gelu(_linear_rows(x, params.head_w1, params.head_b1))
    logits = _linear_rows(h, params.head_w2, params.head_b2)
    return ad.transpose(logits)


# ---------------------------------------------------------------------------
# predictions


@dataclass
class PredictionSet:
    """Per-proposal outputs; boxes and person scores pass through the detector."""

    boxes: list[BoundingBox]
    person_scores: np.ndarray  # (K,)
    action_logits: np.ndarray  # (num_classes, K)

    def __post_init__(self):
        self.person_scores = np.asarray(self.person_scores, dtype=np.float64)
        self.action_logits = np.asarray(self.action_logits, dtype=np.float64)
        if self.action_logits.shape[1] != len(self.boxes):
            raise ContractError("logit columns must match the number of boxes")

    @property
    def action_scores(self) -> np.ndarray:
        return ad._sigmoid(self.action_logits)

    @property
    def count(self) -> int:
        return len(self.boxes)

    def confidence(self) -> np.ndarray:
        """Person score times the best action score, per proposal."""
        return self.person_scores * self.action_scores.max(axis=0)


def select_final(pred: PredictionSet, k_prime: int) -> PredictionSet:
    """Keep the k' most confident proposals; ties keep the lower index."""
    if k_prime <= 0:
        raise ConfigError(f"k_prime must be positive, got {k_prime}")
    if k_prime > pred.count:
        raise ContractError(f"k_prime {k_prime} exceeds proposal count {pred.count}")
    conf = pred.confidence()
    order = sorted(range(pred.count), key=lambda i: (-conf[i], i))[:k_prime]
    order.sort()
    return PredictionSet(
        [pred.boxes[i] for i in order],
        pred.person_scores[order],
        pred.action_logits[:, order],
    )


def forward_actions(
    params: ModelParams,
    cfg: ModelConfig,
    proposals,
    grid,
    rng: RngStream,
    training: bool = False,
    attn_sink: list | None = None,
) -> Tensor:
    """Embed, relate and classify; returns (num_classes, K) logits on the tape.

    ``grid`` may be None to run on actor tokens alone (scene-blind
    ablation); the unified stack then sees only the K actor columns.
    """
    a = embed_actors(proposals, params)
    v = embed_scene(grid, params) if grid is not None else None
    if cfg.variant == "unified":
        if v is None:
            seq = TokenSequence(a, len(proposals), 0)
        else:
            seq = TokenSequence(ad.concat([a, v], axis=1), len(proposals), v.shape[1])
        encoded = encode(seq, params, cfg, rng, training, attn_sink)
        actors = ad.narrow(encoded.tokens, 1, 0, seq.actor_count)
    else:
        if v is None:
            raise ContractError("non-unified variants require scene tokens")
        actors = encode_variant(a, v, params, cfg, rng, training, attn_sink)
    return classify(actors, params)


def predictions_from_logits(proposals, logits: np.ndarray) -> PredictionSet:
    return PredictionSet(
        [p.box for p in proposals],
        np.array([p.person_score for p in proposals]),
        np.asarray(logits, dtype=np.float64),
    )
