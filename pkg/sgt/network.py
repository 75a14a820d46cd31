"""
Soft Graph Transformer

tokens are embedded by two independent FFNs, sinusoidal positions are added,
then every layer runs (full-sgt variant)

    sym <- sym + SelfAttn(LN(sym))
    lin <- lin + SelfAttn(LN(lin))
    sym <- sym + CrossAttn(LN(sym), LN(lin))      constraint -> symbol messages
    sym <- sym + FFN(LN(sym)),  lin <- lin + FFN(LN(lin))

and a final FFN + sigmoid maps the symbol stream to soft bits P(bit = 0).

ablation variants
    no-cross-attention: encoder over the constraint tokens only, a learned
                        [2N_t, 2N_r] map compresses them onto the symbol positions
    qr-baseline:        encoder over QR-preprocessed tokens (one per transmit dimension)
"""
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .baselines import DetectorOutput
from .channel import MimoInstance
from .tensor import (
    DimensionError,
    NonFiniteError,
    Tensor,
    add,
    concat_cols,
    gelu,
    layer_norm,
    mac_scope,
    matmul,
    scale,
    sigmoid,
    slice_cols,
    softmax_rows,
    transpose,
)
from .tokenizer import TokenSet, prob_to_bits, prob_to_llr, tokenize, tokenize_qr

VARIANTS = ("full-sgt", "no-cross-attention", "qr-baseline")

CHECKPOINT_FORMAT = "sgt-checkpoint"
CHECKPOINT_VERSION = 1

# (sublayer label, heads index, attention weights [queries, keys])
AttentionHook = Callable[[str, int, np.ndarray], None]


class CheckpointError(ValueError):
    pass


@dataclass
class SgtConfig:
    n_t: int
    n_r: int
    bits_per_dim: int = 1
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 0  # 0 picks d_model // 16
    ffn_hidden: int = 0  # 0 picks 2 * d_model
    variant: str = "full-sgt"
    weight_sharing: bool = False
    bidirectional_cross: bool = False
    positional_encoding: bool = True
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_heads == 0:
            self.n_heads = max(1, self.d_model // 16)
        if self.ffn_hidden == 0:
            self.ffn_hidden = 2 * self.d_model
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if min(self.n_t, self.n_r, self.bits_per_dim, self.d_model, self.n_layers) < 1:
            raise ValueError("dimensions and layer count must be positive")
        if self.init_seed < 0:
            raise ValueError(f"init_seed must be non-negative, got {self.init_seed}")

    @property
    def n_sym(self) -> int:
        return 2 * self.n_t

    @property
    def n_lin(self) -> int:
        return 2 * self.n_t if self.variant == "qr-baseline" else 2 * self.n_r

    @property
    def lin_width(self) -> int:
        return 2 * self.n_t + 2

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SgtConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...], name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Linear:
    def __init__(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, fan_in, (fan_in, fan_out), f"{name}.weight")
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, name: str, width: int):
        self.gamma = Tensor(np.ones(width), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(width), requires_grad=True, name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    def parameters(self) -> List[Tensor]:
        return [self.gamma, self.beta]


class FeedForward:
    """Linear -> GELU -> Linear"""

    def __init__(self, name: str, fan_in: int, hidden: int, fan_out: int, rng: np.random.Generator):
        self.inner = Linear(f"{name}.inner", fan_in, hidden, rng)
        self.outer = Linear(f"{name}.outer", hidden, fan_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(gelu(self.inner(x)))

    def parameters(self) -> List[Tensor]:
        return self.inner.parameters() + self.outer.parameters()


class AttentionBlock:
    """
    bias-free multi-head projections W_Q, W_K, W_V, W_O with pre-norms for queries and keys/values.
    self-attention normalizes once and uses norm_q for both sides
    """

    def __init__(self, name: str, d_model: int, n_heads: int, rng: np.random.Generator, cross: bool = False):
        self.n_heads = n_heads
        self.w_q = _uniform(rng, d_model, (d_model, d_model), f"{name}.w_q")
        self.w_k = _uniform(rng, d_model, (d_model, d_model), f"{name}.w_k")
        self.w_v = _uniform(rng, d_model, (d_model, d_model), f"{name}.w_v")
        self.w_o = _uniform(rng, d_model, (d_model, d_model), f"{name}.w_o")
        self.norm_q = LayerNorm(f"{name}.norm_q", d_model)
        self.norm_kv: Optional[LayerNorm] = LayerNorm(f"{name}.norm_kv", d_model) if cross else None

    def parameters(self) -> List[Tensor]:
        params = [self.w_q, self.w_k, self.w_v, self.w_o] + self.norm_q.parameters()
        if self.norm_kv is not None:
            params += self.norm_kv.parameters()
        return params


class ResidualFFN:
    def __init__(self, name: str, d_model: int, hidden: int, rng: np.random.Generator):
        self.norm = LayerNorm(f"{name}.norm", d_model)
        self.ffn = FeedForward(name, d_model, hidden, d_model, rng)

    def parameters(self) -> List[Tensor]:
        return self.norm.parameters() + self.ffn.parameters()


class SgtLayer:
    def __init__(self, name: str, config: SgtConfig, rng: np.random.Generator):
        d, h, f = config.d_model, config.n_heads, config.ffn_hidden
        self.sym_self: Optional[AttentionBlock] = None
        self.cross: Optional[AttentionBlock] = None
        self.lin_cross: Optional[AttentionBlock] = None
        self.ffn_sym: Optional[ResidualFFN] = None

        if config.variant == "full-sgt":
            self.sym_self = AttentionBlock(f"{name}.sym_self", d, h, rng)
        self.lin_self = AttentionBlock(f"{name}.lin_self", d, h, rng)
        if config.variant == "full-sgt":
            self.cross = AttentionBlock(f"{name}.cross", d, h, rng, cross=True)
            if config.bidirectional_cross:
                self.lin_cross = AttentionBlock(f"{name}.lin_cross", d, h, rng, cross=True)
            self.ffn_sym = ResidualFFN(f"{name}.ffn_sym", d, f, rng)
        self.ffn_lin = ResidualFFN(f"{name}.ffn_lin", d, f, rng)

    def parameters(self) -> List[Tensor]:
        blocks = [self.sym_self, self.lin_self, self.cross, self.lin_cross, self.ffn_sym, self.ffn_lin]
        return [p for b in blocks if b is not None for p in b.parameters()]


def sinusoidal_encoding(n_tokens: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_tokens)[:, None]
    freq = np.exp(-math.log(10000.0) * (2 * (np.arange(d_model) // 2)) / d_model)[None, :]
    angles = pos * freq
    return np.where(np.arange(d_model) % 2 == 0, np.sin(angles), np.cos(angles))


class SgtModel:
    def __init__(self, config: SgtConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.init_seed)
        d = config.d_model

        self.sym_embed = FeedForward("sym_embed", config.bits_per_dim, d, d, rng)
        self.lin_embed = FeedForward("lin_embed", config.lin_width, d, d, rng)
        # separate tables per token sequence
        self.pe_sym = Tensor(sinusoidal_encoding(config.n_sym, d))
        self.pe_lin = Tensor(sinusoidal_encoding(config.n_lin, d))

        n_blocks = 1 if config.weight_sharing else config.n_layers
        self.layers = [SgtLayer(f"layers.{i}", config, rng) for i in range(n_blocks)]

        self.compress: Optional[Tensor] = None
        if config.variant == "no-cross-attention":
            self.compress = _uniform(rng, config.n_lin, (config.n_sym, config.n_lin), "compress")

        self.final_norm = LayerNorm("final_norm", d)
        self.head = FeedForward("head", d, d, config.bits_per_dim, rng)

        # called with every attention weight matrix during forward, for instrumentation
        self.attention_hook: Optional[AttentionHook] = None
        # set once an optimizer step has touched the parameters, kept in checkpoints
        self.trained = False

    def layer(self, index: int) -> SgtLayer:
        return self.layers[0 if self.config.weight_sharing else index]

    def parameters(self) -> Dict[str, Tensor]:
        params = self.sym_embed.parameters() + self.lin_embed.parameters()
        for layer in self.layers:
            params += layer.parameters()
        if self.compress is not None:
            params.append(self.compress)
        params += self.final_norm.parameters() + self.head.parameters()
        return {p.name: p for p in params}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise CheckpointError(f"parameter names do not match, missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f"{name}: shape {list(state[name].shape)} does not match {list(p.shape)}")
            p.data[...] = state[name]

    def copy(self) -> "SgtModel":
        clone = SgtModel(replace(self.config))
        clone.load_state_dict(self.state_dict())
        clone.trained = self.trained
        return clone


def _multi_head(q_in: Tensor, kv_in: Tensor, block: AttentionBlock, label: str, hook: Optional[AttentionHook]):
    d_model = block.w_q.shape[0]
    d_k = d_model // block.n_heads

    with mac_scope(f"{label}.projection"):
        q = matmul(q_in, block.w_q)
        k = matmul(kv_in, block.w_k)
        v = matmul(kv_in, block.w_v)

    heads = []
    for h in range(block.n_heads):
        lo, hi = h * d_k, (h + 1) * d_k
        with mac_scope(f"{label}.score"):
            scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), 1.0 / math.sqrt(d_k))
        weights = softmax_rows(scores)
        if hook is not None:
            hook(label, h, weights.data)
        with mac_scope(f"{label}.mix"):
            heads.append(matmul(weights, slice_cols(v, lo, hi)))

    mixed = heads[0] if len(heads) == 1 else concat_cols(heads)
    with mac_scope(f"{label}.projection"):
        return matmul(mixed, block.w_o)


def self_attention(
    t: Tensor, block: AttentionBlock, label: str = "self", hook: Optional[AttentionHook] = None
) -> Tensor:
    """t + MHA(LN(t), LN(t))"""
    normed = block.norm_q(t)
    return add(t, _multi_head(normed, normed, block, label, hook))


def cross_attention(
    queries: Tensor,
    keys_values: Tensor,
    block: AttentionBlock,
    label: str = "cross",
    hook: Optional[AttentionHook] = None,
) -> Tensor:
    """queries + MHA(LN(queries), LN(keys_values)), keys_values are left untouched"""
    if queries.shape[1] != keys_values.shape[1]:
        raise DimensionError(f"cross_attention: widths {list(queries.shape)} and {list(keys_values.shape)} differ")
    norm_kv = block.norm_kv if block.norm_kv is not None else block.norm_q
    return add(queries, _multi_head(block.norm_q(queries), norm_kv(keys_values), block, label, hook))


def feed_forward(t: Tensor, block: ResidualFFN, label: str = "ffn") -> Tensor:
    with mac_scope(f"{label}.ffn"):
        return add(t, block.ffn(block.norm(t)))


def embed(tokens: TokenSet, model: SgtModel) -> Tuple[Tensor, Tensor]:
    cfg = model.config
    if tokens.sym.shape != (cfg.n_sym, cfg.bits_per_dim):
        expected = [cfg.n_sym, cfg.bits_per_dim]
        raise DimensionError(f"symbol tokens {list(tokens.sym.shape)} do not fit model {expected}")
    if tokens.lin.shape != (cfg.n_lin, cfg.lin_width):
        expected = [cfg.n_lin, cfg.lin_width]
        raise DimensionError(f"constraint tokens {list(tokens.lin.shape)} do not fit model {expected}")

    with mac_scope("embed_sym.ffn"):
        sym = model.sym_embed(Tensor(tokens.sym))
    with mac_scope("embed_lin.ffn"):
        lin = model.lin_embed(Tensor(tokens.lin))

    if cfg.positional_encoding:
        sym = add(sym, model.pe_sym)
        lin = add(lin, model.pe_lin)
    return sym, lin


def _tokens_for(model: SgtModel, inst: MimoInstance, priors: Optional[np.ndarray]) -> TokenSet:
    if model.config.variant == "qr-baseline":
        return tokenize_qr(inst, priors)
    return tokenize(inst, priors)


def _run_layer(model: SgtModel, layer: SgtLayer, sym: Tensor, lin: Tensor) -> Tuple[Tensor, Tensor]:
    hook = model.attention_hook
    if layer.sym_self is not None:
        sym = self_attention(sym, layer.sym_self, "sym_self", hook)
    lin = self_attention(lin, layer.lin_self, "lin_self", hook)

    if layer.cross is not None:
        updated = cross_attention(sym, lin, layer.cross, "cross", hook)
        if layer.lin_cross is not None:
            lin = cross_attention(lin, sym, layer.lin_cross, "lin_cross", hook)
        sym = updated

    if layer.ffn_sym is not None:
        sym = feed_forward(sym, layer.ffn_sym, "ffn_sym")
    lin = feed_forward(lin, layer.ffn_lin, "ffn_lin")
    return sym, lin


def forward(source: Union[MimoInstance, TokenSet], model: SgtModel, priors: Optional[np.ndarray] = None) -> Tensor:
    """soft bits P(bit = 0) of shape [2N_t, N_bits/2]"""
    cfg = model.config
    tokens = source if isinstance(source, TokenSet) else _tokens_for(model, source, priors)

    try:
        sym, lin = embed(tokens, model)
    except NonFiniteError as e:
        raise NonFiniteError(f"embedding: {e}") from e

    for index in range(cfg.n_layers):
        try:
            sym, lin = _run_layer(model, model.layer(index), sym, lin)
        except NonFiniteError as e:
            raise NonFiniteError(f"layer {index}: {e}") from e

    try:
        if model.compress is not None:
            with mac_scope("compress.mix"):
                sym = add(matmul(model.compress, lin), sym)
        elif cfg.variant == "qr-baseline":
            sym = add(lin, sym)

        with mac_scope("head.ffn"):
            return sigmoid(model.head(model.final_norm(sym)))
    except NonFiniteError as e:
        raise NonFiniteError(f"output head: {e}") from e


def _require_trained(model: SgtModel, allow_untrained: bool) -> None:
    if not (model.trained or allow_untrained):
        raise ValueError(f"{model.config.variant} model is untrained, pass allow_untrained=True to detect with it")


def detect_soft(
    inst: MimoInstance, model: SgtModel, priors: Optional[np.ndarray] = None, allow_untrained: bool = False
) -> np.ndarray:
    """posterior LLRs log P(bit=0)/P(bit=1), [2N_t, N_bits/2]"""
    _require_trained(model, allow_untrained)
    return prob_to_llr(forward(inst, model, priors).data)


class SgtDetector:
    def __init__(self, model: SgtModel, name: str = "", allow_untrained: bool = False):
        _require_trained(model, allow_untrained)
        self.model = model
        self.name = name or ("sgt" if model.config.variant == "full-sgt" else model.config.variant)

    def detect(self, inst: MimoInstance, priors: Optional[np.ndarray] = None) -> DetectorOutput:
        prob = forward(inst, self.model, priors).data
        return DetectorOutput(bits=prob_to_bits(prob), llrs=prob_to_llr(prob))


def save_checkpoint(model: SgtModel, path: str) -> None:
    """
    zip of .npy members readable by numpy.load: __meta__ holds the JSON header
    (format, version, config, trained), every parameter is stored little-endian float64.
    member timestamps are fixed so identical models give identical bytes
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "trained": model.trained,
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    arrays.update({name: p.data.astype("<f8") for name, p in model.parameters().items()})

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, array in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, array, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path: str, n_t: Optional[int] = None, n_r: Optional[int] = None) -> SgtModel:
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise CheckpointError(f"{path} is not a model checkpoint")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
        state = {name: archive[name].astype(np.float64) for name in archive.files if name != "__meta__"}

    config = SgtConfig.from_dict(meta["config"])
    if (n_t is not None and n_t != config.n_t) or (n_r is not None and n_r != config.n_r):
        raise CheckpointError(f"{path} was trained for {config.n_t}x{config.n_r}, expected {n_t}x{n_r}")

    model = SgtModel(config)
    model.load_state_dict(state)
    model.trained = bool(meta.get("trained", False))
    return model
