"""A small decoder-only transformer with Llama-shaped blocks (pre-RMSNorm,
rotary attention, gated MLP, untied head), whose softmax attention layers can
be swapped for hybrid linear + sliding-window layers, plus LoRA adapters and a
byte-level tokenizer.

Parameter count closed form (asserted in tests):

    vocab*D + M*(4*D^2 + 3*D*Dh + 2*D) + D + D*vocab

with D = n_heads * head_dim and Dh = round(mlp_hidden_mult * D).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (
    HybridAttnConfig,
    HybridDecodeState,
    apply_rope,
    hybrid_attention_prefill,
    hybrid_attention_weights,
    make_hybrid_config,
    softmax_attention,
    terraced_prefill_chunked,
)
from .errors import (
    AdaptersMissing,
    AlreadyConverted,
    DuplicateAdapter,
    InvalidConfig,
    NotConverted,
    PromptTooLong,
    UnknownId,
)
from .tensor import Tensor

RMS_EPS = 1e-6

BOS_ID = 256
EOS_ID = 257


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


@dataclass
class ModelConfig:
    vocab_size: int = 258
    n_layers: int = 2
    n_heads: int = 2
    head_dim: int = 16
    mlp_hidden_mult: float = 4.0
    max_seq_len: int = 512
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise InvalidConfig("n_layers must be >= 1")
        if self.vocab_size < 2:
            raise InvalidConfig("vocab_size must be >= 2")
        if self.n_heads < 1 or self.head_dim < 2 or self.head_dim % 2:
            raise InvalidConfig("need n_heads >= 1 and an even head_dim >= 2")
        if self.max_seq_len < 1:
            raise InvalidConfig("max_seq_len must be >= 1")

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_hidden_mult * self.model_dim))

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "mlp_hidden_mult": self.mlp_hidden_mult,
            "max_seq_len": self.max_seq_len,
            "rope_base": self.rope_base,
            "seed": self.seed,
        }


@dataclass
class HybridSpec:
    """Static description of the hybrid layers created by convert_model."""

    window_size: int = 8
    window_mode: str = "terraced"
    feature_kind: str = "hedgehog"
    feature_dim: int | None = None
    gamma_init: float = 1.0

    def to_dict(self) -> dict:
        return {
            "window_size": self.window_size,
            "window_mode": self.window_mode,
            "feature_kind": self.feature_kind,
            "feature_dim": self.feature_dim,
            "gamma_init": self.gamma_init,
        }


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    """Low-rank delta (alpha/rank) * B A attached to one base projection.

    B starts at zero, so attaching is an exact identity transformation until
    the first optimizer update.
    """

    a: Tensor  # [rank, in_dim]
    b: Tensor  # [out_dim, rank]
    rank: int
    alpha: float
    target: str

    def delta(self, x: Tensor) -> Tensor:
        scale = self.alpha / self.rank
        return T.matmul(T.matmul(x, T.swapaxes(self.a, 0, 1)), T.swapaxes(self.b, 0, 1)) * scale

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{self.target}.lora_a", self.a), (f"{self.target}.lora_b", self.b)]


def lora_forward(adapter: LoraAdapter, base_weight: Tensor, x: Tensor) -> Tensor:
    """y = x W + (alpha/r) (x A^T) B^T."""
    return T.matmul(x, base_weight) + adapter.delta(x)


class Projection:
    """x @ W with an optional LoRA adapter."""

    def __init__(self, weight: Tensor, name: str):
        self.weight = weight
        self.name = name
        self.adapter: LoraAdapter | None = None

    def forward(self, x: Tensor) -> Tensor:
        if self.adapter is None:
            return T.matmul(x, self.weight)
        return lora_forward(self.adapter, self.weight, x)


class RMSNorm:
    def __init__(self, gain: Tensor, name: str):
        self.gain = gain
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        scale = T.power((x * x).mean(-1, keepdims=True) + RMS_EPS, -0.5)
        return x * scale * self.gain


class AttentionLayer:
    """Multi-head attention over the residual stream. Starts as causal softmax
    attention; convert_model attaches a HybridAttnConfig that reroutes forward
    through the hybrid path while keeping the frozen softmax path available for
    teacher forcing."""

    def __init__(self, wq, wk, wv, wo, n_heads: int, head_dim: int, rope_base: float):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.rope_base = rope_base
        self.hybrid_cfg: HybridAttnConfig | None = None

    @property
    def kind(self) -> str:
        return "softmax" if self.hybrid_cfg is None else "hybrid"

    def project_qkv(self, x: Tensor, start_pos: int = 0):
        """x [b, l, D] -> rotary q, k and plain v as [b, h, l, d]."""
        b, l, _ = x.shape

        def split(t):
            return T.swapaxes(t.reshape(b, l, self.n_heads, self.head_dim), 1, 2)

        q = split(self.wq.forward(x))
        k = split(self.wk.forward(x))
        v = split(self.wv.forward(x))
        q = apply_rope(q, start_pos, self.rope_base)
        k = apply_rope(k, start_pos, self.rope_base)
        return q, k, v

    def merge_heads(self, y: Tensor) -> Tensor:
        b, h, l, d = y.shape
        return T.swapaxes(y, 1, 2).reshape(b, l, h * d)

    def heads_softmax(self, q, k, v, return_weights: bool = False):
        return softmax_attention(q, k, v, return_weights=return_weights)

    def heads_hybrid(self, q, k, v) -> Tensor:
        cfg = self.hybrid_cfg
        if cfg.window_mode == "terraced":
            return terraced_prefill_chunked(q, k, v, cfg)
        return hybrid_attention_prefill(q, k, v, cfg)

    def forward(self, x_normed: Tensor, start_pos: int = 0) -> Tensor:
        q, k, v = self.project_qkv(x_normed, start_pos)
        if self.hybrid_cfg is None:
            y, _ = self.heads_softmax(q, k, v)
        else:
            y = self.heads_hybrid(q, k, v)
        return self.wo.forward(self.merge_heads(y))


class Mlp:
    """Gated (SwiGLU-style) MLP: down(silu(gate(x)) * up(x))."""

    def __init__(self, gate: Projection, up: Projection, down: Projection):
        self.gate, self.up, self.down = gate, up, down

    def forward(self, x: Tensor) -> Tensor:
        g = self.gate.forward(x)
        return self.down.forward(g * T.sigmoid(g) * self.up.forward(x))


class Block:
    def __init__(self, norm1: RMSNorm, attn: AttentionLayer, norm2: RMSNorm, mlp: Mlp):
        self.norm1, self.attn, self.norm2, self.mlp = norm1, attn, norm2, mlp

    def forward(self, x: Tensor, start_pos: int = 0) -> Tensor:
        x = x + self.attn.forward(self.norm1.forward(x), start_pos)
        return x + self.mlp.forward(self.norm2.forward(x))


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


class Model:
    def __init__(self, config: ModelConfig, embed: Tensor, blocks: list[Block], final_norm: RMSNorm, head: Tensor):
        self.config = config
        self.embed = embed
        self.blocks = blocks
        self.final_norm = final_norm
        self.head = head
        self.hybrid_spec: HybridSpec | None = None
        self.lora_meta: dict | None = None  # {"rank", "alpha", "targets"}

    # -- parameter registry ------------------------------------------------

    @property
    def converted(self) -> bool:
        return self.blocks[0].attn.hybrid_cfg is not None

    def parameters(self) -> dict[str, Tensor]:
        """Stable-ordered name -> tensor map over every parameter."""
        params: dict[str, Tensor] = {"embed.weight": self.embed}
        for i, blk in enumerate(self.blocks):
            p = f"layers.{i}"
            params[f"{p}.norm1.gain"] = blk.norm1.gain
            for proj_name in ("wq", "wk", "wv", "wo"):
                proj: Projection = getattr(blk.attn, proj_name)
                params[f"{p}.attn.{proj_name}.weight"] = proj.weight
                if proj.adapter is not None:
                    params[f"{p}.attn.{proj_name}.lora_a"] = proj.adapter.a
                    params[f"{p}.attn.{proj_name}.lora_b"] = proj.adapter.b
            cfg = blk.attn.hybrid_cfg
            if cfg is not None:
                params[f"{p}.attn.gamma_raw"] = cfg.gamma_raw
                params[f"{p}.attn.phi_q.weight"] = cfg.phi_q.weight
                if cfg.phi_q.bias is not None:
                    params[f"{p}.attn.phi_q.bias"] = cfg.phi_q.bias
                params[f"{p}.attn.phi_k.weight"] = cfg.phi_k.weight
                if cfg.phi_k.bias is not None:
                    params[f"{p}.attn.phi_k.bias"] = cfg.phi_k.bias
            params[f"{p}.norm2.gain"] = blk.norm2.gain
            params[f"{p}.mlp.gate.weight"] = blk.mlp.gate.weight
            params[f"{p}.mlp.up.weight"] = blk.mlp.up.weight
            params[f"{p}.mlp.down.weight"] = blk.mlp.down.weight
        params["final_norm.gain"] = self.final_norm.gain
        params["head.weight"] = self.head
        return params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.parameters().items() if t.requires_grad}

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def set_all_trainable(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag
            t.grad = np.zeros_like(t.data) if flag else None

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    # -- forward paths --------------------------------------------------------

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if (ids < 0).any() or (ids >= self.config.vocab_size).any():
            raise UnknownId(f"token ids outside [0, {self.config.vocab_size})")
        return T.embedding(self.embed, ids)

    def forward(self, ids: np.ndarray, start_pos: int = 0) -> Tensor:
        """Full forward to logits [b, l, vocab]; hybrid layers use their
        production prefill paths once converted."""
        x = self.embed_tokens(ids)
        for blk in self.blocks:
            x = blk.forward(x, start_pos)
        return T.matmul(self.final_norm.forward(x), self.head)

    def forward_teacher_forced(self, ids: np.ndarray, return_weights: bool = False):
        """Per-layer records for attention transfer: both attentions computed on
        the same (q, k, v); only the softmax output feeds the next layer, so
        gradients reach feature-map parameters exclusively through y_hat.

        Returns (records, logits): records[m] has keys x (block input), y
        (softmax heads output, no tape), y_hat (hybrid heads output), and,
        when requested, a / a_hat (materialized attention weights).
        """
        if not self.converted:
            raise NotConverted("attention transfer needs a converted model")
        records = []
        x = self.embed_tokens(ids)
        for blk in self.blocks:
            rec = {"x": x}
            normed = blk.norm1.forward(x)
            q, k, v = blk.attn.project_qkv(normed)
            with T.no_grad():
                y, a = blk.attn.heads_softmax(q.detach(), k.detach(), v.detach(), return_weights)
            y_hat = blk.attn.heads_hybrid(q, k, v)
            rec["y"] = y
            rec["y_hat"] = y_hat
            if return_weights:
                rec["a"] = a
                rec["a_hat"] = hybrid_attention_weights(q, k, v, blk.attn.hybrid_cfg)
            records.append(rec)
            x = x + blk.attn.wo.forward(blk.attn.merge_heads(y))
            x = x + blk.mlp.forward(blk.norm2.forward(x))
        logits = T.matmul(self.final_norm.forward(x), self.head)
        return records, logits


def build_model(cfg: ModelConfig) -> Model:
    """Deterministic initialization from cfg.seed (same seed, same bits)."""
    rng = np.random.default_rng(cfg.seed)
    D, Dh, V = cfg.model_dim, cfg.mlp_hidden, cfg.vocab_size

    def mat(rows, cols, std):
        return Tensor(rng.normal(0.0, std, size=(rows, cols)).astype(np.float32))

    std = 1.0 / np.sqrt(D)
    embed = mat(V, D, std)
    blocks = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        wq = Projection(mat(D, D, std), f"{p}.attn.wq")
        wk = Projection(mat(D, D, std), f"{p}.attn.wk")
        wv = Projection(mat(D, D, std), f"{p}.attn.wv")
        wo = Projection(mat(D, D, std / np.sqrt(2 * cfg.n_layers)), f"{p}.attn.wo")
        attn = AttentionLayer(wq, wk, wv, wo, cfg.n_heads, cfg.head_dim, cfg.rope_base)
        norm1 = RMSNorm(Tensor(np.ones(D, dtype=np.float32)), f"{p}.norm1")
        gate = Projection(mat(D, Dh, std), f"{p}.mlp.gate")
        up = Projection(mat(D, Dh, std), f"{p}.mlp.up")
        down = Projection(mat(Dh, D, 1.0 / np.sqrt(Dh) / np.sqrt(2 * cfg.n_layers)), f"{p}.mlp.down")
        norm2 = RMSNorm(Tensor(np.ones(D, dtype=np.float32)), f"{p}.norm2")
        blocks.append(Block(norm1, attn, norm2, Mlp(gate, up, down)))
    final_norm = RMSNorm(Tensor(np.ones(D, dtype=np.float32)), "final_norm")
    head = mat(D, V, std)
    return Model(cfg, embed, blocks, final_norm, head)


def clone_model(model: Model) -> Model:
    """Independent copy: rebuild from config, replay convert/attach, copy data."""
    new = build_model(model.config)
    if model.hybrid_spec is not None:
        convert_model(new, model.hybrid_spec)
    if model.lora_meta is not None:
        lora_attach(
            new,
            rank=model.lora_meta["rank"],
            alpha=model.lora_meta["alpha"],
            targets=tuple(model.lora_meta["targets"]),
        )
    src = model.parameters()
    for name, t in new.parameters().items():
        t.data = src[name].data.copy()
        t.requires_grad = src[name].requires_grad
        t.grad = np.zeros_like(t.data) if t.requires_grad else None
    return new


def expected_parameter_count(cfg: ModelConfig) -> int:
    """The documented closed form."""
    D, Dh = cfg.model_dim, cfg.mlp_hidden
    per_layer = 4 * D * D + 3 * D * Dh + 2 * D
    return cfg.vocab_size * D + cfg.n_layers * per_layer + D + D * cfg.vocab_size


def convert_model(model: Model, spec: HybridSpec, seed: int | None = None) -> Model:
    """Swap every softmax attention for a hybrid layer that inherits the frozen
    projection weights; fresh feature maps and gamma_raw are the only trainable
    parameters afterwards."""
    if model.converted:
        raise AlreadyConverted("model already has hybrid attention layers")
    model.set_all_trainable(False)
    base_seed = model.config.seed if seed is None else seed
    for i, blk in enumerate(model.blocks):
        cfg = make_hybrid_config(
            spec.window_size,
            spec.window_mode,
            spec.feature_kind,
            model.config.n_heads,
            model.config.head_dim,
            spec.feature_dim,
            rope_base=model.config.rope_base,
            rng=np.random.default_rng((base_seed, i)),
            gamma_init=spec.gamma_init,
        )
        blk.attn.hybrid_cfg = cfg
    model.hybrid_spec = spec
    return model


def freeze_feature_maps(model: Model) -> None:
    """Stage-2 precondition: feature maps and gamma stop training."""
    for blk in model.blocks:
        cfg = blk.attn.hybrid_cfg
        if cfg is None:
            continue
        for t in cfg.parameters():
            t.requires_grad = False
            t.grad = None


def lora_attach(
    model: Model,
    rank: int = 8,
    alpha: float = 16.0,
    targets: tuple[str, ...] = ("wq", "wk", "wv", "wo"),
    seed: int = 0,
) -> Model:
    """Attach rank-r adapters to the targeted attention projections of every
    layer. B is zero-initialized, so the model function is bit-identical at
    attach time; only A/B are trainable afterwards."""
    if rank < 1:
        raise InvalidConfig("LoRA rank must be >= 1")
    bad = [t for t in targets if t not in ("wq", "wk", "wv", "wo")]
    if bad or not targets:
        raise InvalidConfig(f"LoRA targets must be non-empty drawn from wq/wk/wv/wo, got {targets}")
    rng = np.random.default_rng(seed)
    for i, blk in enumerate(model.blocks):
        for name in targets:
            proj: Projection = getattr(blk.attn, name)
            if proj.adapter is not None:
                raise DuplicateAdapter(f"{proj.name} already has an adapter")
            in_dim, out_dim = proj.weight.shape
            a = Tensor(rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(rank, in_dim)).astype(np.float32), requires_grad=True)
            b = Tensor(np.zeros((out_dim, rank), dtype=np.float32), requires_grad=True)
            proj.adapter = LoraAdapter(a=a, b=b, rank=rank, alpha=alpha, target=proj.name)
    model.lora_meta = {"rank": rank, "alpha": alpha, "targets": list(targets)}
    return model


def adapter_parameters(model: Model) -> dict[str, Tensor]:
    out = {}
    for name, t in model.parameters().items():
        if name.endswith(("lora_a", "lora_b")):
            out[name] = t
    if not out:
        raise AdaptersMissing("no LoRA adapters attached")
    return out


# --------------------------------------------------------------------------
# tokenizer
# --------------------------------------------------------------------------


def tokenize(text: bytes) -> np.ndarray:
    """Byte ids 0-255 wrapped in BOS=256 / EOS=257, as uint32."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.concatenate(
        [[BOS_ID], np.frombuffer(bytes(text), dtype=np.uint8).astype(np.uint32), [EOS_ID]]
    ).astype(np.uint32)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and int(ids.max(initial=0)) >= 258:
        raise UnknownId(f"id {int(ids.max())} outside vocabulary")
    keep = ids[(ids != BOS_ID) & (ids != EOS_ID)]
    return keep.astype(np.uint8).tobytes()


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------


class HybridSession:
    """Per-layer recurrent decode states for a converted model."""

    def __init__(self, model: Model, batch: int):
        if not model.converted:
            raise NotConverted("decode session needs a converted model")
        self.model = model
        cfgs = [blk.attn.hybrid_cfg for blk in model.blocks]
        self.states = [
            HybridDecodeState(batch, model.config.n_heads, cfg, model.config.head_dim)
            for cfg in cfgs
        ]
        self.position = 0

    @property
    def state_bytes(self) -> int:
        return sum(s.state_bytes for s in self.states)

    @property
    def cache_bytes(self) -> int:
        return sum(s.cache_bytes for s in self.states)

    def prefill(self, ids: np.ndarray) -> np.ndarray:
        """Run the (chunked, for terraced) prefill path, bulk-load the decode
        states, and return the final-position logits [b, vocab]."""
        model = self.model
        n = ids.shape[1]
        with T.no_grad():
            x = model.embed_tokens(ids)
            for blk, state in zip(model.blocks, self.states):
                normed = blk.norm1.forward(x)
                q, k, v = blk.attn.project_qkv(normed)
                y = blk.attn.heads_hybrid(q, k, v)
                self._load_state(state, blk.attn.hybrid_cfg, k.data, v.data)
                x = x + blk.attn.wo.forward(blk.attn.merge_heads(y))
                x = x + blk.mlp.forward(blk.norm2.forward(x))
            logits = T.matmul(model.final_norm.forward(x), model.head)
        self.position = n
        return logits.data[:, -1]

    @staticmethod
    def _load_state(state: HybridDecodeState, cfg, k: np.ndarray, v: np.ndarray) -> None:
        from .attention import _phi_np  # same math as the streaming fold

        n = k.shape[2]
        w = cfg.window_size
        if cfg.window_mode == "standard":
            cache_lo = max(0, n - w)
        else:
            cache_lo = ((n - 1) // w) * w
        if cache_lo > 0:
            fk = _phi_np(cfg.phi_k, k[:, :, :cache_lo])
            state.s += np.einsum("bhnf,bhnd->bhfd", fk, v[:, :, :cache_lo])
            state.z += fk.sum(axis=2)
        width = n - cache_lo
        state.k_cache[:, :, :width] = k[:, :, cache_lo:]
        state.v_cache[:, :, :width] = v[:, :, cache_lo:]
        state.filled = width
        state.position = n

    def step(self, token_ids: np.ndarray) -> np.ndarray:
        """Advance one token; token_ids [b] -> logits [b, vocab]."""
        from .attention import hybrid_decode_step

        model = self.model
        with T.no_grad():
            x = model.embed_tokens(token_ids[:, None])  # [b, 1, D]
            for blk, state in zip(model.blocks, self.states):
                normed = blk.norm1.forward(x)
                q, k, v = blk.attn.project_qkv(normed, start_pos=self.position)
                y = hybrid_decode_step(
                    state, q.data[:, :, 0], k.data[:, :, 0], v.data[:, :, 0],
                    blk.attn.hybrid_cfg, position=self.position,
                )
                y_t = Tensor(y[:, :, None, :].astype(np.float32))
                x = x + blk.attn.wo.forward(blk.attn.merge_heads(y_t))
                x = x + blk.mlp.forward(blk.norm2.forward(x))
            logits = T.matmul(model.final_norm.forward(x), model.head)
        self.position += 1
        return logits.data[:, 0]


class SoftmaxSession:
    """Growing-KV-cache decoding for the softmax baseline (bench comparison)."""

    def __init__(self, model: Model, batch: int):
        self.model = model
        self.k_cache = [None] * len(model.blocks)
        self.v_cache = [None] * len(model.blocks)
        self.position = 0

    @property
    def cache_bytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in zip(self.k_cache, self.v_cache) if k is not None)

    def prefill(self, ids: np.ndarray) -> np.ndarray:
        model = self.model
        with T.no_grad():
            x = model.embed_tokens(ids)
            for i, blk in enumerate(model.blocks):
                normed = blk.norm1.forward(x)
                q, k, v = blk.attn.project_qkv(normed)
                self.k_cache[i] = k.data.copy()
                self.v_cache[i] = v.data.copy()
                y, _ = blk.attn.heads_softmax(q, k, v)
                x = x + blk.attn.wo.forward(blk.attn.merge_heads(y))
                x = x + blk.mlp.forward(blk.norm2.forward(x))
            logits = T.matmul(model.final_norm.forward(x), model.head)
        self.position = ids.shape[1]
        return logits.data[:, -1]

    def step(self, token_ids: np.ndarray) -> np.ndarray:
        model = self.model
        d = model.config.head_dim
        with T.no_grad():
            x = model.embed_tokens(token_ids[:, None])
            for i, blk in enumerate(model.blocks):
                normed = blk.norm1.forward(x)
                q, k, v = blk.attn.project_qkv(normed, start_pos=self.position)
                self.k_cache[i] = np.concatenate([self.k_cache[i], k.data], axis=2)
                self.v_cache[i] = np.concatenate([self.v_cache[i], v.data], axis=2)
                logits_attn = np.einsum("bhd,bhnd->bhn", q.data[:, :, 0], self.k_cache[i]) / np.sqrt(d)
                w = np.exp(logits_attn - logits_attn.max(-1, keepdims=True))
                w /= w.sum(-1, keepdims=True)
                y = np.einsum("bhn,bhnd->bhd", w, self.v_cache[i])
                y_t = Tensor(y[:, :, None, :].astype(np.float32))
                x = x + blk.attn.wo.forward(blk.attn.merge_heads(y_t))
                x = x + blk.mlp.forward(blk.norm2.forward(x))
            logits = T.matmul(model.final_norm.forward(x), model.head)
        self.position += 1
        return logits.data[:, 0]


def generate_greedy(model: Model, prompt_ids: np.ndarray, n_new: int, max_len: int | None = None) -> np.ndarray:
    """Greedy decoding: chunked/standard prefill, then recurrent hybrid steps."""
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if prompt_ids.ndim == 1:
        prompt_ids = prompt_ids[None, :]
    if prompt_ids.shape[1] == 0:
        raise InvalidConfig("prompt must be non-empty")
    cap = max_len if max_len is not None else model.config.max_seq_len
    if prompt_ids.shape[1] + n_new > cap:
        raise PromptTooLong(f"prompt {prompt_ids.shape[1]} + {n_new} new tokens exceeds cap {cap}")
    if n_new == 0:
        return prompt_ids.copy()
    session = HybridSession(model, prompt_ids.shape[0])
    logits = session.prefill(prompt_ids)
    out = [prompt_ids]
    for _ in range(n_new):
        nxt = logits.argmax(-1)
        out.append(nxt[:, None])
        logits = session.step(nxt)
    return np.concatenate(out, axis=1)
