"""Tiny decoder-only transformer in float64 numpy.

Pre-norm RMS normalization, rotary position encoding applied at absolute
positions, multi-head attention with a masked softmax that renormalizes
over unmasked keys only, a GELU feed-forward block, and an untied output
head. The same forward graph serves training (with gradients from the
in-repo autodiff) and cached inference (tape-free).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, concat, take, take_pairs
from .corpus import SegmentedText
from .errors import ContractError, InputError, NumericError

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    context_len: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "context_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ContractError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ContractError("head dimension must be even for rotary pairs")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerWeights:
    attn_gain: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_gain: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights]
    final_gain: np.ndarray
    head: np.ndarray

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Canonical (name, array) order used by checkpoints and the optimizer."""
        out = [("embedding", self.embedding)]
        for i, lw in enumerate(self.layers):
            for f in ("attn_gain", "wq", "wk", "wv", "wo", "ffn_gain", "w1", "w2"):
                out.append((f"layer{i}.{f}", getattr(lw, f)))
        out.append(("final_gain", self.final_gain))
        out.append(("head", self.head))
        return out

    def set_array(self, name: str, value: np.ndarray) -> None:
        if name == "embedding":
            self.embedding = value
        elif name == "final_gain":
            self.final_gain = value
        elif name == "head":
            self.head = value
        else:
            layer, f = name.split(".")
            setattr(self.layers[int(layer[5:])], f, value)

    def copy(self) -> "ModelWeights":
        clone = zero_like(self)
        for name, arr in self.named_arrays():
            clone.set_array(name, arr.copy())
        return clone

    def n_params(self) -> int:
        return sum(a.size for _, a in self.named_arrays())


@dataclass
class ForwardOutput:
    logits: np.ndarray  # (T, vocab_size)
    new_keys: list[np.ndarray]  # per layer, (n_heads, T, head_dim), rotary applied
    new_values: list[np.ndarray]  # per layer, (n_heads, T, head_dim)
    attn: list[np.ndarray] = field(default_factory=list)  # per layer when requested


def init_weights(config: ModelConfig, seed: int, anchor_id: int | None = None) -> ModelWeights:
    """Scaled-normal init (std 0.02); the anchor token's embedding row is
    reset to the mean of all other rows when anchor_id is given."""
    rng = np.random.default_rng(seed)

    def normal(*shape: int) -> np.ndarray:
        return rng.normal(0.0, 0.02, size=shape)

    embedding = normal(config.vocab_size, config.d_model)
    layers = [
        LayerWeights(
            attn_gain=np.ones(config.d_model),
            wq=normal(config.d_model, config.d_model),
            wk=normal(config.d_model, config.d_model),
            wv=normal(config.d_model, config.d_model),
            wo=normal(config.d_model, config.d_model),
            ffn_gain=np.ones(config.d_model),
            w1=normal(config.d_model, config.d_ff),
            w2=normal(config.d_ff, config.d_model),
        )
        for _ in range(config.n_layers)
    ]
    weights = ModelWeights(
        config=config,
        embedding=embedding,
        layers=layers,
        final_gain=np.ones(config.d_model),
        head=normal(config.d_model, config.vocab_size),
    )
    if anchor_id is not None:
        others = np.delete(embedding, anchor_id, axis=0)
        embedding[anchor_id] = others.mean(axis=0)
    return weights


def zero_like(weights: ModelWeights) -> ModelWeights:
    cfg = weights.config
    return ModelWeights(
        config=cfg,
        embedding=np.zeros_like(weights.embedding),
        layers=[
            LayerWeights(**{f: np.zeros_like(getattr(lw, f)) for f in (
                "attn_gain", "wq", "wk", "wv", "wo", "ffn_gain", "w1", "w2")})
            for lw in weights.layers
        ],
        final_gain=np.zeros_like(weights.final_gain),
        head=np.zeros_like(weights.head),
    )


def _rope_tables(config: ModelConfig, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = config.head_dim // 2
    inv_freq = config.rope_base ** (-np.arange(half) * 2.0 / config.head_dim)
    angles = positions[:, None] * inv_freq[None, :]  # (T, half)
    return np.cos(angles), np.sin(angles)


def _rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray, half: int) -> Tensor:
    x1 = x[:, :, :half]
    x2 = x[:, :, half:]
    return concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    scale = ((x * x).mean(axis=-1, keepdims=True) + eps) ** -0.5
    return x * scale * gain


def _gelu(x: Tensor) -> Tensor:
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    return 0.5 * x * (1.0 + inner.tanh())


def _masked_softmax(scores: Tensor, mask_bits: np.ndarray) -> Tensor:
    """Renormalize exp(scores) over unmasked keys; masked keys contribute 0.

    Every row carries at least the self bit, so the denominator is positive.
    The row max over unmasked keys is subtracted as a constant for stability
    (softmax is shift-invariant, so this changes nothing mathematically).
    """
    keep = mask_bits.astype(bool)[None, :, :]
    rowmax = np.max(np.where(keep, scores.data, -np.inf), axis=-1, keepdims=True)
    e = (scores - rowmax).exp() * mask_bits.astype(np.float64)[None, :, :]
    return e / e.sum(axis=-1, keepdims=True)


def _as_tensors(weights: ModelWeights, requires_grad: bool) -> dict[str, Tensor]:
    return {name: Tensor(a, requires_grad=requires_grad) for name, a in weights.named_arrays()}


def _forward_graph(
    params: dict[str, Tensor],
    config: ModelConfig,
    ids: np.ndarray,
    mask_bits: np.ndarray,
    cache_kv: list[tuple[np.ndarray, np.ndarray]] | None,
    positions: np.ndarray,
    collect_attn: bool,
) -> tuple[Tensor, ForwardOutput]:
    T = len(ids)
    n_cached = cache_kv[0][0].shape[1] if cache_kv else 0
    if mask_bits.shape != (T, n_cached + T):
        raise ContractError(
            f"mask shape {mask_bits.shape} does not match "
            f"(tokens={T}, cached={n_cached})"
        )
    if np.any(np.diff(positions) <= 0):
        raise ContractError("positions must be strictly increasing")

    H, hd, half = config.n_heads, config.head_dim, config.head_dim // 2
    cos, sin = _rope_tables(config, positions)
    out = ForwardOutput(logits=np.empty(0), new_keys=[], new_values=[])

    h = take(params["embedding"], ids)  # (T, d_model)
    for li in range(config.n_layers):
        p = lambda f: params[f"layer{li}.{f}"]
        a = _rmsnorm(h, p("attn_gain"), config.norm_eps)
        q = (a @ p("wq")).reshape(T, H, hd).swapaxes(0, 1)
        k = (a @ p("wk")).reshape(T, H, hd).swapaxes(0, 1)
        v = (a @ p("wv")).reshape(T, H, hd).swapaxes(0, 1)
        q = _rotate(q, cos, sin, half)
        k = _rotate(k, cos, sin, half)
        if cache_kv:
            k_all = concat([Tensor(cache_kv[li][0]), k], axis=1)
            v_all = concat([Tensor(cache_kv[li][1]), v], axis=1)
        else:
            k_all, v_all = k, v
        scores = (q @ k_all.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
        attn = _masked_softmax(scores, mask_bits)
        if collect_attn:
            out.attn.append(attn.data.copy())
        ctx = (attn @ v_all).swapaxes(0, 1).reshape(T, config.d_model)
        h = h + ctx @ p("wo")
        f = _rmsnorm(h, p("ffn_gain"), config.norm_eps)
        h = h + _gelu(f @ p("w1")) @ p("w2")
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite activations after layer {li}")
        out.new_keys.append(k.data)
        out.new_values.append(v.data)

    logits = _rmsnorm(h, params["final_gain"], config.norm_eps) @ params["head"]
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits in forward pass")
    out.logits = logits.data
    return logits, out


def forward(
    weights: ModelWeights,
    ids: list[int] | np.ndarray,
    mask_bits: np.ndarray,
    cache_kv: list[tuple[np.ndarray, np.ndarray]] | None = None,
    positions: np.ndarray | None = None,
    collect_attn: bool = False,
) -> ForwardOutput:
    """Run the model over T tokens, optionally attending into cached
    keys/values. mask_bits has shape (T, cached + T); positions are
    absolute and are never renumbered after cache reduction."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ContractError("forward needs at least one token")
    mask_bits = np.atleast_2d(np.asarray(mask_bits))
    if positions is None:
        if cache_kv:
            raise ContractError("positions are required when a cache is supplied")
        positions = np.arange(ids.size)
    else:
        positions = np.asarray(positions, dtype=np.int64)
    params = _as_tensors(weights, requires_grad=False)
    _, out = _forward_graph(
        params, weights.config, ids, mask_bits, cache_kv, positions, collect_attn
    )
    return out


def loss_and_grads(
    weights: ModelWeights, block: SegmentedText, mask_bits: np.ndarray
) -> tuple[float, ModelWeights]:
    """Mean next-token cross-entropy over the block and its exact gradient."""
    L = len(block)
    if L < 2:
        raise ContractError("training block must contain at least 2 tokens")
    ids = np.asarray(block.ids, dtype=np.int64)
    params = _as_tensors(weights, requires_grad=True)
    logits, _ = _forward_graph(
        params, weights.config, ids, np.asarray(mask_bits), None, np.arange(L), False
    )

    rows = np.arange(L - 1)
    targets = ids[1:]
    pred = logits[:-1]
    rowmax = pred.data.max(axis=-1, keepdims=True)
    shifted = pred - rowmax
    log_z = shifted.exp().sum(axis=-1, keepdims=True).log().reshape(L - 1)
    loss = -(take_pairs(shifted, rows, targets) - log_z).mean()
    if not np.isfinite(loss.data):
        raise NumericError("non-finite training loss")

    loss.backward()
    grads = zero_like(weights)
    for name, _ in weights.named_arrays():
        g = params[name].grad
        if g is not None:
            grads.set_array(name, g)
    return float(loss.data), grads


# -- checkpoint io -----------------------------------------------------------

_CKPT_MAGIC = "anchorlm-checkpoint-v1"
_CONFIG_FIELDS = (
    "vocab_size", "n_layers", "n_heads", "d_model", "d_ff",
    "context_len", "rope_base", "norm_eps",
)


def save_checkpoint(
    path: str | Path,
    weights: ModelWeights,
    step: int,
    vocab_sha256: str,
    opt_state: dict[str, np.ndarray] | None = None,
) -> None:
    """Text manifest followed by raw little-endian float64 tensors in
    manifest-declared order."""
    cfg = weights.config
    tensors = list(weights.named_arrays())
    if opt_state:
        tensors += sorted(opt_state.items())
    lines = [_CKPT_MAGIC]
    for f in _CONFIG_FIELDS:
        lines.append(f"{f} = {getattr(cfg, f)!r}")
    lines.append(f"vocab_sha256 = {vocab_sha256}")
    lines.append(f"step = {step}")
    for name, arr in tensors:
        lines.append("tensor " + name + " " + " ".join(str(d) for d in arr.shape))
    lines.append("end")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + payload)


def load_checkpoint(
    path: str | Path,
) -> tuple[ModelWeights, int, str, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    header_end = blob.find(b"\nend\n")
    if not blob.startswith(_CKPT_MAGIC.encode()) or header_end < 0:
        raise InputError(f"not a checkpoint file: {path}")
    header = blob[: header_end + 5].decode("utf-8").splitlines()
    payload = blob[header_end + 5 :]

    fields: dict[str, str] = {}
    tensor_decls: list[tuple[str, tuple[int, ...]]] = []
    for line in header[1:-1]:
        if line.startswith("tensor "):
            parts = line.split()
            tensor_decls.append((parts[1], tuple(int(d) for d in parts[2:])))
        else:
            key, value = line.split(" = ", 1)
            fields[key] = value

    config = ModelConfig(**{
        f: (float(fields[f]) if f in ("rope_base", "norm_eps") else int(fields[f]))
        for f in _CONFIG_FIELDS
    })
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in tensor_decls:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(
            payload, dtype="<f8", count=n, offset=offset
        ).reshape(shape).copy()
        offset += n * 8

    weights = init_weights(config, seed=0)
    for name, _ in weights.named_arrays():
        if name not in arrays:
            raise InputError(f"checkpoint {path} is missing tensor {name}")
        weights.set_array(name, arrays.pop(name))
    return weights, int(fields["step"]), fields["vocab_sha256"], arrays
