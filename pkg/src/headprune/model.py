"""Toy Transformers whose attention heads each carry a scalar gate.

Heads are indexed with one flat index over the whole model.  Block order is
encoder self-attention layers, then decoder self-attention layers, then
cross-attention layers; within a block heads keep their layer-local order.
A head's output is ``W_o``-projected and heads are combined by summation, so a
gate simply scales one summand and removing a head drops it.
"""

from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, DomainError

CHECKPOINT_MAGIC = "HPLAB1"
CHECKPOINT_VERSION = 1
_MASK_NEG = -1e9


@dataclass
class ModelConfig:
    task: str = "classifier"  # "classifier" | "seq2seq"
    n_layers: int = 2  # encoder layers
    n_dec_layers: int = 0  # decoder layers (seq2seq only)
    n_heads: int = 4  # heads per layer and attention type
    d_model: int = 32
    d_head: int | None = None  # defaults to d_model // n_heads
    vocab_size: int = 8
    max_len: int = 16
    n_classes: int = 2
    d_ff: int | None = None  # defaults to 4 * d_model

    def __post_init__(self):
        if self.task not in ("classifier", "seq2seq"):
            raise DomainError(f"unknown task kind {self.task!r}")
        if self.task == "seq2seq" and self.n_dec_layers < 1:
            raise DomainError("seq2seq needs at least one decoder layer")
        if self.task == "classifier" and self.n_dec_layers:
            raise DomainError("classifier has no decoder layers")
        if min(self.n_layers, self.n_heads, self.d_model, self.vocab_size, self.max_len) < 1:
            raise DomainError("model dimensions must be positive")
        if self.d_head is None:
            self.d_head = max(1, self.d_model // self.n_heads)
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model

    @property
    def total_heads(self) -> int:
        per_type = self.n_heads
        if self.task == "classifier":
            return self.n_layers * per_type
        return (self.n_layers + 2 * self.n_dec_layers) * per_type

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeadParams:
    """Projections of a single head (row-vector convention: ``x @ W``)."""

    w_q: np.ndarray  # (d, d_k)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # (d_k, d)


def attention_head_forward(head: HeadParams, z, q) -> np.ndarray:
    """Single-query attention ``att(z, q)`` over a sequence ``z`` of shape (T, d)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64)
    if z.shape[0] == 0:
        raise DomainError("attention over an empty sequence")
    d_k = head.w_q.shape[1]
    logits = (z @ head.w_k) @ (q @ head.w_q) / math.sqrt(d_k)
    alpha = np.exp(logits - logits.max())
    alpha /= alpha.sum()
    return (alpha @ (z @ head.w_v)) @ head.w_o


def gated_multihead_forward(heads, gates, z, q) -> np.ndarray:
    """``sum_h g_h * att_h(z, q)`` for one layer's heads."""
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (len(heads),):
        raise ContractError(f"{len(heads)} heads but {gates.shape} gates")
    out = np.zeros(heads[0].w_o.shape[1]) if heads else np.zeros(np.asarray(q).shape[-1])
    for g, head in zip(gates, heads):
        out = out + g * attention_head_forward(head, z, q)
    return out


@dataclass
class Block:
    """One multi-head attention sublayer: ``kind`` in {enc, dec, cross}."""

    kind: str
    layer: int
    head_ids: list[int]  # flat ids in the original (uncompacted) model

    @property
    def n_heads(self) -> int:
        return len(self.head_ids)

    @property
    def prefix(self) -> str:
        return f"{self.kind}.{self.layer}.attn"


@dataclass
class GatedTransformer:
    config: ModelConfig
    params: dict[str, Tensor]
    blocks: list[Block]
    mask: np.ndarray | None = field(default=None)  # informational; not applied by forward

    # structure ---------------------------------------------------------------

    @property
    def n_heads(self) -> int:
        return sum(b.n_heads for b in self.blocks)

    def block_offsets(self) -> list[int]:
        return list(np.cumsum([0] + [b.n_heads for b in self.blocks[:-1]]))

    def head_params(self, flat: int) -> HeadParams:
        for block, off in zip(self.blocks, self.block_offsets()):
            if off <= flat < off + block.n_heads:
                j = flat - off
                p = block.prefix
                return HeadParams(*(self.params[f"{p}.{n}"].data[j] for n in ("wq", "wk", "wv", "wo")))
        raise IndexError(flat)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def attention_parameters(self) -> int:
        return int(sum(t.size for n, t in self.params.items() if ".attn." in n))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "GatedTransformer":
        params = {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.params.items()}
        mask = None if self.mask is None else self.mask.copy()
        return GatedTransformer(copy.deepcopy(self.config), params, copy.deepcopy(self.blocks), mask)

    # forward -----------------------------------------------------------------

    def _gate_slices(self, gates):
        if gates is None:
            return [None] * len(self.blocks)
        g = gates if isinstance(gates, Tensor) else Tensor(gates)
        if g.shape[-1] != self.n_heads or g.ndim not in (1, 2):
            raise ContractError(f"model has {self.n_heads} heads, got gates of shape {g.shape}")
        lead = 1 if g.ndim == 1 else g.shape[0]
        out = []
        for block, off in zip(self.blocks, self.block_offsets()):
            if block.n_heads == 0:
                out.append(None)
                continue
            sl = ad.index(g, (Ellipsis, slice(off, off + block.n_heads)))
            out.append(ad.reshape(sl, (lead, block.n_heads, 1, 1)))
        return out

    def _attend(self, block: Block, x: Tensor, mem: Tensor, gate, causal: bool) -> Tensor:
        p = self.params
        pre = block.prefix
        B, T, d = x.shape
        S = mem.shape[1]
        h = block.n_heads
        d_k = p[f"{pre}.wq"].shape[-1]

        def project(src: Tensor, name: str, length: int) -> Tensor:
            # stacked (h, d, d_k) weights -> one (d, h*d_k) GEMM -> (B, h, length, d_k)
            w = ad.reshape(ad.transpose(p[f"{pre}.{name}"], (1, 0, 2)), (d, h * d_k))
            out = ad.reshape(ad.matmul(src, w), (B, length, h, d_k))
            return ad.transpose(out, (0, 2, 1, 3))

        q = project(x, "wq", T)
        k = project(mem, "wk", S)
        v = project(mem, "wv", S)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_k))
        if causal:
            scores = ad.add(scores, np.triu(np.full((T, S), _MASK_NEG), k=1))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)  # (B, h, T, d_k)
        if gate is not None:
            ctx = ad.mul(ctx, gate)
        # sum_h ctx_h @ W_o[h] as a single GEMM over the concatenated heads
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, h * d_k))
        return ad.matmul(ctx, ad.reshape(p[f"{pre}.wo"], (h * d_k, d)))

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _ffn(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p[f"{name}.w1"]), p[f"{name}.b1"]))
        return ad.add(ad.matmul(h, p[f"{name}.w2"]), p[f"{name}.b2"])

    def _embed(self, table: str, pos: str, ids: np.ndarray) -> Tensor:
        T = ids.shape[1]
        if T > self.params[pos].shape[0]:
            raise DimensionError(f"sequence length {T} exceeds positional table")
        return ad.add(ad.embedding(self.params[table], ids), ad.index(self.params[pos], slice(0, T)))

    def _blocks_of(self, kind: str):
        return [i for i, b in enumerate(self.blocks) if b.kind == kind]

    def encode(self, src: np.ndarray, slices) -> Tensor:
        x = self._embed("src_emb", "src_pos", src)
        for i in self._blocks_of("enc"):
            block = self.blocks[i]
            pre = f"enc.{block.layer}"
            if block.n_heads:
                h = self._ln(f"{pre}.ln1", x)
                x = ad.add(x, self._attend(block, h, h, slices[i], causal=False))
            x = ad.add(x, self._ffn(f"{pre}.ffn", self._ln(f"{pre}.ln2", x)))
        return self._ln("enc.ln_f", x)

    def decode(self, mem: Tensor, tgt_in: np.ndarray, slices) -> Tensor:
        y = self._embed("tgt_emb", "tgt_pos", tgt_in)
        dec = self._blocks_of("dec")
        cross = self._blocks_of("cross")
        for i, j in zip(dec, cross):
            layer = self.blocks[i].layer
            pre = f"dec.{layer}"
            if self.blocks[i].n_heads:
                h = self._ln(f"{pre}.ln1", y)
                y = ad.add(y, self._attend(self.blocks[i], h, h, slices[i], causal=True))
            if self.blocks[j].n_heads:
                h = self._ln(f"{pre}.ln2", y)
                y = ad.add(y, self._attend(self.blocks[j], h, mem, slices[j], causal=False))
            y = ad.add(y, self._ffn(f"{pre}.ffn", self._ln(f"{pre}.ln3", y)))
        y = self._ln("dec.ln_f", y)
        return ad.add(ad.matmul(y, self.params["out.w"]), self.params["out.b"])

    def forward(self, inputs, gates=None) -> Tensor:
        """Classifier: ``inputs`` = token ids (B, T) -> logits (B, C).

        Seq2seq: ``inputs`` = (src (B, S), decoder input (B, T)) -> logits (B, T, V).
        ``gates`` is None (all heads on), shape (H,), or per-example (B, H).
        """
        slices = self._gate_slices(gates)
        if self.config.task == "classifier":
            ids = np.asarray(inputs)
            cls = np.full((ids.shape[0], 1), self.config.vocab_size, dtype=ids.dtype)
            h = self.encode(np.concatenate([cls, ids], axis=1), slices)
            first = ad.reshape(ad.index(h, (slice(None), 0)), (ids.shape[0], self.config.d_model))
            return ad.add(ad.matmul(first, self.params["out.w"]), self.params["out.b"])
        src, tgt_in = inputs
        return self.decode(self.encode(np.asarray(src), slices), np.asarray(tgt_in), slices)

    def loss(self, batch, gates=None, per_example: bool = False) -> Tensor:
        """Mean cross-entropy of a batch; ``per_example`` sums per-example means instead."""
        if self.config.task == "classifier":
            x, y = batch
            logits = self.forward(x, gates)
            return ad.cross_entropy(logits, y, reduction="sum" if per_example else "mean")
        src, tgt = batch
        tgt = np.asarray(tgt)
        logits = self.forward((src, self.decoder_input(tgt)), gates)
        B, T, V = logits.shape
        flat = ad.reshape(logits, (B * T, V))
        if per_example:
            return ad.scale(ad.cross_entropy(flat, tgt.reshape(-1), reduction="sum"), 1.0 / T)
        return ad.cross_entropy(flat, tgt.reshape(-1))

    def decoder_input(self, tgt: np.ndarray) -> np.ndarray:
        bos = np.full((tgt.shape[0], 1), self.config.vocab_size, dtype=np.int64)
        return np.concatenate([bos, tgt[:, :-1]], axis=1).astype(np.int64)

    def greedy_decode(self, src: np.ndarray, length: int, gates=None) -> np.ndarray:
        src = np.asarray(src)
        with ad.no_grad():
            slices = self._gate_slices(gates)
            mem = self.encode(src, slices)
            out = np.full((src.shape[0], 1), self.config.vocab_size, dtype=np.int64)
            for _ in range(length):
                logits = self.decode(mem, out, slices)
                nxt = logits.data[:, -1, :].argmax(axis=-1)
                out = np.concatenate([out, nxt[:, None]], axis=1)
        return out[:, 1:]

    def predict(self, inputs, gates=None) -> np.ndarray:
        with ad.no_grad():
            if self.config.task == "classifier":
                return self.forward(inputs, gates).data.argmax(axis=-1)
            src, length = inputs
            return self.greedy_decode(src, length, gates)


class GatedView:
    """A model paired with fixed gates; forwards behave as the gated model."""

    def __init__(self, model: GatedTransformer, gates):
        n = gates.shape[-1] if hasattr(gates, "shape") else len(gates)
        if n != model.n_heads:
            raise ContractError(f"model has {model.n_heads} heads, got {n} gates")
        self.model = model
        self.gates = gates if isinstance(gates, Tensor) else np.asarray(gates, dtype=np.float64)

    def forward(self, inputs) -> Tensor:
        return self.model.forward(inputs, self.gates)

    def loss(self, batch, per_example: bool = False) -> Tensor:
        return self.model.loss(batch, self.gates, per_example=per_example)

    def predict(self, inputs) -> np.ndarray:
        return self.model.predict(inputs, self.gates)


def apply_gates(model: GatedTransformer, gates) -> GatedView:
    """Pair ``model`` with a gate vector or binary mask of length H."""
    return GatedView(model, gates)


# construction ----------------------------------------------------------------


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def build_model(config: ModelConfig, rng: np.random.Generator) -> GatedTransformer:
    d, dk, h, f = config.d_model, config.d_head, config.n_heads, config.d_ff
    if dk * h > 4 * d:
        warnings.warn(f"per-layer head width {dk}x{h} is much larger than d_model={d}", stacklevel=2)
    params: dict[str, np.ndarray] = {}
    blocks: list[Block] = []
    next_id = 0

    def attn(kind: str, layer: int):
        nonlocal next_id
        pre = f"{kind}.{layer}.attn"
        params[f"{pre}.wq"] = _normal(rng, (h, d, dk), 1 / math.sqrt(d))
        params[f"{pre}.wk"] = _normal(rng, (h, d, dk), 1 / math.sqrt(d))
        params[f"{pre}.wv"] = _normal(rng, (h, d, dk), 1 / math.sqrt(d))
        params[f"{pre}.wo"] = _normal(rng, (h, dk, d), 1 / math.sqrt(dk * h))
        blocks.append(Block(kind, layer, list(range(next_id, next_id + h))))
        next_id += h

    def ln(name: str):
        params[f"{name}.g"] = np.ones(d)
        params[f"{name}.b"] = np.zeros(d)

    def ffn(name: str):
        params[f"{name}.w1"] = _normal(rng, (d, f), 1 / math.sqrt(d))
        params[f"{name}.b1"] = np.zeros(f)
        params[f"{name}.w2"] = _normal(rng, (f, d), 1 / math.sqrt(f))
        params[f"{name}.b2"] = np.zeros(d)

    extra = 1  # CLS for the classifier, BOS for the decoder
    params["src_emb"] = _normal(rng, (config.vocab_size + extra, d), 1.0)
    params["src_pos"] = _normal(rng, (config.max_len + extra, d), 1.0)
    for layer in range(config.n_layers):
        attn("enc", layer)
        ln(f"enc.{layer}.ln1")
        ln(f"enc.{layer}.ln2")
        ffn(f"enc.{layer}.ffn")
    ln("enc.ln_f")
    if config.task == "classifier":
        params["out.w"] = _normal(rng, (d, config.n_classes), 1 / math.sqrt(d))
        params["out.b"] = np.zeros(config.n_classes)
    else:
        params["tgt_emb"] = _normal(rng, (config.vocab_size + extra, d), 1.0)
        params["tgt_pos"] = _normal(rng, (config.max_len + extra, d), 1.0)
        for layer in range(config.n_dec_layers):
            attn("dec", layer)
            ln(f"dec.{layer}.ln1")
            ln(f"dec.{layer}.ln2")
            ln(f"dec.{layer}.ln3")
            ffn(f"dec.{layer}.ffn")
        for layer in range(config.n_dec_layers):
            attn("cross", layer)
        ln("dec.ln_f")
        params["out.w"] = _normal(rng, (d, config.vocab_size), 1 / math.sqrt(d))
        params["out.b"] = np.zeros(config.vocab_size)
    # keep block order enc, dec, cross regardless of creation order
    order = {"enc": 0, "dec": 1, "cross": 2}
    blocks.sort(key=lambda b: (order[b.kind], b.layer))
    _renumber(blocks)
    tensors = {n: Tensor(v, requires_grad=True) for n, v in params.items()}
    return GatedTransformer(config, tensors, blocks)


def _renumber(blocks: list[Block]) -> None:
    nxt = 0
    for b in blocks:
        b.head_ids = list(range(nxt, nxt + b.n_heads))
        nxt += b.n_heads


def compact(model: GatedTransformer, mask) -> GatedTransformer:
    """Physically drop heads whose mask entry is 0.

    The result's forward equals ``apply_gates(model, mask)``; blocks may end up
    empty, in which case only their residual and feed-forward paths remain.
    """
    mask = np.asarray(mask)
    if mask.shape != (model.n_heads,):
        raise ContractError(f"mask length {mask.shape} != {model.n_heads} heads")
    keep = mask.astype(bool)
    new = model.copy()
    for block, off in zip(new.blocks, model.block_offsets()):
        sel = np.flatnonzero(keep[off : off + block.n_heads])
        for name in ("wq", "wk", "wv", "wo"):
            key = f"{block.prefix}.{name}"
            new.params[key] = Tensor(model.params[key].data[sel].copy(), requires_grad=True)
        block.head_ids = [block.head_ids[j] for j in sel]
    new.mask = None
    return new


def mask_to_bits(mask) -> str:
    return "".join("1" if m else "0" for m in np.asarray(mask).astype(bool))


def bits_to_mask(bits: str) -> np.ndarray:
    if set(bits) - {"0", "1"}:
        raise ValueError(f"not a bit string: {bits!r}")
    return np.array([c == "1" for c in bits], dtype=np.int8)


# checkpoints -----------------------------------------------------------------


def save_checkpoint(model: GatedTransformer, path) -> None:
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "blocks": [{"kind": b.kind, "layer": b.layer, "head_ids": b.head_ids} for b in model.blocks],
        "mask": None if model.mask is None else mask_to_bits(model.mask),
        "params": {n: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for n, t in model.params.items()},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> GatedTransformer:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig(**doc["config"])
    params = {
        n: Tensor(np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]), requires_grad=True)
        for n, v in doc["params"].items()
    }
    blocks = [Block(b["kind"], b["layer"], list(b["head_ids"])) for b in doc["blocks"]]
    mask = None if doc["mask"] is None else bits_to_mask(doc["mask"])
    return GatedTransformer(config, params, blocks, mask)
