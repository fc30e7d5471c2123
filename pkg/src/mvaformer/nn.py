"""
Layers and attention masks for the cooperation transformer.

Parameters live directly on small :class:`Module` objects; names are the
dotted attribute path (``layer3.dva.q.weight``), which is also the key used
in checkpoints.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} vs model {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform(rng, shape, bound, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as [in, out]."""

    def __init__(self, fan_in, fan_out, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = _uniform(rng, (fan_in, fan_out), bound, dtype)
        self.bias = _uniform(rng, (fan_out,), bound, dtype)

    def __call__(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear: input {x.shape} vs weight {self.weight.shape}")
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, width, dtype=np.float32, eps=1e-5):
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self._eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self._eps)


class FeedForward(Module):
    """linear -> gelu -> linear, hidden width ``mult * width``."""

    def __init__(self, width, rng, mult=4, dtype=np.float32):
        self.fc1 = Linear(width, mult * width, rng, dtype)
        self.fc2 = Linear(mult * width, width, rng, dtype)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


# -- masks ---------------------------------------------------------------------
class MaskKind(str, enum.Enum):
    FULL = "full"
    SVA = "sva"
    DVA = "dva"


@dataclass(frozen=True)
class AttentionMask:
    kind: MaskKind
    views: int
    tokens_per_view: int
    matrix: np.ndarray

    @property
    def visible(self):
        return self.matrix == 0


@lru_cache(maxsize=64)
def _mask_matrix(kind, views, tokens, dtype):
    view_of = np.repeat(np.arange(views), tokens)
    same = view_of[:, None] == view_of[None, :]
    if kind is MaskKind.FULL:
        visible = np.ones_like(same)
    elif kind is MaskKind.SVA:
        visible = same
    else:
        visible = ~same
    mat = np.where(visible, 0.0, ad.masked_value(dtype)).astype(dtype)
    mat.setflags(write=False)
    return mat


def build_attention_mask(kind, views, tokens_per_view, dtype=np.float32):
    """
    Additive (M*t) x (M*t) mask; row = query token, column = key token.

    Tokens are ordered view-major: token ``i`` belongs to view ``i // t``.
    SVA keeps same-view pairs, DVA keeps different-view pairs, FULL keeps all.
    """
    kind = MaskKind(kind)
    if views < 1 or tokens_per_view < 1:
        raise ContractError(f"mask needs views >= 1 and tokens >= 1, got {views}, {tokens_per_view}")
    mat = _mask_matrix(kind, int(views), int(tokens_per_view), np.dtype(dtype).type)
    return AttentionMask(kind, views, tokens_per_view, mat)


# -- attention -----------------------------------------------------------------
@dataclass
class AttentionRecord:
    """Post-softmax weights of one head in one layer for one sample."""
    layer: int
    head: int
    kind: MaskKind
    weights: np.ndarray


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention with ``heads`` heads sharing one mask.

    Head ``h`` uses columns ``h*d:(h+1)*d`` of the q/k/v projections, so the
    per-head projections are stored packed in single [c, c] matrices.
    """

    def __init__(self, width, heads, rng, dtype=np.float32):
        if width % heads:
            raise ContractError(f"width {width} is not divisible by {heads} heads")
        self._heads = heads
        self._head_dim = width // heads
        self.q = Linear(width, width, rng, dtype)
        self.k = Linear(width, width, rng, dtype)
        self.v = Linear(width, width, rng, dtype)
        self.o = Linear(width, width, rng, dtype)

    @property
    def heads(self):
        return self._heads

    def _split(self, x):
        b, s, _ = x.shape
        return x.reshape(b, s, self._heads, self._head_dim).transpose(0, 2, 1, 3)

    def __call__(self, query_input, kv_input=None, mask=None, record=False):
        """
        Args:
            query_input: [B, S, c]
            kv_input: [B, S', c]; defaults to ``query_input``.
            mask: AttentionMask or additive array broadcastable to [B, heads, S, S'].
            record: keep a copy of the weights.

        Returns:
            (output [B, S, c], weights [B, heads, S, S'] or None, empty_rows [B, S])
        """
        if kv_input is None:
            kv_input = query_input
        if query_input.ndim != 3 or kv_input.ndim != 3 or query_input.shape[-1] != kv_input.shape[-1]:
            raise ShapeError(f"attention: query {query_input.shape} vs key/value {kv_input.shape}")
        b, s, c = query_input.shape
        matrix = mask.matrix if isinstance(mask, AttentionMask) else mask
        if matrix is not None and (matrix.shape[-1] != kv_input.shape[1] or matrix.shape[-2] not in (1, s)):
            raise ShapeError(f"attention: mask {matrix.shape} vs {s} queries and {kv_input.shape[1]} keys")
        q = self._split(self.q(query_input) * (1.0 / np.sqrt(self._head_dim)))
        k = self._split(self.k(kv_input))
        v = self._split(self.v(kv_input))
        scores = q @ k.transpose(0, 1, 3, 2)
        probs, empty = ad.masked_softmax(scores, matrix)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, s, c)
        out = self.o(ctx)
        empty = np.broadcast_to(empty, (b, self._heads, s))[:, 0, :]
        if empty.any():
            out = out * Tensor((~empty)[..., None].astype(out.dtype))
        weights = probs.data.copy() if record else None
        return out, weights, empty


def multi_head_attention(query_input, kv_input, mask, params, record=False):
    """Single-sample convenience wrapper: [S, c] inputs, returns ([S, c], records)."""
    out, weights, empty = params(query_input.reshape(1, *query_input.shape),
                                 kv_input.reshape(1, *kv_input.shape), mask, record=record)
    records = []
    if record:
        kind = mask.kind if isinstance(mask, AttentionMask) else MaskKind.FULL
        records = [AttentionRecord(0, h, kind, weights[0, h]) for h in range(params.heads)]
    return out.reshape(out.shape[1:]), records


# -- attention dump ---------------------------------------------------------------------
ATTENTION_HEADER = "layer,head,kind,q_view,q_row,q_col,k_view,k_row,k_col,weight"


def token_coords(index, tokens_per_view):
    """Token index -> (view, row, col); tokens of a view fill a square grid row by row."""
    side = int(round(np.sqrt(tokens_per_view)))
    if side * side != tokens_per_view:
        side = tokens_per_view
    view, within = divmod(int(index), tokens_per_view)
    row, col = divmod(within, side)
    return view, row, col


def attention_csv_rows(records, tokens_per_view):
    """Yield CSV lines, one per nonzero weight, records in the given order."""
    for rec in records:
        w = np.asarray(rec.weights)
        coords = [token_coords(i, tokens_per_view) for i in range(max(w.shape))]
        kind = MaskKind(rec.kind).value
        for q, k in zip(*np.nonzero(w)):
            qv, qr, qc = coords[q]
            kv, kr, kc = coords[k]
            yield f"{rec.layer},{rec.head},{kind},{qv},{qr},{qc},{kv},{kr},{kc},{w[q, k]:.9g}"


def write_attention_csv(path, records, tokens_per_view):
    with open(path, "w") as f:
        f.write(ATTENTION_HEADER + "\n")
        for line in attention_csv_rows(records, tokens_per_view):
            f.write(line + "\n")


def read_attention_csv(path, views, tokens_per_view):
    """Inverse of :func:`write_attention_csv`: list of AttentionRecords with dense weights."""
    side = int(round(np.sqrt(tokens_per_view)))
    if side * side != tokens_per_view:
        side = tokens_per_view
    size = views * tokens_per_view
    out = {}
    with open(path) as f:
        header = f.readline().strip()
        if header != ATTENTION_HEADER:
            raise ContractError(f"{path}: unexpected header {header!r}")
        for line in f:
            layer, head, kind, qv, qr, qc, kv, kr, kc, weight = line.strip().split(",")
            key = (int(layer), int(head), MaskKind(kind))
            if key not in out:
                out[key] = np.zeros((size, size))
            q = int(qv) * tokens_per_view + int(qr) * side + int(qc)
            k = int(kv) * tokens_per_view + int(kr) * side + int(kc)
            out[key][q, k] = float(weight)
    return [AttentionRecord(layer, head, kind, w) for (layer, head, kind), w in out.items()]
