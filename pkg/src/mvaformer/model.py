"""
MVAFormer head: flatten person crops, add position and view embeddings, run
the cooperation transformer, max-pool to a joint vector and classify.

Cooperation modes:

* ``sva_dva``  same-view and different-view attention in every layer
* ``vanilla``  one full self-attention per layer
* ``pooled``   average each view crop to one vector, self-attention over the
  M view vectors (an embedding-vector cooperation baseline)
"""
from __future__ import annotations

import enum
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import blobs, kv
from .autodiff import Tensor
from .encoder import ROI_SIZE, ToyVideoEncoder, extract_person_features
from .errors import ConfigError, ShapeError
from .nn import (AttentionRecord, FeedForward, LayerNorm, Linear, MaskKind, Module,
                 MultiHeadAttention, build_attention_mask)

TOKENS = ROI_SIZE * ROI_SIZE


class Mode(str, enum.Enum):
    SVA_DVA = "sva_dva"
    VANILLA_SELF = "vanilla"
    POOLED_VECTOR = "pooled"


class Combination(str, enum.Enum):
    PARALLEL_SUM = "parallel"
    SEQUENTIAL = "sequential"


@dataclass
class ModelConfig:
    views: int = 4
    classes: int = 8
    channels: int = 64
    patch: int = 16
    layers: int = 4
    heads: int = 4
    mode: Mode = Mode.SVA_DVA
    combination: Combination = Combination.PARALLEL_SUM
    dropout: float = 0.0
    mask_missing_views: bool = False
    ffn_mult: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.combination = Combination(self.combination)
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.views < 1 or self.classes < 1:
            raise ConfigError("views and classes must be positive")
        if self.channels % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.mode is not Mode.POOLED_VECTOR and self.channels % 4:
            raise ConfigError(f"channels must be divisible by 4 for 2-D sine embeddings, got {self.channels}")

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        d["combination"] = self.combination.value
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sinusoidal_position_embeddings(tokens=TOKENS, channels=64, dtype=np.float32):
    """
    Fixed 2-D sine table [tokens, channels] over a square grid.

    The first half of the channels encodes the row, the second half the
    column; inside each half channel ``2i`` is ``sin(pos / 10000**(2i/(c/2)))``
    and ``2i + 1`` the matching cosine.
    """
    if channels % 4:
        raise ConfigError(f"channels must be divisible by 4, got {channels}")
    side = int(round(np.sqrt(tokens)))
    if side * side != tokens:
        raise ConfigError(f"tokens must form a square grid, got {tokens}")
    half = channels // 2
    freqs = 10000.0 ** (2 * np.arange(half // 2) / half)
    rows, cols = np.divmod(np.arange(tokens), side)

    def encode(pos):
        ang = pos[:, None] / freqs[None, :]
        out = np.empty((len(pos), half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    return np.concatenate([encode(rows), encode(cols)], axis=1).astype(dtype)


def add_embeddings(flat, pe, view_embedding):
    """``flat + PE + VE_m``; ``view_embedding`` broadcasts over the tokens."""
    if flat.shape[-2:] != pe.shape or view_embedding.shape[-1] != flat.shape[-1]:
        raise ShapeError(f"embeddings: feature {flat.shape}, PE {pe.shape}, VE {view_embedding.shape}")
    pe = pe if isinstance(pe, Tensor) else Tensor(pe, dtype=flat.dtype)
    return flat + pe + view_embedding


class CooperationLayer(Module):
    """
    Post-norm transformer layer.

    sva_dva / parallel:   y = LN(x + SVA(x) + DVA(x));  z = LN(y + FFN(y))
    sva_dva / sequential: y = LN(x + SVA(x)); y' = LN(y + DVA(y)); z = LN(y' + FFN(y'))
    vanilla / pooled:     y = LN(x + Self(x));  z = LN(y + FFN(y))
    """

    def __init__(self, config, rng, dtype):
        c = config.channels
        self._divided = config.mode is Mode.SVA_DVA
        self._sequential = config.combination is Combination.SEQUENTIAL
        self._dropout = config.dropout
        if self._divided:
            self.sva = MultiHeadAttention(c, config.heads, rng, dtype)
            self.dva = MultiHeadAttention(c, config.heads, rng, dtype)
            if self._sequential:
                self.norm_sva = LayerNorm(c, dtype)
                self.norm_dva = LayerNorm(c, dtype)
            else:
                self.norm_attn = LayerNorm(c, dtype)
        else:
            setattr(self, "self", MultiHeadAttention(c, config.heads, rng, dtype))
            self.norm_attn = LayerNorm(c, dtype)
        self.ffn = FeedForward(c, rng, config.ffn_mult, dtype)
        self.norm_ffn = LayerNorm(c, dtype)

    def _drop(self, x, rng):
        return ad.dropout(x, self._dropout, rng, training=rng is not None)

    def __call__(self, x, masks, record=False, rng=None, views=1, hidden=None):
        """
        Args:
            x: [B, S, c] tokens, view-major.
            masks: MaskKind -> additive matrix, [S, S] or per sample [B, 1, S, S].
            views: number of views M in ``x``.
            hidden: optional bool [B, M], views whose keys are masked out.

        Returns:
            (z, {kind: weights [B, heads, S, S] or None})
        """
        weights = {}
        if self._divided:
            sva, weights[MaskKind.SVA] = self._same_view(x, masks, record, views, hidden)
            if self._sequential:
                y = self.norm_sva(x + self._drop(sva, rng))
                dva, weights[MaskKind.DVA], empty = self.dva(y, y, masks[MaskKind.DVA], record)
                h = y + self._drop(dva, rng) if not empty.all() else y
                y = self.norm_dva(h)
            else:
                dva, weights[MaskKind.DVA], empty = self.dva(x, x, masks[MaskKind.DVA], record)
                h = x + self._drop(sva, rng)
                # every DVA row is empty when M == 1: the sublayer contributes nothing
                if not empty.all():
                    h = h + self._drop(dva, rng)
                y = self.norm_attn(h)
        else:
            att, weights[MaskKind.FULL], _ = getattr(self, "self")(x, x, masks[MaskKind.FULL], record)
            y = self.norm_attn(x + self._drop(att, rng))
        z = self.norm_ffn(y + self._drop(self.ffn(y), rng))
        return z, weights

    def _same_view(self, x, masks, record, views, hidden):
        """
        SVA output and weights.  With several views the block-diagonal mask is
        exploited by attending within each view separately, which yields the
        same weights as the masked form at 1/M of the score cost.
        """
        if views == 1:
            out, w, _ = self.sva(x, x, masks[MaskKind.SVA], record)
            return out, w
        b, s, c = x.shape
        t = s // views
        blocks = x.reshape(b * views, t, c)
        key = None
        if hidden is not None and hidden.any():
            key = np.where(hidden.reshape(-1, 1, 1, 1), ad.masked_value(x.dtype), 0.0)
            key = np.broadcast_to(key, (b * views, 1, 1, t)).astype(x.dtype)
        out, w, _ = self.sva(blocks, blocks, key, record)
        if w is not None:
            w = w.reshape(b, views, w.shape[1], t, t)
            full = np.zeros((b, w.shape[2], s, s), dtype=w.dtype)
            for v in range(views):
                full[:, :, v * t:(v + 1) * t, v * t:(v + 1) * t] = w[:, v]
            w = full
        return out.reshape(b, s, c), w


class MVAFormer(Module):
    def __init__(self, config, seed=0):
        self._config = config
        dtype = np.dtype(config.dtype).type
        rng = np.random.default_rng(seed)
        c = config.channels
        self.encoder = ToyVideoEncoder(c, config.patch, rng, dtype=dtype)
        self.view_embedding = Tensor(np.zeros((config.views, c), dtype=dtype), requires_grad=True)
        self._layers = []
        for i in range(config.layers):
            layer = CooperationLayer(config, rng, dtype)
            setattr(self, f"layer{i}", layer)
            self._layers.append(layer)
        self.classifier = Linear(c, config.classes, rng, dtype)
        self._dtype = dtype
        if config.mode is Mode.POOLED_VECTOR:
            self._pe = None
        else:
            self._pe = Tensor(sinusoidal_position_embeddings(TOKENS, c, dtype))

    @property
    def config(self):
        return self._config

    @property
    def position_embedding(self):
        return self._pe

    # -- stages -----------------------------------------------------------------------
    def extract(self, videos, clip_index, boxes):
        return extract_person_features(self.encoder, videos, clip_index, boxes)

    def _masks(self, views, tokens, missing):
        kinds = (MaskKind.SVA, MaskKind.DVA) if self._config.mode is Mode.SVA_DVA else (MaskKind.FULL,)
        masks = {k: build_attention_mask(k, views, tokens, self._dtype).matrix for k in kinds}
        if self._config.mask_missing_views:
            hide = self._hidden_views(missing)
            if hide.any():
                key = np.where(np.repeat(hide, tokens, axis=1), ad.masked_value(self._dtype), 0.0)
                key = key.astype(self._dtype)[:, None, None, :]
                masks = {k: np.minimum(m[None, None], key) for k, m in masks.items()}
        return masks

    @staticmethod
    def _hidden_views(missing):
        # a person missing from every view keeps all views visible
        return missing & ~missing.all(axis=1, keepdims=True)

    def cooperation_forward(self, features, missing=None, record=False, rng=None):
        """
        Args:
            features: Tensor [B, M, 7, 7, c] (zeros where missing).
            missing: bool [B, M].

        Returns:
            (tokens [B, S, c], records) where S = M*49, or M in pooled mode;
            records[layer][kind] holds weights [B, heads, S, S] when recording.
        """
        b, m = features.shape[:2]
        c = self._config.channels
        if m != self._config.views or features.shape[-1] != c:
            raise ShapeError(f"features {features.shape} do not match {self._config.views} views x {c} channels")
        if missing is None:
            missing = np.zeros((b, m), dtype=bool)
        if self._config.mode is Mode.POOLED_VECTOR:
            x = features.reshape(b, m, TOKENS, c).mean(axis=2) + self.view_embedding
            tokens = 1
        else:
            flat = features.reshape(b, m, TOKENS, c)
            x = add_embeddings(flat, self._pe, self.view_embedding.reshape(1, m, 1, c))
            x = x.reshape(b, m * TOKENS, c)
            tokens = TOKENS
        masks = self._masks(m, tokens, missing)
        hidden = self._hidden_views(missing) if self._config.mask_missing_views else None
        records = []
        for layer in self._layers:
            x, weights = layer(x, masks, record, rng, m, hidden)
            records.append(weights)
        return x, records

    def joint_representation(self, tokens, missing=None):
        """Channelwise max over tokens: [B, S, c] -> [B, c]."""
        if self._config.mask_missing_views and missing is not None:
            hide = self._hidden_views(missing)
            if hide.any():
                per_view = tokens.shape[1] // hide.shape[1]
                drop = np.repeat(hide, per_view, axis=1)[..., None]
                tokens = tokens + Tensor(np.where(drop, ad.masked_value(self._dtype), 0.0).astype(self._dtype))
        return joint_representation(tokens)

    def classify(self, joint):
        return classify(joint, self.classifier)

    def forward_features(self, features, missing=None, record=False, rng=None):
        tokens, records = self.cooperation_forward(features, missing, record, rng)
        probs = self.classify(self.joint_representation(tokens, missing))
        return probs, records

    def forward(self, videos, clip_index, boxes, record=False, rng=None):
        """
        Per-person action probabilities.

        Args:
            videos: [U, M, T, H, W, 3]
            clip_index: [N] clip of each person
            boxes: [N, M, 4], NaN rows for missing views
            record: keep attention weights
            rng: dropout generator; ``None`` disables dropout

        Returns:
            (probabilities Tensor [N, classes], records)
        """
        feats = self.extract(videos, clip_index, boxes)
        return self.forward_features(feats.features, feats.missing, record, rng)

    def predict(self, videos, clip_index, boxes, threshold=0.5):
        with ad.no_grad():
            probs, _ = self.forward(videos, clip_index, boxes)
        return ActionPrediction(probs.data, probs.data >= threshold)


@dataclass
class ActionPrediction:
    probabilities: np.ndarray
    labels: np.ndarray


def joint_representation(tokens):
    """Channelwise maximum over the token axis (second to last)."""
    return ad.max_over_axis(tokens, axis=-2)


def classify(joint, classifier):
    """Per-class sigmoid probabilities of a joint vector [c] or batch [B, c]."""
    if joint.ndim == 1:
        return classify(joint.reshape(1, -1), classifier).reshape(-1)
    return ad.sigmoid(classifier(joint))


def attention_records(records, sample=0):
    """Flatten ``forward(record=True)`` output into per-head AttentionRecords of one sample."""
    out = []
    for layer, weights in enumerate(records):
        for kind, w in weights.items():
            if w is None:
                continue
            for head in range(w.shape[1]):
                out.append(AttentionRecord(layer, head, kind, w[sample, head]))
    return out


# -- checkpoints ----------------------------------------------------------------------
def config_path(checkpoint_path):
    """Sidecar holding the ModelConfig of a checkpoint: ``model.mvck`` -> ``model.cfg``."""
    return os.path.splitext(checkpoint_path)[0] + ".cfg"


def save_model(model, path):
    blobs.write_checkpoint(path, model.state_dict())
    kv.write_file(config_path(path), kv.dataclass_items(model.config))


def load_model(path):
    sidecar = config_path(path)
    config = kv.dataclass_from_strings(ModelConfig, kv.read_file(sidecar), sidecar)
    model = MVAFormer(config)
    model.load_state_dict(blobs.read_checkpoint(path))
    return model
