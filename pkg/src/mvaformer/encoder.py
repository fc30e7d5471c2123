"""
Shared toy video encoder and RoIAlign person-feature extraction.

RoIAlign is linear in the feature map, so each (box, map size) pair is turned
into a fixed [out*out, h*w] interpolation matrix and applied with a matmul.
Gradients reach the encoder through that matmul; boxes are constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .nn import LayerNorm, Linear, Module

ROI_SIZE = 7


class ToyVideoEncoder(Module):
    """
    Patch projection per frame, mean over frames, then one pointwise
    feed-forward block with a residual connection and a final LayerNorm,
    which puts features on the same scale as the position embeddings.

    Input videos are [U, T, H, W, 3]; output maps are [U, h*w, c] with
    h = H / patch, w = W / patch, rows in raster order.
    """

    def __init__(self, channels, patch, rng, hidden_mult=4, dtype=np.float32):
        self._patch = patch
        self.patch = Linear(patch * patch * 3, channels, rng, dtype)
        self.fc1 = Linear(channels, hidden_mult * channels, rng, dtype)
        self.fc2 = Linear(hidden_mult * channels, channels, rng, dtype)
        self.norm = LayerNorm(channels, dtype)

    def grid(self, height, width):
        p = self._patch
        if height % p or width % p:
            raise ConfigError(f"video {height}x{width} is not divisible by patch size {p}")
        return height // p, width // p

    def patches(self, videos):
        """[U, T, H, W, 3] -> [U, T, h*w, p*p*3] with (row, col, channel) patch order."""
        u, t, height, width, ch = videos.shape
        h, w = self.grid(height, width)
        p = self._patch
        x = videos.reshape(u, t, h, p, w, p, ch).transpose(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(u, t, h * w, p * p * ch)

    def __call__(self, videos, cells=None):
        """
        Encode [U, T, H, W, 3] videos to [U, h*w, c] maps.

        ``cells`` ([U, h*w] bool) optionally limits the work to the listed
        cells; every other cell comes back as zero.  The encoder is pointwise
        after patching, so listed cells are unaffected by the restriction.
        """
        videos = np.asarray(videos)
        if videos.ndim != 5 or videos.shape[-1] != 3:
            raise ShapeError(f"encoder expects [U, T, H, W, 3], got {videos.shape}")
        dtype = self.patch.weight.dtype
        # the projection is affine, so averaging patches over frames first
        # equals averaging the projected frames, at 1/T of the cost
        patches = self.patches(videos).mean(axis=1, dtype=np.float64).astype(dtype)
        if cells is None:
            return self._pointwise(Tensor(patches))
        u, hw, size = patches.shape
        cells = np.asarray(cells, dtype=bool).reshape(u * hw)
        picked = np.flatnonzero(cells)
        feats = self._pointwise(Tensor(patches.reshape(u * hw, size)[picked]))
        padded = ad.concat([feats, Tensor(np.zeros((1, feats.shape[-1]), dtype=dtype))], axis=0)
        lookup = np.full(u * hw, len(picked))
        lookup[picked] = np.arange(len(picked))
        return ad.take(padded, lookup).reshape(u, hw, feats.shape[-1])

    def _pointwise(self, tokens):
        x = self.patch(tokens)
        return self.norm(x + self.fc2(ad.gelu(self.fc1(x))))


# -- RoIAlign ------------------------------------------------------------------
MISSING = None


def _bilinear_weights(coords, size):
    """Per-sample (low index, high index, high weight) with edge clamping."""
    coords = np.clip(coords, 0.0, size - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    frac = coords - lo
    return lo, hi, frac


def _axis_matrix(start, stop, size, out, samples):
    """[out, size] averaging weights of ``samples`` bilinear taps per bin along one axis."""
    step = (stop - start) / out
    offsets = (np.arange(samples) + 0.5) / samples
    coords = start + (np.arange(out)[:, None] + offsets[None, :]) * step
    lo, hi, frac = _bilinear_weights(coords, size)
    mat = np.zeros((out, size))
    rows = np.repeat(np.arange(out), samples)
    np.add.at(mat, (rows, lo.ravel()), (1 - frac).ravel() / samples)
    np.add.at(mat, (rows, hi.ravel()), frac.ravel() / samples)
    return mat


def roi_align_matrix(height, width, box, out=ROI_SIZE, samples=2):
    """
    Interpolation matrix [out*out, height*width] for one normalized box.

    The box (x1, y1, x2, y2) in [0, 1] is scaled by (width - 1, height - 1),
    so 0 and 1 land on the centers of the first and last feature cells.  Each
    output bin averages ``samples x samples`` bilinear taps at sub-bin centers.
    Bilinear sampling is separable, so the matrix is a Kronecker product.
    """
    if box is MISSING:
        raise ContractError("roi_align called with a MISSING box; use extract_person_features")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1):
        raise ContractError(f"invalid box {box}")
    rows = _axis_matrix(y1 * (height - 1), y2 * (height - 1), height, out, samples)
    cols = _axis_matrix(x1 * (width - 1), x2 * (width - 1), width, out, samples)
    return np.kron(rows, cols)


def roi_align(feature_map, box, out=ROI_SIZE, samples=2):
    """Crop ``feature_map`` [h, w, c] (array or Tensor) to [out, out, c]."""
    fmap = feature_map if isinstance(feature_map, Tensor) else Tensor(np.asarray(feature_map))
    h, w, c = fmap.shape
    mat = Tensor(roi_align_matrix(h, w, box, out, samples).astype(fmap.dtype))
    return (mat @ fmap.reshape(h * w, c)).reshape(out, out, c)


# -- per-person extraction -------------------------------------------------------------
@dataclass
class PersonFeatureSet:
    """features [N, M, 7, 7, c]; missing [N, M] is True where the box was empty."""
    features: Tensor
    missing: np.ndarray


def extract_person_features(encoder, videos, clip_index, boxes):
    """
    Encode every view once with the shared encoder, then crop each person.

    Args:
        encoder: ToyVideoEncoder shared by all views.
        videos: [U, M, T, H, W, 3] distinct multi-view clips in the batch.
        clip_index: [N] index into ``U`` for each person.
        boxes: [N, M, 4] normalized boxes, NaN rows for missing views.
    """
    videos = np.asarray(videos)
    if videos.ndim != 6 or videos.shape[1] < 1:
        raise ContractError(f"need [U, M, T, H, W, 3] videos with M >= 1, got {videos.shape}")
    u, m = videos.shape[:2]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, m, 4)
    clip_index = np.asarray(clip_index, dtype=np.intp).reshape(-1)
    n = len(clip_index)
    if boxes.shape[0] != n:
        raise ShapeError(f"{n} clip indices vs {boxes.shape[0]} box rows")
    missing = np.isnan(boxes).any(axis=-1)
    h, w = encoder.grid(*videos.shape[3:5])
    dtype = encoder.patch.weight.dtype
    c = encoder.patch.weight.shape[1]
    if n == 0:
        return PersonFeatureSet(Tensor(np.zeros((0, m, ROI_SIZE, ROI_SIZE, c), dtype=dtype)), missing)
    rows = (clip_index[:, None] * m + np.arange(m)[None, :]).reshape(-1)
    mats = np.zeros((n * m, ROI_SIZE * ROI_SIZE, h * w), dtype=dtype)
    for i, box in enumerate(boxes.reshape(-1, 4)):
        if not np.isnan(box).any():
            mats[i] = roi_align_matrix(h, w, box)
    # only cells some crop samples from need encoding
    cells = np.zeros((u * m, h * w), dtype=bool)
    np.logical_or.at(cells, rows, mats.any(axis=1))
    maps = encoder(videos.reshape((u * m,) + videos.shape[2:]), cells)
    crops = Tensor(mats) @ ad.take(maps, rows)
    return PersonFeatureSet(crops.reshape(n, m, ROI_SIZE, ROI_SIZE, c), missing)
