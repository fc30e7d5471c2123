"""
Synthetic multi-view action benchmark.

Each scene is a unit arena with N moving discs filmed by M cameras.  With
axis corruption on, odd-indexed views see only horizontal motion and
even-indexed views only vertical motion; the other axis is replaced by the
person's static position plus jitter.  Motion classes:

    still | move-x | move-y | diagonal | anti-diagonal | oscillate-x | oscillate-y

Several pairs look the same from any single view.  A view observing x
cannot tell still from move-y, and no view alone separates diagonal from
anti-diagonal: that needs the direction seen in an x view compared with the
direction seen in a y view.

The last class, ``wave``, is an appearance label that may co-occur with any
motion: the disc flashes red on every other frame, otherwise persons are
gray.  Person intensity ramps up across each keyframe window, so the
direction of motion survives temporal averaging in the encoder.

Static per-view occluders zero out pixels; a person whose disc is at least
90% covered in a view gets a MISSING box there.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass, fields
from itertools import groupby

import numpy as np

from . import blobs, kv
from .errors import ConfigError, ContractError, FormatError, GenerationError, SplitError

MOTIONS = ("still", "move-x", "move-y", "diagonal", "anti-diagonal", "oscillate-x", "oscillate-y")
WAVE = "wave"
MISSING_COVERAGE = 0.9
GRAY = np.ones(3)
WAVE_TINT = np.array([1.0, 0.25, 0.25])
# persons stand in distinct cells of a 3x3 layout so their boxes barely overlap
SLOTS = tuple((x, y) for y in (0.2, 0.5, 0.8) for x in (0.2, 0.5, 0.8))
ANNOTATION_HEADER = ["clip_id", "keyframe", "view", "person_id", "x1", "y1", "x2", "y2", "action"]


@dataclass
class SceneConfig:
    seed: int = 0
    scenes: int = 50
    views: int = 4
    persons_min: int = 3
    persons_max: int = 5
    keyframes: int = 3
    frames: int = 8
    height: int = 64
    width: int = 64
    classes: int = 8
    occluders_min: int = 1
    occluders_max: int = 2
    occluder_size_min: float = 0.2
    occluder_size_max: float = 0.45
    axis_corruption: bool = True
    noise: float = 0.01
    pixel_noise: float = 0.02
    radius: float = 0.035
    amplitude: float = 0.09
    box_half: float = 0.14
    slot_jitter: float = 0.03
    wave_prob: float = 0.35

    def __post_init__(self):
        if not 2 <= self.classes <= len(MOTIONS) + 1:
            raise ConfigError(f"classes must lie in [2, {len(MOTIONS) + 1}], got {self.classes}")
        if self.views < 1 or self.frames < 1 or self.keyframes < 1 or self.scenes < 0:
            raise ConfigError("views, frames and keyframes must be positive")
        if not 0 <= self.persons_min <= self.persons_max <= len(SLOTS):
            raise ConfigError(f"need 0 <= persons_min <= persons_max <= {len(SLOTS)}")
        if not 0 <= self.occluders_min <= self.occluders_max:
            raise ConfigError("need 0 <= occluders_min <= occluders_max")
        if not 0 <= self.occluder_size_min <= self.occluder_size_max:
            raise ConfigError("need 0 <= occluder_size_min <= occluder_size_max")

    @property
    def class_names(self):
        return MOTIONS[: self.classes - 1] + (WAVE,)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class MultiViewClip:
    clip_id: str
    videos: np.ndarray  # [M, T, H, W, 3] in [0, 1]
    frames_per_keyframe: int

    def window(self, keyframe):
        f = self.frames_per_keyframe
        return self.videos[:, keyframe * f:(keyframe + 1) * f]


@dataclass(frozen=True)
class Annotation:
    clip_id: str
    keyframe: int
    view: int
    person_id: int
    box: tuple | None  # (x1, y1, x2, y2) normalized, None when MISSING
    actions: tuple


@dataclass
class PersonSample:
    clip_id: str
    keyframe: int
    person_id: int
    boxes: np.ndarray   # [M, 4], NaN rows where missing
    labels: np.ndarray  # [classes] in {0, 1}

    @property
    def person_key(self):
        return (self.clip_id, self.person_id)


# -- generation -------------------------------------------------------------------
def _trajectory(motion, tau, amp, sign, phase):
    ramp = 2 * tau - 1
    sweep = phase + sign * 1.5 * np.pi * tau
    zero = np.zeros_like(tau)
    if motion == "still":
        return zero, zero
    if motion == "move-x":
        return sign * amp * ramp, zero
    if motion == "move-y":
        return zero, sign * amp * ramp
    if motion == "diagonal":
        return sign * amp * ramp, sign * amp * ramp
    if motion == "anti-diagonal":
        return sign * amp * ramp, -sign * amp * ramp
    if motion == "oscillate-x":
        return amp * np.cos(sweep), zero
    if motion == "oscillate-y":
        return zero, amp * np.cos(sweep)
    raise ConfigError(f"unknown motion {motion!r}")


def _view_warps(config, rng):
    scale = rng.uniform(0.85, 0.95, size=config.views)
    shift = rng.uniform(-0.02, 0.02, size=(config.views, 2))
    return scale, shift


def _to_screen(config, view, x, y, cx, cy, jitter, scale, shift):
    """Arena trajectory -> (u, v) screen coordinates for one view."""
    if view % 2 == 1:
        a, b = x, (cy + jitter if config.axis_corruption else y)
    else:
        a, b = y, (cx + jitter if config.axis_corruption else x)
    if (view // 2) % 2 == 1:
        a = 1 - a
    off = (1 - scale[view]) / 2
    return off + shift[view, 0] + scale[view] * a, off + shift[view, 1] + scale[view] * b


def _disc(yy, xx, v, u, radius_px, height, width):
    dist = np.hypot(yy - v * (height - 1), xx - u * (width - 1))
    return np.clip(radius_px + 0.5 - dist, 0.0, 1.0)


def _occluders(config, rng):
    """Per view list of (x1, y1, x2, y2) rectangles; draws do not depend on sizes."""
    out = []
    for _ in range(config.views):
        count = rng.integers(config.occluders_min, config.occluders_max + 1)
        centers = rng.uniform(0, 1, size=(config.occluders_max, 2))
        sizes = rng.uniform(0, 1, size=(config.occluders_max, 2))
        sizes = config.occluder_size_min + sizes * (config.occluder_size_max - config.occluder_size_min)
        rects = [(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
                 for (cx, cy), (w, h) in zip(centers[:count], sizes[:count])]
        out.append(rects)
    return out


def _occlusion_mask(rects, height, width):
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    mask = np.zeros((height, width), dtype=bool)
    for x1, y1, x2, y2 in rects:
        mask |= ((ys[:, None] >= y1) & (ys[:, None] <= y2)) & ((xs[None, :] >= x1) & (xs[None, :] <= x2))
    return mask


def generate_scene(config, index):
    """Render scene ``index``; a pure function of (config, index)."""
    seed = int(config.seed)
    people_rng = np.random.default_rng([seed, index, 1])
    occ_rng = np.random.default_rng([seed, index, 2])
    view_rng = np.random.default_rng([seed, index, 3])
    noise_rng = np.random.default_rng([seed, index, 4])

    m, k_frames, f = config.views, config.keyframes, config.frames
    height, width = config.height, config.width
    names = config.class_names
    motions = names[:-1]

    occ = [_occlusion_mask(r, height, width) for r in _occluders(config, occ_rng)]
    if m and all(mask.all() for mask in occ):
        raise GenerationError("occluders cover the whole arena in every view")
    scale, shift = _view_warps(config, view_rng)

    n = int(people_rng.integers(config.persons_min, config.persons_max + 1))
    slots = np.asarray(SLOTS)[people_rng.permutation(len(SLOTS))[:n]]
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    radius_px = config.radius * (width - 1)
    tau = np.arange(f) / (f - 1) if f > 1 else np.full(1, 0.5)
    intensity = 0.35 + 0.65 * tau

    frames = np.zeros((m, k_frames * f, height, width, 3))
    annotations = []
    clip_id = f"scene{index:04d}"
    for kf in range(k_frames):
        centers = slots + people_rng.uniform(-config.slot_jitter, config.slot_jitter, size=slots.shape)
        people = []
        for p in range(n):
            motion = motions[int(people_rng.integers(len(motions)))]
            sign = people_rng.choice([-1.0, 1.0])
            phase = people_rng.uniform(0, 2 * np.pi)
            waving = bool(people_rng.random() < config.wave_prob)
            jitter = people_rng.normal(0, config.noise, size=(m, f))
            dx, dy = _trajectory(motion, tau, config.amplitude, sign, phase)
            labels = [names.index(motion)] + ([names.index(WAVE)] if waving else [])
            people.append((centers[p, 0] + dx, centers[p, 1] + dy, centers[p], jitter, waving, tuple(labels)))
        for view in range(m):
            window = frames[view, kf * f:(kf + 1) * f]
            for p, (x, y, (cx, cy), jitter, waving, labels) in enumerate(people):
                u, v = _to_screen(config, view, x, y, cx, cy, jitter[view], scale, shift)
                body_total = body_hidden = 0.0
                for t in range(f):
                    body = _disc(yy, xx, v[t], u[t], radius_px, height, width)
                    body_total += body.sum()
                    body_hidden += body[occ[view]].sum()
                    tint = WAVE_TINT if waving and t % 2 == 1 else GRAY
                    np.maximum(window[t], (body * intensity[t])[..., None] * tint, out=window[t])
                hidden = body_total > 0 and body_hidden / body_total >= MISSING_COVERAGE
                box = None
                if not hidden:
                    cu, cv, h = float(u.mean()), float(v.mean()), config.box_half
                    box = tuple(round(float(np.clip(z, 0, 1)), 6) for z in (cu - h, cv - h, cu + h, cv + h))
                annotations.append(Annotation(clip_id, kf, view, p, box, labels))
    if config.pixel_noise > 0:
        frames += noise_rng.normal(0, config.pixel_noise, size=frames.shape)
    frames = np.clip(frames, 0, 1)
    for view in range(m):
        frames[view][:, occ[view]] = 0.0
    videos = frames.astype(np.float32)
    return MultiViewClip(clip_id, videos, f), sorted(annotations, key=_annotation_key)


def _annotation_key(a):
    return (a.clip_id, a.keyframe, a.view, a.person_id)


class SyntheticDataset:
    def __init__(self, config, clips, annotations):
        self.config = config
        self.clips = clips
        self.annotations = sorted(annotations, key=_annotation_key)
        self._samples = None

    def __len__(self):
        return len(self.clips)

    def samples(self):
        """One PersonSample per (clip, keyframe, person), sorted."""
        if self._samples is None:
            self._samples = build_samples(self.annotations, self.config.views, self.config.classes)
        return self._samples

    def batch(self, samples, views=None):
        return make_batch(self.clips, samples, views)


def generate_dataset(config):
    clips, annotations = {}, []
    for i in range(config.scenes):
        clip, ann = generate_scene(config, i)
        clips[clip.clip_id] = clip
        annotations.extend(ann)
    return SyntheticDataset(config, clips, annotations)


def build_samples(annotations, views, classes):
    samples = []
    key = lambda a: (a.clip_id, a.keyframe, a.person_id)
    for (clip_id, kf, pid), group in groupby(sorted(annotations, key=key), key=key):
        boxes = np.full((views, 4), np.nan)
        labels = np.zeros(classes, dtype=np.float32)
        label_sets = set()
        for a in group:
            if a.box is not None:
                boxes[a.view] = a.box
            label_sets.add(tuple(sorted(a.actions)))
            labels[list(a.actions)] = 1.0
        if len(label_sets) > 1:
            raise FormatError(f"{clip_id} keyframe {kf} person {pid}: labels differ across views")
        samples.append(PersonSample(clip_id, kf, pid, boxes, labels))
    return samples


def make_batch(clips, samples, views=None):
    """
    Stack the keyframe windows needed by ``samples``.

    Returns (videos [U, M, F, H, W, 3], clip_index [B], boxes [B, M, 4], labels [B, C]).
    ``views`` optionally selects a subset of views (single-view models).
    """
    windows, index, keys = [], [], {}
    for s in samples:
        key = (s.clip_id, s.keyframe)
        if key not in keys:
            keys[key] = len(windows)
            windows.append(clips[s.clip_id].window(s.keyframe))
        index.append(keys[key])
    videos = np.stack(windows)
    boxes = np.stack([s.boxes for s in samples])
    labels = np.stack([s.labels for s in samples])
    if views is not None:
        videos, boxes = videos[:, views], boxes[:, views]
    return videos, np.asarray(index), boxes, labels


# -- annotation CSV ------------------------------------------------------------------
def _fmt(v):
    return f"{v:.6f}"


def write_annotations(path, annotations):
    """One row per (clip, keyframe, view, person, action); MISSING boxes are empty fields."""
    rows = []
    for a in sorted(annotations, key=_annotation_key):
        if not a.actions:
            raise ContractError(f"annotation without actions: {a}")
        coords = ["", "", "", ""] if a.box is None else [_fmt(v) for v in a.box]
        for action in sorted(a.actions):
            rows.append([a.clip_id, str(a.keyframe), str(a.view), str(a.person_id), *coords, str(action)])
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        writer.writerows(rows)


def read_annotations(path):
    with open(path, newline="") as f:
        text = f.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError(f"{path}: empty file, expected a header") from None
    if header != ANNOTATION_HEADER:
        raise FormatError(f"{path}:1: unexpected header {header}")
    parsed = {}
    for line, row in enumerate(reader, start=2):
        if len(row) != len(ANNOTATION_HEADER):
            raise FormatError(f"{path}:{line}: expected {len(ANNOTATION_HEADER)} fields, got {len(row)}")
        try:
            key = (row[0], int(row[1]), int(row[2]), int(row[3]))
            coords = row[4:8]
            if all(c == "" for c in coords):
                box = None
            else:
                box = tuple(float(c) for c in coords)
                if not (box[0] < box[2] and box[1] < box[3]):
                    raise ValueError(f"degenerate box {box}")
            action = int(row[8])
        except ValueError as exc:
            raise FormatError(f"{path}:{line}: {exc}") from None
        if key in parsed:
            prev_box, actions = parsed[key]
            if prev_box != box:
                raise FormatError(f"{path}:{line}: box disagrees with earlier row for {key}")
            actions.append(action)
        else:
            parsed[key] = (box, [action])
    return [Annotation(k[0], k[1], k[2], k[3], box, tuple(sorted(acts)))
            for k, (box, acts) in sorted(parsed.items())]


# -- split -----------------------------------------------------------------------------
def _imbalance(counts, totals, side, min_support):
    """Worst relative class-frequency gap between the two sides over supported classes."""
    tr = counts[side].sum(axis=0)
    ev = counts[~side].sum(axis=0)
    n_tr, n_ev = totals[side].sum(), totals[~side].sum()
    if n_tr == 0 or n_ev == 0:
        return np.inf
    p_tr, p_ev = tr / n_tr, ev / n_ev
    check = ev >= min_support
    if not check.any():
        return 0.0
    gap = np.abs(p_tr - p_ev) / np.maximum(np.maximum(p_tr, p_ev), 1e-12)
    return float(gap[check].max())


def split_dataset(samples, train_fraction=0.7, seed=0, tolerance=0.1, min_support=5, attempts=50):
    """
    Split samples so that every person lands on exactly one side.

    The class-frequency gap between sides must stay within ``tolerance``
    (relative) for classes with at least ``min_support`` eval instances.
    Seeds are retried; each attempt is refined by greedy person swaps.
    """
    persons = sorted({s.person_key for s in samples})
    if len(persons) < 2:
        raise ContractError("split needs at least two persons")
    pos = {p: i for i, p in enumerate(persons)}
    counts = np.zeros((len(persons), len(samples[0].labels)))
    totals = np.zeros(len(persons))
    for s in samples:
        counts[pos[s.person_key]] += s.labels
        totals[pos[s.person_key]] += 1
    n_train = min(max(int(round(train_fraction * len(persons))), 1), len(persons) - 1)

    best, best_score = None, np.inf
    for attempt in range(attempts):
        rng = np.random.default_rng([seed, attempt])
        side = np.zeros(len(persons), dtype=bool)
        side[rng.permutation(len(persons))[:n_train]] = True
        score = _imbalance(counts, totals, side, min_support)
        for _ in range(4 * len(persons)):
            if score <= tolerance:
                break
            i = rng.choice(np.flatnonzero(side))
            j = rng.choice(np.flatnonzero(~side))
            side[i], side[j] = False, True
            trial = _imbalance(counts, totals, side, min_support)
            if trial < score:
                score = trial
            else:
                side[i], side[j] = True, False
        if score < best_score:
            best, best_score = side.copy(), score
        if score <= tolerance:
            break
    train_persons = {p for p, s in zip(persons, best) if s}
    train = [s for s in samples if s.person_key in train_persons]
    evaluation = [s for s in samples if s.person_key not in train_persons]
    if best_score > tolerance:
        raise SplitError(f"best split has class-frequency gap {best_score:.3f} > {tolerance}",
                         best=(train, evaluation))
    return train, evaluation


# -- on-disk dataset -------------------------------------------------------------------
def save_dataset(dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for clip_id, clip in sorted(dataset.clips.items()):
        blobs.write_clip(os.path.join(out_dir, f"{clip_id}.mvaf"), clip.videos)
    write_annotations(os.path.join(out_dir, "annotations.csv"), dataset.annotations)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        for clip_id in sorted(dataset.clips):
            f.write(clip_id + "\n")
    kv.write_file(os.path.join(out_dir, "scene.cfg"), kv.dataclass_items(dataset.config))


def load_dataset(data_dir):
    path = os.path.join(data_dir, "scene.cfg")
    config = kv.dataclass_from_strings(SceneConfig, kv.read_file(path), path)
    with open(os.path.join(data_dir, "manifest.txt")) as f:
        clip_ids = [line.strip() for line in f if line.strip()]
    clips = {}
    for clip_id in clip_ids:
        videos = blobs.read_clip(os.path.join(data_dir, f"{clip_id}.mvaf"))
        if videos.shape[1] != config.keyframes * config.frames:
            raise FormatError(f"{clip_id}: {videos.shape[1]} frames, expected {config.keyframes * config.frames}")
        clips[clip_id] = MultiViewClip(clip_id, videos, config.frames)
    annotations = read_annotations(os.path.join(data_dir, "annotations.csv"))
    return SyntheticDataset(config, clips, annotations)
