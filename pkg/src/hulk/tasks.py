"""The eight tasks as modality translations, plus toy data generators.

Every generator is a pure function of its config: sample ``i`` of task ``t``
is drawn from ``default_rng([seed, task_index, i])``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .codecs import END_WORD, Modality, ModalitySample
from .translator import MaskRegime, PEScheme

JOINT_NAMES = (
    "nose", "left eye", "right eye", "left ear", "right ear",
    "left shoulder", "right shoulder", "left elbow", "right elbow",
    "left wrist", "right wrist", "left hip", "right hip",
    "left knee", "right knee", "left ankle", "right ankle",
)
PARSING_CLASSES = ("background", "hair", "face", "upper clothes", "pants", "arm", "leg", "shoes")
POSE2D_CLASSES = ("background",) + JOINT_NAMES
ATTRIBUTES = ("hat", "glasses", "backpack", "handbag", "long hair", "short sleeve",
              "skirt", "boots", "jacket", "logo", "umbrella", "scarf")
ACTIONS = ("wave left hand", "wave right hand", "jump", "squat", "walk", "clap")
DETECTION_CLASSES = ("pedestrian", "background")

COLORS = {"red": (1.0, 0.1, 0.1), "green": (0.1, 0.85, 0.1), "blue": (0.1, 0.2, 1.0),
          "yellow": (0.95, 0.9, 0.1), "white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0)}
TOPS = ("shirt", "jacket", "coat")
BOTTOMS = ("pants", "shorts", "skirt")
ITEMS = ("bag", "hat", "umbrella")
CAPTION_WORDS = ("a", "person", "walking", "wearing", "and", "with", *COLORS, *TOPS,
                 *BOTTOMS, *ITEMS, "long", "short", END_WORD)

# n_prime rules
N_EQUALS_INPUT = "input"
N_CLASSES = "classes"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    input_modality: Modality
    output_modality: Modality
    n_prime: Union[int, str]
    mask_regime: MaskRegime
    pe_scheme: PEScheme
    loss_id: str
    metric_id: str
    classes: Tuple[str, ...]
    coord_dim: int = 0
    pe_layout: Optional[Tuple[int, ...]] = None

    def resolve_n_prime(self, n_input_tokens: int) -> int:
        if self.n_prime == N_EQUALS_INPUT:
            return n_input_tokens
        if self.n_prime == N_CLASSES:
            return len(self.classes)
        return int(self.n_prime)


def task_registry() -> List[TaskSpec]:
    I, T, S, D = Modality.IMAGE, Modality.TEXT, Modality.SPARSE, Modality.DENSE
    M, P = MaskRegime, PEScheme
    return [
        TaskSpec("parsing", I, D, N_EQUALS_INPUT, M.DIAGONAL, P.INTERP2D, "parsing", "miou",
                 PARSING_CLASSES),
        TaskSpec("pose2d", I, D, N_EQUALS_INPUT, M.FULL, P.INTERP2D, "pose2d", "pck",
                 POSE2D_CLASSES),
        TaskSpec("attribute", I, T, N_CLASSES, M.DIAGONAL, P.INTERP2D, "attribute", "ma",
                 ATTRIBUTES),
        TaskSpec("caption", I, T, 40, M.CAUSAL_DIAGONAL, P.INTERP2D, "caption", "bleu4",
                 CAPTION_WORDS),
        TaskSpec("detection", I, S, 289, M.DIAGONAL, P.ANCHOR_GRID, "detection", "ap50",
                 DETECTION_CLASSES, coord_dim=4, pe_layout=(17, 17)),
        TaskSpec("pose3d", I, S, N_CLASSES, M.FULL, P.SUM3D, "pose3d", "mpjpe",
                 JOINT_NAMES, coord_dim=3, pe_layout=(3, 3, 2)),
        TaskSpec("mesh", I, S, 42, M.FULL, P.SUM3D, "mesh", "mpvpe", (), coord_dim=3,
                 pe_layout=(3, 3, 5)),
        TaskSpec("skeleton", S, T, N_CLASSES, M.DIAGONAL, P.INTERP2D, "skeleton", "accuracy",
                 ACTIONS),
    ]


TASK_NAMES = tuple(s.name for s in task_registry())


def get_task(name: str) -> TaskSpec:
    for s in task_registry():
        if s.name == name:
            return s
    raise KeyError(f"unknown task {name!r}; known: {', '.join(TASK_NAMES)}")


def all_words() -> List[str]:
    """Every whitespace word used by any task's class names or captions."""
    words = set()
    for spec in task_registry():
        for phrase in spec.classes:
            words.update(phrase.split())
    return sorted(words)


# -- dataset config --------------------------------------------------------------

_DEFAULT_HW = {"parsing": (64, 64), "pose2d": (64, 48), "attribute": (64, 48),
               "caption": (64, 48), "detection": (64, 64), "pose3d": (64, 64),
               "mesh": (64, 64)}


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    task: str
    n: int = 8
    seed: int = 0
    image_hw: Optional[Tuple[int, int]] = None
    joints: int = 17
    frames: int = 25
    max_boxes: int = 5
    grid: int = 8

    def __post_init__(self):
        if self.task not in TASK_NAMES:
            raise ValueError(f"unknown task {self.task!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        hw = self.image_hw or _DEFAULT_HW.get(self.task)
        object.__setattr__(self, "image_hw", None if hw is None else tuple(hw))
        if self.image_hw is not None:
            h, w = self.image_hw
            if h % self.grid or w % self.grid:
                raise ValueError(f"image size {h}x{w} must be divisible by {self.grid}")
            if min(h, w) < 2 * self.grid:
                raise ValueError("image too small for the generator grid")
        if self.joints != 17:
            raise ValueError("the toy skeleton has exactly 17 joints")
        if not 1 <= self.max_boxes <= 20:
            raise ValueError("max_boxes must be in 1..20")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")

    @classmethod
    def from_dict(cls, task: str, d: dict) -> "SyntheticDatasetConfig":
        d = dict(d)
        if "image_hw" in d and d["image_hw"] is not None:
            d["image_hw"] = tuple(d["image_hw"])
        return cls(task=task, **d)


def _rng(cfg: SyntheticDatasetConfig, i: int):
    return np.random.default_rng([cfg.seed, TASK_NAMES.index(cfg.task), i])


def _blob(h, w, x, y, sigma):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma ** 2))


def _palette(n):
    hues = np.arange(n) / n
    out = []
    for hue in hues:
        k = (np.array([5.0, 3.0, 1.0]) + hue * 6) % 6
        out.append(1 - np.clip(np.minimum(k, 4 - k), 0, 1))
    return np.asarray(out)


JOINT_COLORS = _palette(17)

# 2-D stick figure template, normalised to roughly [-1, 1] (x right, y down)
SKELETON_2D = np.array([
    [0.0, -0.85], [-0.08, -0.9], [0.08, -0.9], [-0.16, -0.85], [0.16, -0.85],
    [-0.3, -0.55], [0.3, -0.55], [-0.45, -0.2], [0.45, -0.2], [-0.5, 0.1], [0.5, 0.1],
    [-0.2, 0.1], [0.2, 0.1], [-0.22, 0.5], [0.22, 0.5], [-0.24, 0.9], [0.24, 0.9],
])
SKELETON_DEPTH = np.array([0.1, 0.08, 0.08, 0.0, 0.0, 0.0, 0.0, 0.1, 0.1, 0.2, 0.2,
                           0.0, 0.0, 0.05, 0.05, 0.0, 0.0])


# -- generators -------------------------------------------------------------------

def _gen_parsing(cfg, rng):
    h, w = cfg.image_hw
    g = cfg.grid
    colors = _palette(len(PARSING_CLASSES) - 1)
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(rng.integers(2, 5)):
        cls = int(rng.integers(1, len(PARSING_CLASSES)))
        y0 = int(rng.integers(0, h // g - 1)) * g
        x0 = int(rng.integers(0, w // g - 1)) * g
        y1 = y0 + int(rng.integers(2, h // g - y0 // g + 1)) * g
        x1 = x0 + int(rng.integers(2, w // g - x0 // g + 1)) * g
        labels[y0:y1, x0:x1] = cls
    img = np.full((3, h, w), 0.1)
    for c in range(1, len(PARSING_CLASSES)):
        img[:, labels == c] = colors[c - 1][:, None]
    img = np.clip(img + rng.normal(0, 0.03, img.shape), 0, 1)
    return ModalitySample(Modality.IMAGE, image=img), {"labels": labels}


def _gen_pose2d(cfg, rng):
    h, w = cfg.image_hw
    scale = rng.uniform(0.75, 0.95) * np.array([w, h]) / 2
    centre = np.array([w, h]) / 2 + rng.uniform(-0.05, 0.05, 2) * np.array([w, h])
    pts = SKELETON_2D + rng.normal(0, 0.05, SKELETON_2D.shape)
    joints = centre + pts * scale * 0.9
    joints = np.clip(joints, [1.0, 1.0], [w - 2.0, h - 2.0])
    img = np.zeros((3, h, w))
    for j, (x, y) in enumerate(joints):
        img += JOINT_COLORS[j][:, None, None] * _blob(h, w, x, y, 1.2)[None]
    img = np.clip(img, 0, 1)
    return ModalitySample(Modality.IMAGE, image=img), {"joints": joints}


_ATTR_SHAPES = ("square", "hollow", "cross", "bar_h", "bar_v", "diag")


def _draw_shape(img, kind, y, x, size, color):
    s = size
    patch = np.zeros((s, s), dtype=bool)
    if kind == "square":
        patch[2:-2, 2:-2] = True
    elif kind == "hollow":
        patch[1:-1, 1:-1] = True
        patch[4:-4, 4:-4] = False
    elif kind == "cross":
        patch[s // 2 - 2:s // 2 + 2, 1:-1] = True
        patch[1:-1, s // 2 - 2:s // 2 + 2] = True
    elif kind == "bar_h":
        patch[s // 2 - 3:s // 2 + 3, 1:-1] = True
    elif kind == "bar_v":
        patch[1:-1, s // 2 - 3:s // 2 + 3] = True
    else:
        idx = np.arange(1, s - 1)
        patch[idx, idx] = True
        patch[idx[:-1], idx[1:]] = True
        patch[idx[1:], idx[:-1]] = True
    img[:, y:y + s, x:x + s][:, patch] = np.asarray(color)[:, None]


def _gen_attribute(cfg, rng):
    h, w = cfg.image_hw
    n_attr = len(ATTRIBUTES)
    rows, cols = 4, 3
    cell_h, cell_w = h // rows, w // cols
    size = min(cell_h, cell_w)
    colors = _palette(n_attr)
    bits = rng.random(n_attr) < 0.5
    img = np.full((3, h, w), 0.15)
    for a in range(n_attr):
        if bits[a]:
            r, c = divmod(a, cols)
            _draw_shape(img, _ATTR_SHAPES[a % len(_ATTR_SHAPES)], r * cell_h, c * cell_w,
                        size, colors[a])
    img = np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)
    return ModalitySample(Modality.IMAGE, image=img), {"bits": bits.astype(np.int64)}


def _gen_caption(cfg, rng):
    h, w = cfg.image_hw
    names = list(COLORS)
    c1, c2 = (names[i] for i in rng.choice(len(names), 2, replace=False))
    top = TOPS[rng.integers(len(TOPS))]
    bottom = BOTTOMS[rng.integers(len(BOTTOMS))]
    length = ("long", "short")[rng.integers(2)]
    walking = bool(rng.integers(2))
    item = ITEMS[rng.integers(len(ITEMS))] if rng.random() < 0.6 else None

    img = np.full((3, h, w), 0.5)
    cx = w // 2
    torso_end = int(h * (0.62 if top == "coat" else 0.5))
    img[:, int(h * 0.18):torso_end, cx - w // 5:cx + w // 5] = np.array(COLORS[c1])[:, None, None]
    if top == "jacket":
        img[:, int(h * 0.18):torso_end, cx - 1:cx + 1] = 0.5
    leg_top = torso_end
    leg_end = int(h * (0.95 if length == "long" else 0.78))
    col2 = np.array(COLORS[c2])[:, None, None]
    if bottom == "skirt":
        img[:, leg_top:leg_end, cx - w // 4:cx + w // 4] = col2
    else:
        shift = 3 if walking else 0
        end = leg_end if bottom == "pants" else leg_top + (leg_end - leg_top) // 2
        img[:, leg_top:end, cx - w // 5 - shift:cx - 2 - shift] = col2
        img[:, leg_top:end, cx + 2 + shift:cx + w // 5 + shift] = col2
    if walking:
        img[:, h - 3:, :] = 0.3
    if item == "bag":
        img[:, int(h * 0.4):int(h * 0.55), 1:6] = np.array([0.45, 0.25, 0.05])[:, None, None]
    elif item == "hat":
        img[:, 0:int(h * 0.1), cx - 6:cx + 6] = np.array([0.3, 0.1, 0.5])[:, None, None]
    elif item == "umbrella":
        img[:, 1:4, 2:w - 2] = np.array([0.05, 0.5, 0.5])[:, None, None]
    img = np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)

    words = ["a", "person"] + (["walking"] if walking else []) + \
        ["wearing", "a", c1, top, "and", length, c2, bottom]
    if item:
        words += ["with", "a", item]
    return ModalitySample(Modality.IMAGE, image=img), {"caption": words}


def _iou_np(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _gen_detection(cfg, rng):
    h, w = cfg.image_hw
    k = int(rng.integers(1, cfg.max_boxes + 1))
    boxes = []
    tries = 0
    while len(boxes) < k and tries < 200:
        tries += 1
        bh = rng.uniform(0.25, 0.5)
        bw = bh * rng.uniform(0.35, 0.55) * h / w
        x1, y1 = rng.uniform(0, 1 - bw), rng.uniform(0, 1 - bh)
        b = np.array([x1, y1, x1 + bw, y1 + bh])
        if all(_iou_np(b, o) < 0.2 for o in boxes):
            boxes.append(b)
    boxes = np.asarray(boxes)
    img = np.clip(np.full((3, h, w), 0.1) + rng.normal(0, 0.03, (3, h, w)), 0, 1)
    yy, xx = (np.mgrid[0:h, 0:w] + 0.5)
    for b in boxes:
        inside = (xx >= b[0] * w) & (xx <= b[2] * w) & (yy >= b[1] * h) & (yy <= b[3] * h)
        col = rng.uniform(0.5, 1.0, 3)
        img[:, inside] = col[:, None]
        edge = inside & ((xx - b[0] * w < 1.5) | (b[2] * w - xx < 1.5) |
                         (yy - b[1] * h < 1.5) | (b[3] * h - yy < 1.5))
        img[:, edge] = 1.0
    return ModalitySample(Modality.IMAGE, image=img), {"boxes": boxes}


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _render_points(h, w, pts3d, colors, sigma=1.3):
    img = np.zeros((3, h, w))
    for (x, y, z), col in zip(pts3d, colors):
        px, py = (x + 1) / 2 * (w - 1), (y + 1) / 2 * (h - 1)
        bright = 0.6 + 0.4 * (1 - (z + 1) / 2)
        img += (np.asarray(col) * bright)[:, None, None] * _blob(h, w, px, py, sigma)[None]
    return np.clip(img, 0, 1)


def _gen_pose3d(cfg, rng):
    h, w = cfg.image_hw
    base = np.column_stack([SKELETON_2D, SKELETON_DEPTH])
    pts = base + rng.normal(0, 0.04, base.shape)
    pts = pts @ _rot_y(rng.uniform(-np.pi / 3, np.pi / 3)).T * rng.uniform(0.75, 0.95)
    pts = np.clip(pts, -0.98, 0.98)
    img = _render_points(h, w, pts, JOINT_COLORS)
    return ModalitySample(Modality.IMAGE, image=img), {"joints3d": pts}


def icosphere(subdivisions: int = 1):
    """Unit icosphere; one subdivision gives 42 vertices and 80 faces."""
    t = (1 + 5 ** 0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9),
             (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2),
             (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10),
             (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


ICO_VERTS, ICO_FACES = icosphere(1)


def _gen_mesh(cfg, rng):
    h, w = cfg.image_hw
    scale = rng.uniform(0.45, 0.8, 3)
    v = ICO_VERTS * scale
    v = v @ (_rot_y(rng.uniform(-np.pi, np.pi)) @ _rot_x(rng.uniform(-0.5, 0.5))).T
    v = v + rng.uniform(-0.1, 0.1, 3)
    v = np.clip(v, -0.98, 0.98)
    colors = (ICO_VERTS + 1) / 2
    img = _render_points(h, w, v, colors, sigma=1.0)
    return ModalitySample(Modality.IMAGE, image=img), {"vertices": v, "faces": ICO_FACES.copy()}


def _gen_skeleton(cfg, rng):
    T = cfg.frames
    action = int(rng.integers(len(ACTIONS)))
    t = np.arange(T) / T
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.7, 1.0)
    osc = np.sin(2 * np.pi * 2 * t + phase)
    seq = np.repeat(SKELETON_2D[None] * 0.8, T, axis=0)
    if action in (0, 1):
        side = (7, 9) if action == 0 else (8, 10)
        for j, a in zip(side, (0.3, 0.6)):
            seq[:, j, 1] += -a * amp * (0.5 + 0.5 * osc)
    elif action == 2:
        seq[:, :, 1] -= 0.25 * amp * np.abs(osc)[:, None]
    elif action == 3:
        dip = 0.3 * amp * (0.5 + 0.5 * osc)
        seq[:, :13, 1] += dip[:, None]
        seq[:, 13, 0] -= 0.5 * dip
        seq[:, 14, 0] += 0.5 * dip
    elif action == 4:
        seq[:, [13, 15], 0] += 0.15 * amp * osc[:, None]
        seq[:, [14, 16], 0] -= 0.15 * amp * osc[:, None]
        seq[:, :, 0] += (t - 0.5)[:, None] * 0.4
    else:
        close = 0.5 + 0.5 * osc
        seq[:, 9, 0] += 0.35 * amp * close
        seq[:, 10, 0] -= 0.35 * amp * close
        seq[:, 7, 0] += 0.15 * amp * close
        seq[:, 8, 0] -= 0.15 * amp * close
    seq = seq + rng.uniform(-0.1, 0.1, 2) + rng.normal(0, 0.01, seq.shape)
    seq = np.clip(seq, -1, 1)
    sample = ModalitySample(Modality.SPARSE, names=list(JOINT_NAMES), coords=seq)
    return sample, {"action": action}


_GENERATORS = {"parsing": _gen_parsing, "pose2d": _gen_pose2d, "attribute": _gen_attribute,
               "caption": _gen_caption, "detection": _gen_detection, "pose3d": _gen_pose3d,
               "mesh": _gen_mesh, "skeleton": _gen_skeleton}


def synth_generate(cfg: SyntheticDatasetConfig):
    """``cfg.n`` deterministic ``(input sample, ground-truth record)`` pairs."""
    gen = _GENERATORS[cfg.task]
    return [gen(cfg, _rng(cfg, i)) for i in range(cfg.n)]


# -- targets ------------------------------------------------------------------------

def gaussian_heatmaps(joints, h, w, sigma: float = 2.0) -> np.ndarray:
    return np.stack([_blob(h, w, x, y, sigma) for x, y in np.asarray(joints)])


def encode_targets(spec: TaskSpec, gt: dict, image_hw=None, vocab=None) -> dict:
    """Training targets for one ground-truth record (numpy arrays)."""
    name = spec.name
    if name == "parsing":
        labels = np.asarray(gt["labels"], dtype=np.int64)
        c = len(spec.classes)
        if labels.min() < 0 or labels.max() >= c:
            raise ValueError("parsing label out of range")
        onehot = (np.arange(c)[:, None, None] == labels[None]).astype(np.float64)
        return {"labels": labels, "onehot": onehot, "presence": onehot.any((1, 2))}
    if name == "pose2d":
        h, w = image_hw
        joints = np.asarray(gt["joints"], dtype=np.float64)
        if np.any(joints < 0) or np.any(joints[:, 0] > w - 1) or np.any(joints[:, 1] > h - 1):
            raise ValueError("joint coordinates outside the image")
        heat = gaussian_heatmaps(joints, h, w, 2.0)
        labels = np.where(heat.max(0) >= 0.5, heat.argmax(0) + 1, 0)
        presence = np.zeros(len(spec.classes), dtype=bool)
        presence[np.unique(labels)] = True
        return {"joints": joints, "heatmaps": heat, "labels": labels.astype(np.int64),
                "presence": presence}
    if name == "attribute":
        return {"bits": np.asarray(gt["bits"], dtype=np.int64)}
    if name == "caption":
        words = list(gt["caption"])
        if not words or words[-1] != END_WORD:
            words = words + [END_WORD]
        ids = [spec.classes.index(wd) if vocab is None else vocab.lookup(wd) for wd in words]
        return {"ids": np.asarray(ids, dtype=np.int64), "words": words}
    if name == "detection":
        boxes = np.asarray(gt["boxes"], dtype=np.float64).reshape(-1, 4)
        if np.any(boxes < 0) or np.any(boxes > 1):
            raise ValueError("box coordinates outside [0, 1]")
        return {"boxes": boxes, "classes": np.zeros(len(boxes), dtype=np.int64)}
    if name == "pose3d":
        j = np.asarray(gt["joints3d"], dtype=np.float64)
        if np.any(np.abs(j) > 1):
            raise ValueError("3-D joints outside [-1, 1]")
        return {"joints3d": j, "classes": np.arange(len(j), dtype=np.int64)}
    if name == "mesh":
        v = np.asarray(gt["vertices"], dtype=np.float64)
        if np.any(np.abs(v) > 1):
            raise ValueError("vertices outside [-1, 1]")
        return {"vertices": v, "faces": np.asarray(gt["faces"], dtype=np.int64)}
    if name == "skeleton":
        a = int(gt["action"])
        if not 0 <= a < len(spec.classes):
            raise ValueError("action id out of range")
        return {"action": a}
    raise KeyError(name)


# -- serialization --------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def dumps_sample(task: str, sample: ModalitySample, target: dict) -> str:
    rec = {"task": task, "input": sample.to_json(),
           "target": {k: _jsonable(v) for k, v in target.items()}}
    return json.dumps(rec, sort_keys=True)


_ARRAY_KEYS = {"labels", "joints", "bits", "boxes", "joints3d", "vertices", "faces"}


def loads_sample(line: str):
    rec = json.loads(line)
    target = {k: (np.asarray(v) if k in _ARRAY_KEYS else v) for k, v in rec["target"].items()}
    for k in ("joints", "boxes", "joints3d", "vertices"):
        if k in target:
            target[k] = target[k].astype(np.float64).reshape(-1, target[k].shape[-1]
                                                             if target[k].size else 4)
    return rec["task"], ModalitySample.from_json(rec["input"]), target


def save_dataset(path, task: str, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample, target in samples:
            fh.write(dumps_sample(task, sample, target) + "\n")


def load_dataset(path, task: Optional[str] = None):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                t, s, g = loads_sample(line)
                if task is not None and t != task:
                    raise ValueError(f"{path}: record for task {t!r}, expected {task!r}")
                out.append((s, g))
    return out
