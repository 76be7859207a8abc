"""Procedural multi-condition corpus.

Scenes are 1-3 flat-colored circles, squares and triangles on a flat
background, rendered without anti-aliasing. Each scene yields one target
image, one condition image of a given type, and a prompt over a small
synthetic vocabulary.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

SHAPES = ("circle", "square", "triangle")
PALETTE = np.array([
    [0.90, 0.10, 0.10],  # red
    [0.10, 0.75, 0.20],  # green
    [0.15, 0.25, 0.90],  # blue
    [0.95, 0.85, 0.10],  # yellow
    [0.60, 0.15, 0.75],  # purple
    [0.10, 0.80, 0.85],  # cyan
    [0.95, 0.55, 0.10],  # orange
    [0.85, 0.85, 0.85],  # light gray
])
COLORS = ("red", "green", "blue", "yellow", "purple", "cyan", "orange", "gray")
BACKGROUNDS = np.array([
    [0.05, 0.05, 0.05],
    [0.30, 0.20, 0.15],
    [0.10, 0.20, 0.30],
    [0.20, 0.30, 0.15],
])
SEG_PALETTE = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
])

CONDITION_TYPES = (
    "edge", "depth", "seg", "bbox", "blur", "grayscale", "inpainting", "outpainting",
    "pose", "hed", "hedsketch", "normal",
)
IMPLEMENTED_TYPES = CONDITION_TYPES[:8]

LUMA = (0.299, 0.587, 0.114)
EDGE_THRESHOLD = 0.1
BLUR_SIZE = 5

# vocabulary: 0 null, 1-3 counts, 4-11 colors, 12-14 shapes, 15 "on", 16-19 backgrounds
NULL, COUNT0, COLOR0, SHAPE0, ON, BG0 = 0, 1, 4, 12, 15, 16
VOCAB_USED = 20


@dataclass
class Shape:
    kind: str
    color: int
    center: tuple  # (row, col) in pixels
    radius: float


@dataclass
class SceneSpec:
    shapes: list = field(default_factory=list)
    background: int = 0
    seed: int = 0
    size: int = 16


def _inside(shape: Shape, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    cy, cx = shape.center
    r = shape.radius
    dy, dx = rows - cy, cols - cx
    if shape.kind == "circle":
        return dy * dy + dx * dx <= r * r
    if shape.kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape.kind == "triangle":
        # apex up at (cy - r, cx), base from (cy + r, cx - r) to (cy + r, cx + r)
        return (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    raise ValueError(f"unknown shape {shape.kind!r}")


def render_scene(spec: SceneSpec, with_labels: bool = False):
    """Rasterize at pixel centers; later shapes paint over earlier ones."""
    s = spec.size
    if len(spec.shapes) > 3:
        raise ValueError("a scene holds at most 3 shapes")
    img = np.empty((s, s, 3))
    img[:] = BACKGROUNDS[spec.background]
    labels = np.zeros((s, s), dtype=np.int64)
    rows, cols = np.mgrid[0:s, 0:s] + 0.5
    for i, sh in enumerate(spec.shapes, 1):
        cy, cx = sh.center
        if cy - sh.radius < 0 or cx - sh.radius < 0 or cy + sh.radius > s or cx + sh.radius > s:
            raise ValueError(f"shape {sh} leaves the {s}x{s} canvas")
        m = _inside(sh, rows, cols)
        img[m] = PALETTE[sh.color]
        labels[m] = i
    return (img, labels) if with_labels else img


def random_scene(rng: np.random.Generator, size: int = 16) -> SceneSpec:
    """1-3 shapes with distinct colors, kept one pixel off the border."""
    n = int(rng.integers(1, 4))
    colors = rng.choice(len(PALETTE), size=n, replace=False)
    shapes = []
    for c in colors:
        r = float(rng.integers(2, max(3, size // 4) + 1))
        lo, hi = 1 + r, size - 1 - r
        cy = float(rng.integers(int(np.ceil(lo)), int(np.floor(hi)) + 1))
        cx = float(rng.integers(int(np.ceil(lo)), int(np.floor(hi)) + 1))
        shapes.append(Shape(SHAPES[int(rng.integers(3))], int(c), (cy, cx), r))
    return SceneSpec(shapes, int(rng.integers(len(BACKGROUNDS))), 0, size)


def scene_prompt(spec: SceneSpec) -> list:
    ids = [COUNT0 + len(spec.shapes) - 1]
    for sh in spec.shapes:
        ids += [COLOR0 + sh.color, SHAPE0 + SHAPES.index(sh.kind)]
    return ids + [ON, BG0 + spec.background]


# ---------------------------------------------------------------------------
# condition surrogates; each maps (target, seed) -> condition image


def luma(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]


def _regions(target: np.ndarray) -> np.ndarray:
    """Label map: 0 for the background color (read at the corner), then one id
    per distinct foreground color in order of first raster appearance."""
    flat = target.reshape(-1, target.shape[-1])
    _, first, inverse = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    bg = inverse[0]
    order = [u for u in np.argsort(first) if u != bg]
    remap = np.zeros(len(first), dtype=np.int64)
    for rank, u in enumerate(order, 1):
        remap[u] = rank
    return remap[inverse].reshape(target.shape[:2])


def _edge(target, seed):
    y = luma(target)
    gy = np.zeros_like(y)
    gx = np.zeros_like(y)
    gy[:-1] = y[1:] - y[:-1]
    gx[:, :-1] = y[:, 1:] - y[:, :-1]
    e = (np.sqrt(gx * gx + gy * gy) > EDGE_THRESHOLD).astype(np.float64)
    return np.repeat(e[..., None], 3, axis=2)


def _depth(target, seed):
    lab = _regions(target)
    depth = np.zeros(lab.shape)
    for k in range(1, lab.max() + 1):
        m = lab == k
        # distance to the nearest pixel outside the region, 1 at the region edge
        depth[m] = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1][m]
    if depth.max() > 0:
        depth /= depth.max()
    return np.repeat(depth[..., None], 3, axis=2)


def _seg(target, seed):
    lab = _regions(target)
    out = np.zeros(target.shape)
    for k in range(1, lab.max() + 1):
        out[lab == k] = SEG_PALETTE[(k - 1) % len(SEG_PALETTE)]
    return out


def _bbox(target, seed):
    lab = _regions(target)
    out = np.zeros(target.shape)
    for k in range(1, lab.max() + 1):
        rr, cc = np.nonzero(lab == k)
        out[rr.min():rr.max() + 1, cc.min():cc.max() + 1] = SEG_PALETTE[(k - 1) % len(SEG_PALETTE)]
    return out


def _blur(target, seed):
    return ndimage.uniform_filter(target, size=(BLUR_SIZE, BLUR_SIZE, 1), mode="nearest")


def _grayscale(target, seed):
    return np.repeat(luma(target)[..., None], 3, axis=2)


def _inpainting(target, seed):
    H, W = target.shape[:2]
    rng = np.random.default_rng([seed, 0x1A])
    h = int(rng.integers(H // 4, H // 2 + 1))
    w = int(rng.integers(W // 4, W // 2 + 1))
    r0 = int(rng.integers(0, H - h + 1))
    c0 = int(rng.integers(0, W - w + 1))
    out = target.copy()
    out[r0:r0 + h, c0:c0 + w] = 0.0
    return out


def _outpainting(target, seed):
    H, W = target.shape[:2]
    mh, mw = H // 8, W // 8
    out = np.zeros_like(target)
    out[mh:H - mh, mw:W - mw] = target[mh:H - mh, mw:W - mw]
    return out


_GENERATORS = {
    "edge": _edge, "depth": _depth, "seg": _seg, "bbox": _bbox, "blur": _blur,
    "grayscale": _grayscale, "inpainting": _inpainting, "outpainting": _outpainting,
}


def register_condition(name: str, fn) -> None:
    """Attach a generator to one of the reserved type slots."""
    if name not in CONDITION_TYPES:
        raise ValueError(f"unknown condition type {name!r}")
    _GENERATORS[name] = fn


def resolve_type(name_or_id) -> int:
    if isinstance(name_or_id, str) and not name_or_id.isdigit():
        if name_or_id not in CONDITION_TYPES:
            raise ValueError(f"unknown condition type {name_or_id!r}; known: {CONDITION_TYPES}")
        return CONDITION_TYPES.index(name_or_id)
    tid = int(name_or_id)
    if not 0 <= tid < len(CONDITION_TYPES):
        raise ValueError(f"condition type id {tid} outside [0, {len(CONDITION_TYPES)})")
    return tid


def derive_condition(target: np.ndarray, type_id: int, seed: int = 0) -> np.ndarray:
    if not 0 <= type_id < len(CONDITION_TYPES):
        raise ValueError(f"unknown condition type id {type_id}")
    name = CONDITION_TYPES[type_id]
    fn = _GENERATORS.get(name)
    if fn is None:
        raise ValueError(f"condition type {name!r} has no registered generator")
    return np.clip(fn(np.asarray(target, dtype=np.float64), seed), 0.0, 1.0)


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Corpus:
    targets: np.ndarray  # [S, H, W, 3]
    conds: np.ndarray  # [S, H, W, 3]
    type_ids: np.ndarray  # [S]
    prompts: list
    n_types: int

    def __len__(self) -> int:
        return len(self.type_ids)

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx, dtype=np.int64)
        return Corpus(self.targets[idx], self.conds[idx], self.type_ids[idx],
                      [self.prompts[i] for i in idx], self.n_types)


def make_sample(seed: int, index: int, tid: int, size: int = 16):
    rng = np.random.default_rng([seed, index])
    spec = random_scene(rng, size)
    spec.seed = int(rng.integers(2**31))
    target = render_scene(spec)
    return target, derive_condition(target, tid, spec.seed), scene_prompt(spec)


def generate_corpus(n_per_type: int, seed: int, n_types: int = 8, size: int = 16) -> Corpus:
    """``n_per_type`` samples per type; sample k has type ``k % n_types`` and
    its own RNG stream keyed by ``(seed, k)``."""
    if n_per_type < 0:
        raise ValueError("n_per_type must be >= 0")
    if not 1 <= n_types <= len(IMPLEMENTED_TYPES):
        raise ValueError(f"n_types must lie in [1, {len(IMPLEMENTED_TYPES)}]")
    S = n_per_type * n_types
    targets = np.empty((S, size, size, 3))
    conds = np.empty((S, size, size, 3))
    tids = np.arange(S) % n_types
    prompts = []
    for k in range(S):
        targets[k], conds[k], p = make_sample(seed, k, int(tids[k]), size)
        prompts.append(p)
    # stored precision
    return Corpus(targets.astype(np.float32).astype(np.float64),
                  conds.astype(np.float32).astype(np.float64), tids, prompts, n_types)


MAGIC = "UNIGEN-DS v1"


def write_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    S, H, W, _ = corpus.targets.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"{MAGIC} {H} {W} {corpus.n_types} {S}\n".encode("ascii"))
            for k in range(S):
                p = corpus.prompts[k]
                fh.write(struct.pack(f"<ii{len(p)}i", int(corpus.type_ids[k]), len(p), *p))
                fh.write(corpus.targets[k].astype("<f4").tobytes())
                fh.write(corpus.conds[k].astype("<f4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def read_corpus(path) -> Corpus:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    nl = raw.index(b"\n")
    head = raw[:nl].decode("ascii").split()
    if " ".join(head[:2]) != MAGIC or len(head) != 6:
        raise ValueError(f"{path}: not a {MAGIC} file")
    H, W, n_types, S = map(int, head[2:])
    pos = nl + 1
    npx = H * W * 3
    targets = np.empty((S, H, W, 3))
    conds = np.empty((S, H, W, 3))
    tids = np.empty(S, dtype=np.int64)
    prompts = []
    for k in range(S):
        tids[k], L = struct.unpack_from("<ii", raw, pos)
        pos += 8
        prompts.append(list(struct.unpack_from(f"<{L}i", raw, pos)))
        pos += 4 * L
        targets[k] = np.frombuffer(raw, "<f4", npx, pos).reshape(H, W, 3)
        pos += 4 * npx
        conds[k] = np.frombuffer(raw, "<f4", npx, pos).reshape(H, W, 3)
        pos += 4 * npx
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return Corpus(targets, conds, tids, prompts, n_types)


def build_corpus(path, n_per_type: int, seed: int, n_types: int = 8, size: int = 16) -> Corpus:
    if n_per_type < 1:
        raise ValueError("n_per_type must be >= 1")
    corpus = generate_corpus(n_per_type, seed, n_types, size)
    write_corpus(corpus, path)
    return corpus
