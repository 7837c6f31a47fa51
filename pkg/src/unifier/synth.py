"""Deterministic synthetic scenes for four visually distinct scenarios.

Objects are filled shapes (4 shapes x 4 colours = 16 classes) drawn over a
scenario-specific background. Object centres fall in distinct 8x8 cells so
each cell holds at most one centre; larger objects still overlap their
neighbours. Ground-truth boxes are the exact raster extents of the drawn
masks, in pixel-edge coordinates.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError
from .metrics import BBox
from .vit import TaskDescriptor

logger = logging.getLogger(__name__)

IMAGE_SIZE = 32
CELL = 8
SHAPES = ("square", "circle", "triangle", "cross")
COLORS = {
    "red": (0.92, 0.16, 0.12),
    "green": (0.18, 0.82, 0.22),
    "blue": (0.18, 0.32, 0.96),
    "yellow": (0.96, 0.86, 0.12),
}
COLOR_NAMES = tuple(COLORS)
N_CLASSES = len(SHAPES) * len(COLORS)
SCENARIOS = ("S1", "S2", "S3", "S4")
SCENARIO_NAMES = {"S1": "high_altitude", "S2": "underwater", "S3": "low_altitude", "S4": "indoor"}


def class_id(shape, color):
    return SHAPES.index(shape) * len(COLORS) + COLOR_NAMES.index(color)


def class_name(cid):
    return f"{COLOR_NAMES[cid % len(COLORS)]} {SHAPES[cid // len(COLORS)]}"


@dataclass(frozen=True)
class SceneSpec:
    scenario: str
    count_range: tuple
    size_range: tuple
    background: str
    background_color: tuple
    noise_std: float
    occlusion_prob: float
    contrast: float
    blur: bool = False
    shape_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    color_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    fine_grounding: bool = True

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 1 or hi < lo or hi > (IMAGE_SIZE // CELL) ** 2:
            raise ConfigError(f"invalid count range {self.count_range}", field="count_range")
        slo, shi = self.size_range
        if slo < 1 or shi < slo or shi > IMAGE_SIZE:
            raise ConfigError(f"invalid size range {self.size_range}", field="size_range")

    @property
    def class_prior(self):
        w = np.outer(self.shape_weights, self.color_weights).reshape(-1)
        return w / w.sum()


DEFAULT_SPECS = {
    # many tiny objects on a dark mottled field
    "S1": SceneSpec(
        "S1", (4, 8), (3, 5), "mottled", (0.22, 0.28, 0.2), 0.06, 0.0, 1.0,
        shape_weights=(3, 1, 1, 3), color_weights=(2, 1, 1, 2),
    ),
    # few low-contrast blurred blobs in blue water
    "S2": SceneSpec(
        "S2", (1, 4), (6, 10), "gradient", (0.08, 0.3, 0.52), 0.03, 0.2, 0.55, blur=True,
        shape_weights=(1, 4, 1, 1), color_weights=(1, 2, 1, 2),
    ),
    # dense medium objects that may occlude each other on striped ground
    "S3": SceneSpec(
        "S3", (5, 8), (6, 10), "stripes", (0.52, 0.42, 0.3), 0.05, 0.6, 0.9,
        shape_weights=(3, 1, 3, 1), color_weights=(1, 2, 2, 1),
    ),
    # a few large objects on a bright indoor wall
    "S4": SceneSpec(
        "S4", (1, 3), (11, 16), "flat", (0.84, 0.8, 0.72), 0.02, 0.1, 1.0,
        shape_weights=(1, 1, 1, 1), color_weights=(1, 1, 1, 1), fine_grounding=False,
    ),
}


# neutral scenes for the shared pretraining stage; unlike every scenario above
PRETRAIN_SPEC = SceneSpec("S0", (1, 6), (4, 12), "flat", (0.5, 0.5, 0.5), 0.04, 0.1, 0.8)


@dataclass
class SynthSample:
    sample_id: str
    scenario: str
    image: np.ndarray
    objects: list
    questions: list = field(default_factory=list)
    seed: int = 0

    @property
    def classes(self):
        return sorted({o.class_id for o in self.objects})


# ---------------------------------------------------------------------------
# rendering


def _background(spec, rng):
    base = np.asarray(spec.background_color, dtype=np.float64)
    img = np.broadcast_to(base, (IMAGE_SIZE, IMAGE_SIZE, 3)).copy()
    ys = np.arange(IMAGE_SIZE)[:, None, None] / (IMAGE_SIZE - 1)
    if spec.background == "mottled":
        coarse = rng.normal(0.0, 0.08, size=(IMAGE_SIZE // 4, IMAGE_SIZE // 4, 1))
        img = img + np.kron(coarse, np.ones((4, 4, 1)))
    elif spec.background == "gradient":
        img = img + (0.25 * (1.0 - ys)) * np.array([0.2, 0.6, 0.8])
    elif spec.background == "stripes":
        phase = rng.integers(0, 6)
        stripes = ((np.arange(IMAGE_SIZE) + phase) // 3 % 2)[:, None, None]
        img = img + 0.08 * stripes
    elif spec.background != "flat":
        raise ConfigError(f"unknown background {spec.background!r}", field="background")
    return img


def _shape_mask(shape, cx, cy, size):
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    dx, dy = x - cx, y - cy
    half = size / 2.0
    if shape == "square":
        mask = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif shape == "circle":
        mask = dx * dx + dy * dy <= half * half
    elif shape == "triangle":
        depth = (dy + half) / size  # 0 at apex, 1 at base
        mask = (depth >= 0) & (depth <= 1) & (np.abs(dx) <= half * depth)
    elif shape == "cross":
        arm = max(size / 6.0, 0.5)
        mask = (np.abs(dx) <= half) & (np.abs(dy) <= half) & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    else:
        raise ConfigError(f"unknown shape {shape!r}", field="shape")
    if not mask.any():
        mask[min(int(cy), IMAGE_SIZE - 1), min(int(cx), IMAGE_SIZE - 1)] = True
    return mask


def _extent(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def _overlaps(box, boxes):
    return any(box[0] < b[2] and b[0] < box[2] and box[1] < b[3] and b[1] < box[3] for b in boxes)


def _blur(img):
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + IMAGE_SIZE, dx : dx + IMAGE_SIZE]
    return out / 9.0


def render_scene(spec, seed, max_retries=20):
    """Render one scene; returns ``(image, objects)`` or ``None`` if placement failed.

    ``objects`` is a list of ``BBox`` with ``class_id`` set.
    """
    rng = np.random.default_rng(seed)
    img = _background(spec, rng)
    bg_mean = img.mean(axis=(0, 1))
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    grid = IMAGE_SIZE // CELL
    free_cells = list(rng.permutation(grid * grid))
    prior = spec.class_prior
    objects, boxes = [], []
    for _ in range(n):
        cid = int(rng.choice(N_CLASSES, p=prior))
        shape = SHAPES[cid // len(COLORS)]
        color = np.asarray(COLORS[COLOR_NAMES[cid % len(COLORS)]])
        may_occlude = rng.random() < spec.occlusion_prob
        placed = None
        for _attempt in range(max_retries):
            if not free_cells:
                break
            cell = free_cells[int(rng.integers(0, len(free_cells)))]
            gy, gx = divmod(int(cell), grid)
            size = float(rng.uniform(spec.size_range[0], spec.size_range[1]))
            cx = (gx + rng.uniform(0.15, 0.85)) * CELL
            cy = (gy + rng.uniform(0.15, 0.85)) * CELL
            mask = _shape_mask(shape, cx, cy, size)
            box = _extent(mask)
            centre_cell = (int((box[1] + box[3]) / 2 // CELL), int((box[0] + box[2]) / 2 // CELL))
            if centre_cell != (gy, gx):
                continue
            if not may_occlude and _overlaps(box, boxes):
                continue
            placed = (cell, mask, box)
            break
        if placed is None:
            logger.info("scene %s seed %d: placement failed, sample skipped", spec.scenario, seed)
            return None
        cell, mask, box = placed
        free_cells.remove(cell)
        paint = bg_mean + spec.contrast * (color - bg_mean)
        img[mask] = paint
        boxes.append(box)
        objects.append(BBox(*box, class_id=cid))
    if spec.blur:
        img = _blur(img)
    img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0), objects


def make_questions(sample, index, spec=None, seed=0):
    """One question of each applicable kind, with answers derived from the object list.

    True/false alternates: even ``index`` asks about a present class, odd about
    an absent one.
    """
    rng = np.random.default_rng([seed, index, 7])
    present = sample.classes
    absent = [c for c in range(N_CLASSES) if c not in present]
    questions = [
        (TaskDescriptor("count"), len(sample.objects)),
        (TaskDescriptor("classification"), list(present)),
    ]
    if index % 2 == 0 or not absent:
        cid = int(present[int(rng.integers(0, len(present)))])
        questions.append((TaskDescriptor("true_false", cid), "yes"))
    else:
        cid = int(absent[int(rng.integers(0, len(absent)))])
        questions.append((TaskDescriptor("true_false", cid), "no"))
    boxes = [[o.x1, o.y1, o.x2, o.y2, o.class_id] for o in sample.objects]
    questions.append((TaskDescriptor("grounding"), boxes))
    if spec is None or spec.fine_grounding:
        target = int(present[int(rng.integers(0, len(present)))])
        questions.append((TaskDescriptor("fine_grounding", target), [b for b in boxes if b[4] == target]))
    return questions


def sample_seed(master_seed, scenario, split, index):
    """Counter-mode per-sample seed derived from (master seed, scenario, split, index)."""
    s_idx = SCENARIOS.index(scenario) if scenario in SCENARIOS else int(hashlib.sha256(scenario.encode()).hexdigest()[:8], 16)
    state = np.random.SeedSequence([int(master_seed), s_idx, int(split), int(index)]).generate_state(2, np.uint64)
    return int(state[0] >> np.uint64(1))


def generate_samples(scenario, n, seed, split, spec=None):
    spec = spec or DEFAULT_SPECS[scenario]
    samples = []
    index = 0
    while len(samples) < n:
        s = sample_seed(seed, scenario, split, index)
        rendered = render_scene(spec, s)
        if rendered is not None:
            image, objects = rendered
            sample = SynthSample(
                sample_id=f"{scenario}-{'train' if split == 0 else 'test'}-{index:05d}",
                scenario=scenario,
                image=image,
                objects=objects,
                seed=s,
            )
            sample.questions = make_questions(sample, len(samples), spec, seed=s)
            samples.append(sample)
        index += 1
    return samples


def generate_dataset(scenario, n_train, n_test, seed, spec=None):
    """Train and test ``ScenarioTask``s for one scenario; image-disjoint by seed range."""
    from .tasks import ScenarioTask

    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must be >= 1", field="n_train" if n_train < 1 else "n_test")
    train = ScenarioTask(0, scenario, generate_samples(scenario, n_train, seed, 0, spec), "train")
    test = ScenarioTask(0, scenario, generate_samples(scenario, n_test, seed, 1, spec), "test")
    return train, test


# ---------------------------------------------------------------------------
# JSON-lines persistence


def sample_to_record(sample):
    img = np.ascontiguousarray(sample.image, dtype="<f8")
    return {
        "sample_id": sample.sample_id,
        "scenario": sample.scenario,
        "seed": sample.seed,
        "image": {
            "encoding": "base64-float64-le",
            "shape": list(img.shape),
            "data": base64.b64encode(img.tobytes()).decode("ascii"),
        },
        "objects": [[o.x1, o.y1, o.x2, o.y2, o.class_id] for o in sample.objects],
        "questions": [
            {"kind": q.kind, "class_id": q.class_id, "answer": a} for q, a in sample.questions
        ],
    }


def sample_from_record(rec):
    meta = rec["image"]
    if meta.get("encoding") != "base64-float64-le":
        raise ConfigError(f"unsupported image encoding {meta.get('encoding')!r}", field="image.encoding")
    image = np.frombuffer(base64.b64decode(meta["data"]), dtype="<f8").reshape(meta["shape"]).astype(np.float64)
    objects = [BBox(*map(float, o[:4]), class_id=int(o[4])) for o in rec["objects"]]
    questions = [(TaskDescriptor(q["kind"], q.get("class_id")), q["answer"]) for q in rec["questions"]]
    return SynthSample(rec["sample_id"], rec["scenario"], image, objects, questions, int(rec.get("seed", 0)))


def write_jsonl(samples, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), sort_keys=True, separators=(",", ":")) + "\n")
    return path


def read_jsonl(path):
    with Path(path).open(encoding="utf-8") as fh:
        return [sample_from_record(json.loads(line)) for line in fh if line.strip()]


def dataset_checksum(samples):
    h = hashlib.sha256()
    for s in samples:
        h.update(json.dumps(sample_to_record(s), sort_keys=True, separators=(",", ":")).encode())
    return h.hexdigest()
