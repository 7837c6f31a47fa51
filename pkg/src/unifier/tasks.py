"""Task containers and the dense training targets derived from them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError


@dataclass
class ScenarioTask:
    """One step's samples, all from a single scenario."""

    index: int
    scenario: str
    samples: list
    split: str = "train"
    _targets: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        others = {s.scenario for s in self.samples} - {self.scenario}
        if others:
            raise ContractError(f"task {self.index} for {self.scenario} holds samples from {sorted(others)}")

    def __len__(self):
        return len(self.samples)

    @property
    def sample_ids(self):
        return [s.sample_id for s in self.samples]

    def targets(self, patch=8, image_size=32, n_classes=16, c_max=16):
        key = (patch, image_size, n_classes, c_max)
        if self._targets is None or self._targets["key"] != key:
            self._targets = encode_targets(self.samples, patch, image_size, n_classes, c_max)
            self._targets["key"] = key
        return self._targets


def encode_targets(samples, patch=8, image_size=32, n_classes=16, c_max=16):
    """Dense arrays for every head, computed from the object lists alone.

    Grounding targets assign each object to the token whose cell holds its box
    centre; offsets are the centre within the cell (relative to the cell
    middle, in cells) and log size in cells.
    """
    n = len(samples)
    grid = image_size // patch
    seq = grid * grid
    images = np.stack([s.image for s in samples]).astype(np.float64)
    count = np.zeros(n, dtype=np.int64)
    multilabel = np.zeros((n, n_classes))
    tf_class = np.zeros(n, dtype=np.int64)
    tf_answer = np.zeros(n)
    obj = np.zeros((n, seq))
    box = np.zeros((n, seq, 4))
    cls = np.zeros((n, seq), dtype=np.int64)
    for i, s in enumerate(samples):
        count[i] = min(len(s.objects), c_max)
        for o in s.objects:
            multilabel[i, o.class_id] = 1.0
        for q, answer in s.questions:
            if q.kind == "true_false":
                tf_class[i] = q.class_id
                tf_answer[i] = 1.0 if str(answer).strip().lower() == "yes" else 0.0
        for o in s.objects:
            cx, cy = (o.x1 + o.x2) / 2.0, (o.y1 + o.y2) / 2.0
            gx, gy = min(int(cx // patch), grid - 1), min(int(cy // patch), grid - 1)
            t = gy * grid + gx
            if obj[i, t]:
                continue
            obj[i, t] = 1.0
            w, h = max(o.x2 - o.x1, 1e-3), max(o.y2 - o.y1, 1e-3)
            box[i, t] = (cx / patch - gx - 0.5, cy / patch - gy - 0.5, np.log(w / patch), np.log(h / patch))
            cls[i, t] = o.class_id
    return {
        "images": images,
        "count": count,
        "multilabel": multilabel,
        "tf_class": tf_class,
        "tf_answer": tf_answer,
        "obj": obj,
        "box": box,
        "cls": cls,
    }


def subset_targets(targets, idx):
    return {k: v[idx] for k, v in targets.items() if k != "key"}
