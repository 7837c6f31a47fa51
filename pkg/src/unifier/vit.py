"""Toy pre-norm vision transformer with a CSR hook in every block, and the
task-conditioned heads that stand in for a language decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gelu, no_grad, sigmoid, softmax, tensor_init
from .csr import CsrModule
from .exceptions import ConfigError, ShapeError
from .layers import LayerNorm, Linear, Module, child_seed

QUESTION_KINDS = ("count", "classification", "true_false", "grounding", "fine_grounding")
HEAD_FOR_KIND = {
    "count": "count",
    "classification": "multilabel",
    "true_false": "binary",
    "grounding": "grounding",
    "fine_grounding": "grounding",
}


@dataclass(frozen=True)
class TaskDescriptor:
    """Structured question: a kind plus an optional class id for class-conditioned kinds."""

    kind: str
    class_id: int | None = None

    def __post_init__(self):
        if self.kind not in HEAD_FOR_KIND:
            raise ConfigError(f"unknown question kind {self.kind!r}", field="kind")

    @property
    def head(self):
        return HEAD_FOR_KIND[self.kind]


def patchify(images, patch):
    """Rearrange ``[B, H, W, C]`` pixels into ``[B, seq, patch*patch*C]`` row-major patches."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


class PatchEmbed(Module):
    def __init__(self, image_size, patch, channels, d1, rng):
        self._patch = patch
        self._image_size = image_size
        seq = (image_size // patch) ** 2
        self.proj = Linear(patch * patch * channels, d1, rng, std=0.02)
        self.pos = tensor_init((seq, d1), "normal", seed=child_seed(rng), std=0.02, requires_grad=True)

    def __call__(self, images):
        x = Tensor(patchify(images, self._patch))
        if x.shape[-2] != self.pos.shape[0]:
            raise ShapeError(f"expected {self.pos.shape[0]} patches, got {x.shape[-2]}")
        return self.proj(x) + self.pos


class Attention(Module):
    def __init__(self, d1, heads, rng):
        if d1 % heads:
            raise ConfigError(f"heads={heads} must divide d1={d1}", field="heads")
        self._heads = heads
        self.q = Linear(d1, d1, rng)
        self.k = Linear(d1, d1, rng)
        self.v = Linear(d1, d1, rng)
        self.out = Linear(d1, d1, rng)
        self._last_weights = None

    def __call__(self, x):
        *lead, seq, d1 = x.shape
        h = self._heads
        dh = d1 // h

        def split(t):
            return t.reshape(*lead, seq, h, dh).swapaxes(-2, -3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        weights = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
        self._last_weights = weights.data
        ctx = (weights @ v).swapaxes(-2, -3).reshape(*lead, seq, d1)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d1, hidden, rng):
        self.fc1 = Linear(d1, hidden, rng)
        self.fc2 = Linear(hidden, d1, rng)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class VisionBlock(Module):
    """Pre-norm attention + FFN; the CSR module runs in parallel with the FFN."""

    def __init__(self, d1, heads, hidden, rng, csr=None):
        self.ln1 = LayerNorm(d1)
        self.attn = Attention(d1, heads, rng)
        self.ln2 = LayerNorm(d1)
        self.ffn = FeedForward(d1, hidden, rng)
        self.csr = csr

    @property
    def width(self):
        return self.ln1.gain.shape[0]

    def backbone_parameters(self):
        return self.ln1.parameters() + self.attn.parameters() + self.ln2.parameters() + self.ffn.parameters()


def attention_forward(r_prev, block):
    """``a = A(LN(r_prev)) + r_prev``."""
    if r_prev.shape[-1] != block.width:
        raise ShapeError(f"block width {block.width} does not match input {list(r_prev.shape)}")
    return block.attn(block.ln1(r_prev)) + r_prev


def block_forward(a, block, p=None, literal=False):
    """``r = s(LN(a)) + a + p``; with ``literal`` the residual ``a`` is dropped."""
    if p is not None and p.shape != a.shape:
        raise ShapeError(f"CSR output {list(p.shape)} does not match {list(a.shape)}")
    r = block.ffn(block.ln2(a))
    if not literal:
        r = r + a
    if p is not None:
        r = r + p
    return r


@dataclass
class LayerTrace:
    a: Tensor
    p: Tensor | None
    r: Tensor
    branch_outputs: list


class VisionEncoder(Module):
    """Patch embedding followed by ``depth`` vision blocks."""

    def __init__(
        self,
        image_size=32,
        patch=8,
        channels=3,
        d1=64,
        depth=4,
        heads=4,
        hidden=128,
        d2=16,
        use_csr=True,
        literal_eq4=False,
        activation="gelu",
        branch_up_std=0.02,
        seed=0,
    ):
        if depth < 1:
            raise ConfigError("depth must be >= 1", field="depth")
        rng = np.random.default_rng(seed)
        self.embed = PatchEmbed(image_size, patch, channels, d1, rng)
        self.blocks = [
            VisionBlock(
                d1,
                heads,
                hidden,
                rng,
                csr=CsrModule(d1, d2, activation=activation, branch_up_std=branch_up_std) if use_csr else None,
            )
            for _ in range(depth)
        ]
        self._d1 = d1
        self._literal = literal_eq4

    @property
    def d1(self):
        return self._d1

    @property
    def depth(self):
        return len(self.blocks)

    @property
    def seq(self):
        return self.embed.pos.shape[0]

    @property
    def csr_modules(self):
        return [b.csr for b in self.blocks if b.csr is not None]

    def backbone_parameters(self):
        params = self.embed.parameters()
        for b in self.blocks:
            params += b.backbone_parameters()
        return params

    def __call__(self, images):
        return encoder_forward(self, images)[-1]


def encoder_forward(encoder, images):
    """Run every block; returns ``(traces, r_L)`` with one ``LayerTrace`` per block."""
    r = encoder.embed(images)
    traces = []
    for block in encoder.blocks:
        a = attention_forward(r, block)
        p, outs = (None, [])
        if block.csr is not None and block.csr.K > 0:
            p, outs = block.csr(a)
        r = block_forward(a, block, p, literal=encoder._literal)
        traces.append(LayerTrace(a=a, p=p, r=r, branch_outputs=outs))
    return traces, r


# ---------------------------------------------------------------------------
# heads


class TaskHeads(Module):
    """Readouts for count / multilabel / binary / grounding questions.

    Grounding predicts one box per token: an objectness logit, four box
    offsets relative to the token's cell and class logits.
    """

    def __init__(self, d1, n_classes=16, c_max=16, patch=8, image_size=32, binary_hidden=64, seed=0):
        rng = np.random.default_rng(seed)
        self.norm = LayerNorm(d1)
        self.count = Linear(d1, c_max + 1, rng)
        self.multilabel = Linear(d1, n_classes, rng)
        self.class_embed = tensor_init((n_classes, d1), "normal", seed=child_seed(rng), std=0.5, requires_grad=True)
        self.binary_hidden = Linear(d1, binary_hidden, rng, std=0.1)
        self.binary_out = Linear(binary_hidden, 1, rng)
        self.grounding = Linear(d1, 5 + n_classes, rng)
        self._n_classes = n_classes
        self._c_max = c_max
        self._patch = patch
        self._image_size = image_size

    @property
    def n_classes(self):
        return self._n_classes

    @property
    def c_max(self):
        return self._c_max

    def logits(self, r, class_ids=None):
        """All head logits for a batch of final representations ``r`` ``[B, seq, d1]``."""
        h = self.norm(r)
        pooled = h.mean(axis=-2)
        out = {
            "count": self.count(pooled),
            "multilabel": self.multilabel(pooled),
            "grounding": self.grounding(h),
        }
        if class_ids is not None:
            cond = pooled + self.class_embed[np.asarray(class_ids, dtype=np.int64)]
            out["binary"] = self.binary_out(gelu(self.binary_hidden(cond))).reshape(-1)
        return out

    def decode_boxes(self, grounding_logits):
        """Map per-token outputs ``[..., seq, 5+C]`` to pixel boxes, confidences and classes."""
        g = np.asarray(grounding_logits)
        seq = g.shape[-2]
        side = int(round(math.sqrt(seq)))
        gy, gx = np.divmod(np.arange(seq), side)
        cell = self._patch
        cx = (gx + 0.5 + g[..., 1]) * cell
        cy = (gy + 0.5 + g[..., 2]) * cell
        w = cell * np.exp(np.clip(g[..., 3], -4.0, 3.0))
        h = cell * np.exp(np.clip(g[..., 4], -4.0, 3.0))
        size = float(self._image_size)
        boxes = np.stack(
            [
                np.clip(cx - w / 2, 0.0, size),
                np.clip(cy - h / 2, 0.0, size),
                np.clip(cx + w / 2, 0.0, size),
                np.clip(cy + h / 2, 0.0, size),
            ],
            axis=-1,
        )
        conf = 0.5 * (1.0 + np.tanh(0.5 * g[..., 0]))
        cls = g[..., 5:].argmax(axis=-1)
        return boxes, conf, cls


def head_forward(heads, r, question, threshold=0.5):
    """Answer one question from a single final representation ``r`` ``[seq, d1]``.

    count -> probabilities over 0..C_max; classification -> per-class
    probabilities; true_false -> probability; grounding kinds -> list of
    ``(box, class, confidence)`` whose confidence exceeds ``threshold``.
    """
    if question.kind not in HEAD_FOR_KIND:
        raise ConfigError(f"unknown head kind {question.kind!r}", field="kind")
    if r.ndim == 2:
        r = r.reshape(1, *r.shape)
    class_ids = None
    if question.head == "binary":
        if question.class_id is None:
            raise ConfigError("true_false questions need a class id", field="class_id")
        class_ids = [question.class_id]
    with no_grad():
        out = heads.logits(r, class_ids=class_ids)
    if question.head == "count":
        return softmax(out["count"], axis=-1).data[0]
    if question.head == "multilabel":
        return sigmoid(out["multilabel"]).data[0]
    if question.head == "binary":
        return float(sigmoid(out["binary"]).data[0])
    boxes, conf, cls = heads.decode_boxes(out["grounding"].data[0])
    keep = conf > threshold
    if question.kind == "fine_grounding":
        keep &= cls == question.class_id
    return [(tuple(float(v) for v in boxes[i]), int(cls[i]), float(conf[i])) for i in np.flatnonzero(keep)]
