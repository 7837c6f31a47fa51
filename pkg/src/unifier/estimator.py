"""Scikit-learn style continual learner over scenario tasks.

``ContinualVQA`` owns a vision encoder and task heads and learns a stream
of ``ScenarioTask``s one ``partial_fit`` call at a time. The ``mode``
parameter selects the strategy:

* ``unifier``: one CSR branch per scenario inside every block; the
  backbone is frozen, only the active branch, the projectors and the heads
  train, with the consistency loss from the second task on.
* ``finetune``: plain encoder, every parameter trains on the current task.
* ``joint``: plain encoder trained on the union of all tasks seen so far.
* ``zero_shot``: no parameter updates.
"""

from __future__ import annotations

import copy
import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils import check_array

from .autodiff import bce_with_logits, cross_entropy, no_grad, smooth_l1
from .csr import branch_checksums, expand_branch, set_trainable
from .exceptions import ConfigError, ProtocolError, ShapeError
from .optim import AdamW, lr_schedule
from .tasks import ScenarioTask, subset_targets
from .vcc import ConsistencyConfig, vcc_loss
from .vit import TaskHeads, VisionEncoder, encoder_forward

MODES = ("unifier", "finetune", "joint", "zero_shot")

_PRETRAINED = {}


def check_images(X, image_size=None, channels=3):
    """Validate a batch of images as a finite float64 ``[N, H, W, C]`` array."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != channels:
        raise ShapeError(f"expected images shaped [N, H, W, {channels}], got {list(X.shape)}")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ShapeError(f"expected {image_size}x{image_size} images, got {X.shape[1]}x{X.shape[2]}")
    return X


def task_loss(heads, r, tg):
    """Summed head losses for a batch; returns ``(loss, parts)``."""
    out = heads.logits(r, class_ids=tg["tf_class"])
    g = out["grounding"]
    obj = tg["obj"]
    parts = {
        "count": cross_entropy(out["count"], tg["count"]),
        "multilabel": bce_with_logits(out["multilabel"], tg["multilabel"]),
        "binary": bce_with_logits(out["binary"], tg["tf_answer"]),
        "objectness": bce_with_logits(g[..., 0], obj),
        "box": smooth_l1(g[..., 1:5], tg["box"], weights=obj, beta=0.1),
        "box_class": cross_entropy(g[..., 5:], tg["cls"], weights=obj),
    }
    loss = None
    for term in parts.values():
        loss = term if loss is None else loss + term
    return loss, parts


def _merge_targets(tasks, key):
    parts = [t.targets(*key) for t in tasks]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0] if k != "key"}


class ContinualVQA(BaseEstimator):
    """Continual learner over scenario tasks with sklearn-style parameters.

    All constructor arguments are hyperparameters (``get_params`` /
    ``set_params`` work as usual); fitted state lives in trailing-underscore
    attributes.
    """

    def __init__(
        self,
        mode="unifier",
        image_size=32,
        patch=8,
        d1=64,
        depth=4,
        heads=4,
        hidden=128,
        d2=16,
        c_max=16,
        n_classes=16,
        literal_eq4=False,
        activation="gelu",
        branch_up_std=0.02,
        tau=2.0,
        lambda_vcc=1.0,
        variant="kl_reduced",
        prototype_grad="blocked",
        kl_direction="teacher_student",
        epochs_initial=20,
        epochs_later=10,
        base_lr=2e-3,
        warmup_frac=0.03,
        weight_decay=0.01,
        batch_size=16,
        head_lr_scale=1.0,
        threshold=0.5,
        pretrain_samples=512,
        pretrain_epochs=10,
        random_state=0,
    ):
        self.mode = mode
        self.image_size = image_size
        self.patch = patch
        self.d1 = d1
        self.depth = depth
        self.heads = heads
        self.hidden = hidden
        self.d2 = d2
        self.c_max = c_max
        self.n_classes = n_classes
        self.literal_eq4 = literal_eq4
        self.activation = activation
        self.branch_up_std = branch_up_std
        self.tau = tau
        self.lambda_vcc = lambda_vcc
        self.variant = variant
        self.prototype_grad = prototype_grad
        self.kl_direction = kl_direction
        self.epochs_initial = epochs_initial
        self.epochs_later = epochs_later
        self.base_lr = base_lr
        self.warmup_frac = warmup_frac
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.head_lr_scale = head_lr_scale
        self.threshold = threshold
        self.pretrain_samples = pretrain_samples
        self.pretrain_epochs = pretrain_epochs
        self.random_state = random_state

    # -- setup ----------------------------------------------------------------

    def _validate_params(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}", field="mode")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="batch_size")
        if self.epochs_initial < 0 or self.epochs_later < 0:
            raise ConfigError("epoch counts must be >= 0", field="epochs_initial")
        if self.head_lr_scale < 0:
            raise ConfigError("head_lr_scale must be >= 0", field="head_lr_scale")
        if self.pretrain_samples < 0 or self.pretrain_epochs < 0:
            raise ConfigError("pretraining sizes must be >= 0", field="pretrain_epochs")
        return self._consistency_config()

    def _consistency_config(self):
        return ConsistencyConfig(
            tau=self.tau,
            variant=self.variant,
            lambda_vcc=self.lambda_vcc,
            prototype_grad=self.prototype_grad,
            kl_direction=self.kl_direction,
        )

    def _target_key(self):
        return (self.patch, self.image_size, self.n_classes, self.c_max)

    def _build(self):
        self._validate_params()
        seeds = np.random.SeedSequence(self.random_state).generate_state(2)
        self.encoder_ = VisionEncoder(
            image_size=self.image_size,
            patch=self.patch,
            d1=self.d1,
            depth=self.depth,
            heads=self.heads,
            hidden=self.hidden,
            d2=self.d2,
            use_csr=self.mode == "unifier",
            literal_eq4=self.literal_eq4,
            activation=self.activation,
            branch_up_std=self.branch_up_std,
            seed=int(seeds[0]),
        )
        self.heads_ = TaskHeads(
            self.d1, n_classes=self.n_classes, c_max=self.c_max, patch=self.patch,
            image_size=self.image_size, seed=int(seeds[1]),
        )
        self.branch_of_ = {}
        self.n_tasks_ = 0
        self.seen_tasks_ = []
        self.old_model_ = None
        self.expansions_ = []
        self.freeze_checksums_ = {}
        self.log_ = []
        self._pretrain()
        if self.mode == "unifier":
            for p in self.encoder_.backbone_parameters():
                p.requires_grad = False
        return self

    def _pretrain_key(self):
        names = ("image_size", "patch", "d1", "depth", "heads", "hidden", "c_max", "n_classes", "literal_eq4",
                 "base_lr", "warmup_frac", "weight_decay", "batch_size", "pretrain_samples", "pretrain_epochs",
                 "random_state")
        return tuple(getattr(self, n) for n in names)

    def _pretrain(self):
        """Shared starting point for every mode: the plain backbone and heads
        trained on neutral scenes that belong to no scenario.

        Results are cached per process so modes and variants compared on one
        seed start from identical weights.
        """
        if not self.pretrain_epochs or not self.pretrain_samples:
            return
        key = self._pretrain_key()
        if key not in _PRETRAINED:
            from .synth import PRETRAIN_SPEC, generate_samples

            samples = generate_samples("S0", self.pretrain_samples, self.random_state, 2, PRETRAIN_SPEC)
            task = ScenarioTask(0, "S0", samples, "train")
            self._fit_targets(task.targets(*self._target_key()), self.pretrain_epochs, None, tag=0, head_scale=1.0)
            _PRETRAINED[key] = (self.encoder_.state_dict(), self.heads_.state_dict())
            self.log_ = []
        enc, heads = _PRETRAINED[key]
        self.encoder_.load_state_dict(enc)
        self.heads_.load_state_dict(heads)

    def _check_fitted(self):
        if not hasattr(self, "encoder_"):
            raise NotFittedError("ContinualVQA is not fitted; call partial_fit or fit first")

    # -- protocol ---------------------------------------------------------------

    def fit(self, tasks):
        """Reset and learn ``tasks`` in order."""
        self._build()
        for task in tasks:
            self.partial_fit(task)
        return self

    def partial_fit(self, task):
        """Learn one step of the stream."""
        if not isinstance(task, ScenarioTask):
            raise ConfigError("partial_fit expects a ScenarioTask", field="task")
        if not hasattr(self, "encoder_"):
            self._build()
        cfg = self._validate_params()
        self.n_tasks_ += 1
        self.seen_tasks_.append(task)
        epochs = self.epochs_initial if self.n_tasks_ == 1 else self.epochs_later
        if self.mode == "zero_shot" or epochs == 0:
            return self
        if self.mode == "unifier":
            self.old_model_ = self.snapshot() if self.n_tasks_ > 1 else None
            self._prepare_branch(task)
            train_tasks = [task]
        elif self.mode == "joint":
            train_tasks = list(self.seen_tasks_)
        else:
            train_tasks = [task]
        self._train(train_tasks, epochs, cfg)
        if self.mode == "unifier":
            self._record_freeze_point(task.scenario)
        return self

    def snapshot(self):
        """Frozen deep copy of the current encoder (the previous model for the projector term)."""
        self._check_fitted()
        old = copy.deepcopy(self.encoder_)
        old.set_requires_grad(False)
        old.zero_grad()
        return old

    def _prepare_branch(self, task):
        if task.scenario in self.branch_of_:
            for m in self.encoder_.csr_modules:
                set_trainable(m, self.branch_of_[task.scenario])
        else:
            self.expand(task)

    def expand(self, task):
        """Add a branch for ``task.scenario`` to every CSR module.

        A probe batch of the task's images checks that the CSR outputs are
        unchanged by the expansion; the per-layer records land in ``expansions_``.
        """
        if task.scenario in self.branch_of_:
            raise ProtocolError(f"scenario {task.scenario!r} already has branch {self.branch_of_[task.scenario]}")
        csrs = self.encoder_.csr_modules
        probe = task.targets(*self._target_key())["images"][: min(len(task), 64)]
        probe_traces = None
        if csrs[0].K > 0:
            with no_grad():
                probe_traces, _ = encoder_forward(self.encoder_, probe)
        seeds = np.random.SeedSequence([self.random_state, len(self.branch_of_), 101]).generate_state(len(csrs))
        records = []
        for layer, (m, s) in enumerate(zip(csrs, seeds)):
            a = probe_traces[layer].a if probe_traces is not None else None
            records.append(expand_branch(m, int(s), task_index=self.n_tasks_, probe=a))
        self.branch_of_[task.scenario] = csrs[0].K - 1
        self.expansions_.append(records)
        return records

    def _record_freeze_point(self, scenario):
        # the branch just trained is frozen from here until its scenario returns
        k = self.branch_of_[scenario]
        self.freeze_checksums_[scenario] = [branch_checksums(m)[k] for m in self.encoder_.csr_modules]

    def trainable_parameters(self):
        self._check_fitted()
        return self.encoder_.trainable_parameters() + self.heads_.trainable_parameters()

    def _train(self, tasks, epochs, cfg):
        csrs = self.encoder_.csr_modules
        use_vcc = self.mode == "unifier" and cfg.lambda_vcc > 0 and (self.old_model_ is not None or csrs[0].K > 1)
        self._fit_targets(_merge_targets(tasks, self._target_key()), epochs, cfg if use_vcc else None, self.n_tasks_)

    def _fit_targets(self, tg, epochs, cfg, tag, head_scale=None):
        """Minibatch AdamW over ``tg``; ``cfg`` switches on the consistency loss.

        Head parameters step at ``head_scale`` times the encoder learning rate.
        """
        n = len(tg["count"])
        bs = self.batch_size
        steps_per_epoch = math.ceil(n / bs)
        total = epochs * steps_per_epoch
        head_scale = self.head_lr_scale if head_scale is None else head_scale
        opt = AdamW(self.encoder_.trainable_parameters(), lr=self.base_lr, weight_decay=self.weight_decay)
        head_opt = AdamW(self.heads_.trainable_parameters(), lr=self.base_lr, weight_decay=self.weight_decay)
        rng = np.random.default_rng([self.random_state, tag, 11])
        csrs = self.encoder_.csr_modules
        use_vcc = cfg is not None
        for m in csrs:
            m.begin_task()
        try:
            step = 0
            for _epoch in range(epochs):
                perm = rng.permutation(n)
                for start in range(0, n, bs):
                    batch = subset_targets(tg, perm[start : start + bs])
                    lr = lr_schedule(step + 1, total + 1, self.warmup_frac, self.base_lr)
                    traces, r = encoder_forward(self.encoder_, batch["images"])
                    loss, parts = task_loss(self.heads_, r, batch)
                    task_value = loss.item()
                    l_vcc = l_c = l_p = 0.0
                    if use_vcc:
                        p_old = None
                        if self.old_model_ is not None:
                            with no_grad():
                                old_traces, _ = encoder_forward(self.old_model_, batch["images"])
                            p_old = [t.p for t in old_traces]
                        vcc, report = vcc_loss(traces, p_old, cfg)
                        loss = loss + vcc * cfg.lambda_vcc
                        l_vcc, l_c, l_p = report.total, report.l_c_sum, report.l_p_sum
                    opt.zero_grad()
                    head_opt.zero_grad()
                    loss.backward()
                    opt.step(lr)
                    if head_scale > 0:
                        head_opt.step(lr * head_scale)
                    step += 1
                    self.log_.append(
                        {"task": tag, "step": step, "task_loss": task_value,
                         "l_vcc": l_vcc, "l_c_sum": l_c, "l_p_sum": l_p}
                    )
        finally:
            for m in csrs:
                m.end_task()
            opt.zero_grad()
            head_opt.zero_grad()

    # -- inference ----------------------------------------------------------------

    def _forward_batches(self, images, class_ids, batch=128):
        outs = []
        with no_grad():
            for start in range(0, len(images), batch):
                _, r = encoder_forward(self.encoder_, images[start : start + batch])
                logits = self.heads_.logits(r, class_ids=class_ids[start : start + batch])
                outs.append({k: v.data for k, v in logits.items()})
        return {k: np.concatenate([o[k] for o in outs]) for k in outs[0]}

    def transform(self, X):
        """Pooled, normalised final representations ``[N, d1]``."""
        self._check_fitted()
        X = check_images(X, self.image_size)
        feats = []
        with no_grad():
            for start in range(0, len(X), 128):
                _, r = encoder_forward(self.encoder_, X[start : start + 128])
                feats.append(self.heads_.norm(r).data.mean(axis=-2))
        return np.concatenate(feats)

    def predict(self, X, questions):
        """Answer ``questions[i]`` (a ``TaskDescriptor``) about image ``X[i]``."""
        self._check_fitted()
        X = check_images(X, self.image_size)
        if len(questions) != len(X):
            raise ShapeError(f"{len(X)} images but {len(questions)} questions")
        class_ids = np.array([q.class_id if q.class_id is not None else 0 for q in questions])
        out = self._forward_batches(X, class_ids)
        return [self._decode(out, i, q) for i, q in enumerate(questions)]

    def predict_samples(self, samples):
        """Answers for every question of every sample, as ``[{kind: answer}]``."""
        self._check_fitted()
        if not samples:
            return []
        X = np.stack([s.image for s in samples])
        class_ids = np.array(
            [next((q.class_id for q, _ in s.questions if q.kind == "true_false"), 0) for s in samples]
        )
        out = self._forward_batches(X, class_ids)
        return [{q.kind: self._decode(out, i, q) for q, _ in s.questions} for i, s in enumerate(samples)]

    def _decode(self, out, i, q):
        if q.kind == "count":
            return int(np.argmax(out["count"][i]))
        if q.kind == "classification":
            return [int(c) for c in np.flatnonzero(out["multilabel"][i] > 0.0)]
        if q.kind == "true_false":
            return "yes" if out["binary"][i] > 0.0 else "no"
        boxes, conf, cls = self.heads_.decode_boxes(out["grounding"][i])
        keep = conf > self.threshold
        if q.kind == "fine_grounding":
            keep &= cls == q.class_id
        return [[*map(float, boxes[j]), int(cls[j]), float(conf[j])] for j in np.flatnonzero(keep)]

    def score(self, task):
        """Mean of the VQA and F1 percentages on ``task``."""
        from .harness import score_task

        s = score_task(self, task)
        return 0.5 * (s["vqa"] + s["f1"])
