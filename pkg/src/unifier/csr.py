"""Cross-scenario representation (CSR) modules: per-scenario bottleneck branches
fused by a shared projector, plus the expansion and freeze discipline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import gelu, identity, no_grad, tensor_init
from .exceptions import ConfigError, IntegrityError, ProtocolError, ShapeError
from .layers import Linear, Module

ACTIVATIONS = {"gelu": gelu, "identity": identity}


class Branch(Module):
    """Bottleneck ``up(o(down(x)))`` taking width d1 -> d2 -> d1."""

    def __init__(self, d1, d2, rng, activation="gelu", up_std=0.02):
        if not d2 < d1:
            raise ConfigError(f"branch bottleneck d2={d2} must be smaller than d1={d1}", field="d2")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}", field="activation")
        self.down = Linear(d1, d2, rng, std=0.02)
        self.up = Linear(d2, d1, rng, std=up_std, zero=up_std == 0)
        self._activation = activation
        self._trainable = True

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, flag):
        self._trainable = bool(flag)
        self.set_requires_grad(self._trainable)

    def __call__(self, a):
        return branch_forward(self, a)


def branch_forward(branch, a):
    if a.shape[-1] != branch.down.d_in:
        raise ShapeError(f"branch expects width {branch.down.d_in}, got {list(a.shape)}")
    return branch.up(ACTIVATIONS[branch._activation](branch.down(a)))


@dataclass
class ExpansionRecord:
    task_index: int
    prior_k: int
    new_k: int
    max_abs_delta: float


class CsrModule(Module):
    """K scenario branches whose outputs are concatenated and projected back to d1.

    The projector is held as K input-slot blocks of shape ``[d1, d1]``; the
    full ``[K*d1, d1]`` matrix is their vertical stack. Summing slot products
    in slot order is the block form of ``concat(branches) @ P`` and keeps
    expansion bit-exact regardless of BLAS blocking.
    """

    def __init__(self, d1, d2, activation="gelu", branch_up_std=0.02):
        if not d2 < d1:
            raise ConfigError(f"d2={d2} must be smaller than d1={d1}", field="d2")
        self.branches = []
        self.projector = []
        self._d1 = d1
        self._d2 = d2
        self._activation = activation
        self._branch_up_std = branch_up_std
        self._task_active = False
        self.op_counts = {"branch": 0, "projector": 0}

    @property
    def K(self):
        return len(self.branches)

    @property
    def d1(self):
        return self._d1

    @property
    def projector_width(self):
        return sum(block.shape[0] for block in self.projector)

    @property
    def projector_weight(self):
        return np.concatenate([block.data for block in self.projector], axis=0)

    def begin_task(self):
        self._task_active = True

    def end_task(self):
        self._task_active = False

    def __call__(self, a):
        return csr_forward(self, a)


def csr_forward(module, a):
    """Return ``(p, branch_outputs)`` for the token tensor ``a``."""
    if module.K < 1:
        raise IntegrityError("CSR module has no branches; call expand_branch first")
    if module.projector_width != module.K * module.d1:
        raise IntegrityError(
            f"projector width {module.projector_width} != K*d1 = {module.K * module.d1}"
        )
    outputs = [branch_forward(b, a) for b in module.branches]
    module.op_counts["branch"] += module.K
    module.op_counts["projector"] += 1
    p = None
    for out, block in zip(outputs, module.projector):
        term = out @ block
        p = term if p is None else p + term
    return p, outputs


def expand_branch(module, init_seed, task_index=0, probe=None):
    """Append a branch for a new scenario and widen the projector by one zero slot.

    The new slot's projector block is zero, so ``p`` is bitwise unchanged on
    every input. All earlier branches are frozen and the new one is trainable.
    ``probe`` (a token tensor) is used to measure the output change for the
    returned record.
    """
    if module._task_active:
        raise ProtocolError("expand_branch called while a task is being trained")
    before = None
    if probe is not None and module.K > 0:
        with no_grad():
            before = csr_forward(module, probe)[0].data.copy()
    prior = module.K
    rng = np.random.default_rng(init_seed)
    branch = Branch(module.d1, module._d2, rng, module._activation, up_std=module._branch_up_std)
    module.branches.append(branch)
    module.projector.append(tensor_init((module.d1, module.d1), "zeros", requires_grad=True))
    set_trainable(module, module.K - 1)
    delta = 0.0
    if probe is not None:
        with no_grad():
            after = csr_forward(module, probe)[0].data
        delta = float(np.max(np.abs(after - (0.0 if before is None else before))))
    return ExpansionRecord(task_index=task_index, prior_k=prior, new_k=module.K, max_abs_delta=delta)


def set_trainable(module, branch_index):
    """Make exactly ``branch_index`` and the projector trainable; freeze the other branches."""
    if not 0 <= branch_index < module.K:
        raise IndexError(f"branch index {branch_index} out of range for K={module.K}")
    for i, branch in enumerate(module.branches):
        branch.trainable = i == branch_index
    for block in module.projector:
        block.requires_grad = True


def freeze(module):
    for branch in module.branches:
        branch.trainable = False
    for block in module.projector:
        block.requires_grad = False


def trainable_branch(module):
    active = [i for i, b in enumerate(module.branches) if b.trainable]
    return active[0] if len(active) == 1 else None


def branch_checksums(module):
    return [b.checksum() for b in module.branches]


__all__ = [
    "Branch",
    "CsrModule",
    "ExpansionRecord",
    "branch_forward",
    "branch_checksums",
    "csr_forward",
    "expand_branch",
    "freeze",
    "set_trainable",
    "trainable_branch",
]
