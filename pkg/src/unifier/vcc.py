"""Consistency constraints across scenario branches and across model versions.

Each CSR layer contributes a branch term per branch (its channel-mean
statistics against the scenario prototype, the mean of all branch outputs)
and a projector term (new projector output against the previous model's).
The total averages ``projector + sum(branch)`` over layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .autodiff import Tensor, log_softmax, mean_reduce, softmax, stack_mean
from .exceptions import ConfigError, ShapeError

VARIANTS = ("kl_reduced", "l2_full", "l2_reduced", "kl_spatial")
KL_DIRECTIONS = ("teacher_student", "student_teacher")


@dataclass
class ConsistencyConfig:
    tau: float = 2.0
    variant: str = "kl_reduced"
    lambda_vcc: float = 1.0
    prototype_grad: str = "blocked"
    kl_direction: str = "teacher_student"
    scale_tau_sq: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}", field="tau")
        if self.lambda_vcc < 0:
            raise ConfigError(f"lambda_vcc must be >= 0, got {self.lambda_vcc}", field="lambda_vcc")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown consistency variant {self.variant!r}", field="variant")
        if self.prototype_grad not in ("blocked", "flows"):
            raise ConfigError(f"unknown prototype_grad {self.prototype_grad!r}", field="prototype_grad")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}", field="kl_direction")


@dataclass
class LayerConsistencyReport:
    branch_terms: list = field(default_factory=list)  # per layer: [L_c^{l,k} for k]
    projector_terms: list = field(default_factory=list)  # per layer: L_p^l
    total: float = 0.0

    @property
    def l_c_sum(self):
        return float(sum(sum(layer) for layer in self.branch_terms))

    @property
    def l_p_sum(self):
        return float(sum(self.projector_terms))


def _zero():
    return Tensor(0.0)


def scenario_prototype(branch_outputs, prototype_grad="blocked"):
    """Elementwise mean of the branch outputs; detached unless ``prototype_grad == "flows"``."""
    if not branch_outputs:
        raise ShapeError("scenario prototype needs at least one branch output")
    mu = stack_mean(branch_outputs)
    return mu if prototype_grad == "flows" else mu.detach()


def soft_kl(student, teacher, tau, direction="teacher_student", scale=True):
    """KL divergence between temperature-softened distributions over the last axis.

    The default direction is ``KL(softmax(teacher/tau) || softmax(student/tau))``.
    Leading axes are averaged. With ``scale`` the value is multiplied by
    ``tau**2``.
    """
    if student.shape != teacher.shape:
        raise ShapeError(f"soft_kl length mismatch: {list(student.shape)} vs {list(teacher.shape)}")
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}", field="tau")
    inv = 1.0 / tau
    s, t = student * inv, teacher * inv
    if direction == "teacher_student":
        p, log_p, log_q = softmax(t), log_softmax(t), log_softmax(s)
    elif direction == "student_teacher":
        p, log_p, log_q = softmax(s), log_softmax(s), log_softmax(t)
    else:
        raise ConfigError(f"unknown kl_direction {direction!r}", field="kl_direction")
    kl = (p * (log_p - log_q)).sum(axis=-1)
    if kl.ndim:
        kl = kl.mean()
    return kl * (tau * tau) if scale else kl


def _reduced_kl(x, target, cfg):
    total = None
    for axis in ("feature", "embedding"):
        term = soft_kl(
            mean_reduce(x, axis),
            mean_reduce(target, axis),
            cfg.tau,
            direction=cfg.kl_direction,
            scale=cfg.scale_tau_sq,
        )
        total = term if total is None else total + term
    return total


def branch_consistency(branch_output, prototype, cfg):
    """Branch term: KL over feature-channel means plus KL over embedding-channel means."""
    if branch_output.shape != prototype.shape:
        raise ShapeError(f"branch output {list(branch_output.shape)} vs prototype {list(prototype.shape)}")
    return _reduced_kl(branch_output, prototype, cfg)


def projector_consistency(p_new, p_old, cfg):
    """Projector term against the previous model's output; 0 when no old model exists."""
    if p_old is None:
        return _zero()
    if p_new.shape != p_old.shape:
        raise ShapeError(f"p_new {list(p_new.shape)} vs p_old {list(p_old.shape)}")
    return _reduced_kl(p_new, p_old.detach(), cfg)


def distance(x, target, cfg):
    """Distance used by the configured variant between ``x`` and its target."""
    if x.shape != target.shape:
        raise ShapeError(f"{list(x.shape)} vs {list(target.shape)}")
    variant = cfg.variant
    if variant == "kl_reduced":
        return _reduced_kl(x, target, cfg)
    if variant == "l2_full":
        diff = x - target
        return (diff * diff).mean()
    if variant == "l2_reduced":
        total = None
        for axis in ("feature", "embedding"):
            diff = mean_reduce(x, axis) - mean_reduce(target, axis)
            term = (diff * diff).mean()
            total = term if total is None else total + term
        return total * 0.5
    if variant == "kl_spatial":
        return soft_kl(x, target, cfg.tau, direction=cfg.kl_direction, scale=cfg.scale_tau_sq)
    raise ConfigError(f"unknown consistency variant {variant!r}", field="variant")


def consistency_variant(branch_output, prototype, p_new, p_old, cfg):
    """Branch-vs-prototype plus new-vs-old projector distance under ``cfg.variant``."""
    total = distance(branch_output, prototype, cfg)
    if p_old is not None:
        total = total + distance(p_new, p_old.detach(), cfg)
    return total


def vcc_total(per_layer):
    """Average ``L_p + sum(L_c)`` over layers; items are ``(L_p, [L_c, ...])``."""
    if not per_layer:
        raise ShapeError("vcc_total needs at least one layer")
    total = None
    for l_p, l_cs in per_layer:
        layer = l_p
        for l_c in l_cs:
            layer = layer + l_c
        total = layer if total is None else total + layer
    return total * (1.0 / len(per_layer))


def vcc_loss(traces, old_projector_outputs, cfg, n_layers=None):
    """Consistency loss over an encoder forward.

    ``traces`` are the per-layer results of ``encoder_forward``;
    ``old_projector_outputs`` is a parallel list of the previous model's CSR
    outputs (or ``None`` on the first task). Returns ``(loss, report)``.
    """
    if n_layers is not None and len(traces) != n_layers:
        raise ShapeError(f"expected {n_layers} layers, got {len(traces)}")
    per_layer = []
    report = LayerConsistencyReport()
    for i, trace in enumerate(traces):
        if trace.p is None:
            continue
        mu = scenario_prototype(trace.branch_outputs, cfg.prototype_grad)
        l_cs = [distance(out, mu, cfg) for out in trace.branch_outputs]
        p_old = None if old_projector_outputs is None else old_projector_outputs[i]
        l_p = _zero() if p_old is None else distance(trace.p, p_old.detach(), cfg)
        per_layer.append((l_p, l_cs))
        report.branch_terms.append([c.item() for c in l_cs])
        report.projector_terms.append(l_p.item())
    if not per_layer:
        return _zero(), report
    loss = vcc_total(per_layer)
    report.total = loss.item()
    return loss, report
