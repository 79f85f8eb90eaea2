"""Soft targets, knowledge-distillation losses, and the combined training objective.

Both classifier branches are trained with cross entropy on their raw
logits plus a mutual distillation term on temperature-softened
probabilities.  Each distillation term treats the other branch's
probabilities as a constant teacher, so the two branches exchange
targets without backpropagating into each other.
"""

import torch
import torch.nn.functional as F

_TINY = 1e-30

DISTILL_MODES = ("none", "bikd", "g2d", "d2g")


def soften(logits, temperature):
    """Softmax of logits / temperature along the last axis."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return F.softmax(logits / temperature, dim=-1)


def kd_loss(teacher_probs, student_probs):
    """Cross entropy -sum(teacher * log(student)), averaged over batch rows.

    The teacher is detached: gradients flow only into the student
    probabilities.  For identical distributions this reduces to the
    teacher's entropy, which is its minimum over students (Gibbs
    inequality), so the loss never rewards moving away from the teacher.
    """
    teacher = teacher_probs.detach()
    return -(teacher * student_probs.clamp_min(_TINY).log()).sum(dim=-1).mean()


def bikd_loss(probs_a, probs_b):
    """Symmetric mutual distillation: kd(a teaches b) + kd(b teaches a)."""
    return kd_loss(probs_a, probs_b) + kd_loss(probs_b, probs_a)


def distill_term(logits_g, logits_d, temperature, mode):
    """Distillation component for the chosen mode, on softened probabilities.

    Modes: "none" (zero), "bikd" (both directions), "g2d" (grayscale
    teaches flow), "d2g" (flow teaches grayscale).
    """
    if mode not in DISTILL_MODES:
        raise ValueError(f"unknown distillation mode {mode!r}, expected one of {DISTILL_MODES}")
    if mode == "none":
        return logits_g.new_zeros(())
    qg = soften(logits_g, temperature)
    qd = soften(logits_d, temperature)
    if mode == "bikd":
        return bikd_loss(qg, qd)
    if mode == "g2d":
        return kd_loss(qg, qd)
    return kd_loss(qd, qg)


def total_loss(logits_g, logits_d, labels, lam, temperature, mode="bikd"):
    """Combined objective: CE(gray) + CE(flow) + lam * distillation term.

    Cross entropy is computed on the raw logits; only the distillation
    term sees the temperature.  Returns (total, parts) where parts maps
    component names to detached floats for logging.
    """
    ce_g = F.cross_entropy(logits_g, labels)
    ce_d = F.cross_entropy(logits_d, labels)
    kd = distill_term(logits_g, logits_d, temperature, mode)
    total = ce_g + ce_d + lam * kd
    parts = {
        "ce_gray": float(ce_g.detach()),
        "ce_flow": float(ce_d.detach()),
        "kd": float(kd.detach()),
        "lambda": float(lam),
    }
    return total, parts
