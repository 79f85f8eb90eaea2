"""Decision-level fusion of the two classifier branches."""

import torch

FUSION_STRATEGIES = ("mul_prob", "avg_prob", "avg_fc", "add_res4")

_TINY = 1e-30


def fuse_mul(probs_g, probs_d):
    """Renormalized elementwise product of the two probability rows.

    Equivalent to softmax of the summed logits when both inputs are
    plain softmax outputs.  A uniform partner leaves the other
    distribution unchanged.
    """
    prod = probs_g * probs_d
    return prod / prod.sum(dim=-1, keepdim=True).clamp_min(_TINY)


def fuse_avg(probs_g, probs_d):
    """Arithmetic mean of the two probability rows."""
    return 0.5 * (probs_g + probs_d)


def fuse_logits_avg(logits_g, logits_d):
    """Softmax of the averaged pre-softmax head outputs."""
    return torch.softmax(0.5 * (logits_g + logits_d), dim=-1)


def fuse_predictions(logits_g, logits_d, strategy):
    """Fused class probabilities for a probability-level strategy.

    add_res4 is a feature-level architecture mode handled inside the
    two-stream model, not here.
    """
    if strategy == "mul_prob":
        return fuse_mul(torch.softmax(logits_g, dim=-1), torch.softmax(logits_d, dim=-1))
    if strategy == "avg_prob":
        return fuse_avg(torch.softmax(logits_g, dim=-1), torch.softmax(logits_d, dim=-1))
    if strategy == "avg_fc":
        return fuse_logits_avg(logits_g, logits_d)
    raise ValueError(f"unknown fusion strategy {strategy!r} for probability-level fusion")
