"""Stagnation detection and the coupled learning-rate and lambda policy.

A single detector watches the validation metric.  Each time it fires,
every learning rate is halved and the distillation weight is halved
with it.  The first firing additionally re-couples the back-end: after
the halving, back-end parameter groups run at a tenth of the front-end
rate.  Optimizer parameter groups are tagged with a "role" key
("front" or "back") so the policy can tell them apart.
"""


class StagnationDetector:
    """Fires when the watched value fails to improve for `patience` checks.

    Improvement means exceeding the best seen value by more than
    min_delta (the metric is assumed higher-is-better).  After firing,
    the counter resets so the next event needs another full run of
    non-improving checks.
    """

    def __init__(self, patience=3, min_delta=1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = None
        self.bad_checks = 0

    def update(self, value):
        """Record one evaluation; returns True when stagnation is detected."""
        if self.best is None or value > self.best + self.min_delta:
            self.best = value
            self.bad_checks = 0
            return False
        self.bad_checks += 1
        if self.bad_checks >= self.patience:
            self.bad_checks = 0
            return True
        return False

    def state_dict(self):
        return {"best": self.best, "bad_checks": self.bad_checks}

    def load_state_dict(self, state):
        self.best = state["best"]
        self.bad_checks = state["bad_checks"]


class DecayPolicy:
    """Applies the stagnation response to an optimizer and the distillation weight."""

    def __init__(self):
        self.events = 0

    def on_stagnation(self, optimizer, lam):
        """Halve all rates (and lam); couple back-end rates on the first event.

        Returns the new lam.  Safe to call with optimizer=None when only
        lam is being scheduled.
        """
        self.events += 1
        front_lr = None
        if optimizer is not None:
            for group in optimizer.param_groups:
                group["lr"] *= 0.5
                if group.get("role") == "front":
                    front_lr = group["lr"]
            if self.events == 1 and front_lr is not None:
                for group in optimizer.param_groups:
                    if group.get("role") == "back":
                        group["lr"] = 0.1 * front_lr
        return lam * 0.5

    def state_dict(self):
        return {"events": self.events}

    def load_state_dict(self, state):
        self.events = state["events"]
