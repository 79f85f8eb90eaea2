"""Parameter and computation counting.

FLOPs are reported as 2 x multiply-accumulates, the usual convention
for comparing vision models.  Convolutions, transposed convolutions,
linear layers, and recurrent layers are counted; elementwise work
(activations, batch norm, pooling, interpolation) is ignored as
negligible at these scales.
"""

from contextlib import contextmanager

import torch
import torch.nn as nn


def count_parameters(module, trainable_only=False):
    """Total number of parameter elements in a module."""
    params = module.parameters()
    if trainable_only:
        params = (p for p in params if p.requires_grad)
    return sum(p.numel() for p in params)


def _conv_macs(module, inputs, output):
    # Output elements times the per-output receptive work.
    kernel_ops = module.in_channels // module.groups
    for k in module.kernel_size:
        kernel_ops *= k
    return output.numel() * kernel_ops


def _deconv_macs(module, inputs, output):
    # Every input element is scattered through the full kernel.
    kernel_ops = module.out_channels // module.groups
    for k in module.kernel_size:
        kernel_ops *= k
    return inputs[0].numel() * kernel_ops


def _linear_macs(module, inputs, output):
    return output.numel() * module.in_features


def _gru_macs(module, inputs, output):
    # Three gates, each a matmul against the input and the hidden state,
    # per step, per direction, per layer.
    x = inputs[0]
    if x.dim() == 2:
        batch, steps = 1, x.shape[0]
    elif module.batch_first:
        batch, steps = x.shape[0], x.shape[1]
    else:
        batch, steps = x.shape[1], x.shape[0]
    dirs = 2 if module.bidirectional else 1
    hidden = module.hidden_size
    per_step = 0
    for layer in range(module.num_layers):
        in_size = module.input_size if layer == 0 else hidden * dirs
        per_step += dirs * 3 * hidden * (in_size + hidden)
    return batch * steps * per_step


_COUNTERS = {
    nn.Conv1d: _conv_macs,
    nn.Conv2d: _conv_macs,
    nn.Conv3d: _conv_macs,
    nn.ConvTranspose2d: _deconv_macs,
    nn.Linear: _linear_macs,
    nn.GRU: _gru_macs,
}


@contextmanager
def _mac_recorder(model, totals):
    handles = []

    def make_hook(counter, name):
        def hook(module, inputs, output):
            totals[name] = totals.get(name, 0) + counter(module, inputs, output)

        return hook

    for name, module in model.named_modules():
        counter = _COUNTERS.get(type(module))
        if counter is not None:
            handles.append(module.register_forward_hook(make_hook(counter, name)))
    try:
        yield
    finally:
        for h in handles:
            h.remove()


def count_forward_macs(model, *example_inputs, method=None):
    """Multiply-accumulates of one forward pass on the given inputs.

    Returns (total_macs, per_module) where per_module maps qualified
    module names to their MAC counts.  Pass method to count a specific
    entry point instead of model.__call__.
    """
    totals = {}
    was_training = model.training
    model.eval()
    fn = getattr(model, method) if method is not None else model
    with _mac_recorder(model, totals), torch.no_grad():
        fn(*example_inputs)
    if was_training:
        model.train()
    return sum(totals.values()), totals


def macs_to_gflops(macs):
    """2 x MACs, in units of 1e9."""
    return 2.0 * macs / 1e9
