"""Finite-difference oracles shared by the training and acceptance tests."""

import numpy as np
import torch

from dualprint.training import (LossWeights, match_loss, spoof_loss,
                                total_loss)


def model_losses(model, patches, labels, targets, flags=(1.0, 1.0)):
    logits, desc = model(patches, s_sd=flags[0], s_m=flags[1])
    return spoof_loss(logits, labels), match_loss(desc, targets)


def surrogate_loss(model, patches, labels, targets, w: LossWeights, flags):
    """The scalar whose true gradient the BASE parameters receive.

    Head parameters receive gradients of the unsigned objective; the sign
    flags only scale what crosses the split point into the base.
    """
    l_sd, l_m = model_losses(model, patches, labels, targets)
    return flags[0] * w.w_sd * l_sd + flags[1] * w.w_m * l_m


def analytic_grads(model, patches, labels, targets, w, flags):
    model.zero_grad(set_to_none=True)
    l_sd, l_m = model_losses(model, patches, labels, targets, flags)
    total_loss(l_sd, l_m, w).backward()
    return {name: p.grad.detach().clone()
            for name, p in model.named_parameters() if p.grad is not None}


def sample_param_entries(model, prefix, count, seed):
    """(name, flat_index) pairs drawn across all tensors under a prefix."""
    rng = np.random.default_rng(seed)
    entries = []
    for name, p in model.named_parameters():
        if name.startswith(prefix) and p.numel() > 0:
            entries.append((name, p))
    picks = []
    for k in range(count):
        name, p = entries[int(rng.integers(len(entries)))]
        picks.append((name, int(rng.integers(p.numel()))))
    return picks


def fd_directional(model, patches, labels, targets, w, flags, name, index,
                   step=1e-6):
    """Central finite difference of the base-surrogate along one parameter.

    The default step is far below the module contract's illustrative 1e-3:
    ReLU6 kinks and train-mode batch-norm curvature make steps that large
    unreliable (measured rel. err. up to 5e-2), while 1e-6 in float64 keeps
    truncation below 2e-5 with roundoff still negligible.
    """
    param = dict(model.named_parameters())[name]
    flat = param.data.view(-1)
    original = flat[index].item()
    with torch.no_grad():
        flat[index] = original + step
    with torch.no_grad():
        plus = surrogate_loss(model, patches, labels, targets, w, flags).item()
        flat[index] = original - step
        minus = surrogate_loss(model, patches, labels, targets, w, flags).item()
        flat[index] = original
    return (plus - minus) / (2.0 * step)


def relative_error(a, b):
    denom = max(abs(a), abs(b), 1e-8)
    return abs(a - b) / denom
