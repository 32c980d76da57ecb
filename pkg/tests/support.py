"""Shared helpers for the test suite (not a test module)."""

import numpy as np
import torch

from atrium_probe.data import PhantomSpec, extract_slices, generate_phantom
from atrium_probe.evaluation import binarize, dice
from atrium_probe.training import bce_with_logits


def best_phantom_slice(size=64, seed=0):
    """A (image, mask) pair from a generated phantom volume, picking the
    slice with the most foreground."""
    vol = generate_phantom(
        PhantomSpec(n_volumes=1, height=size, width=size, n_slices=6, seed=seed)
    )[0]
    samples = extract_slices(vol)
    return max(samples, key=lambda s: int(s.mask.sum()))


def overfit_single_slice(model, x, y, steps=300, lr=1e-3, check_every=25):
    """Train on one (x, y) pair; returns the best Dice reached. x is a
    (C, H, W) array, y an (H, W) binary mask."""
    xb = torch.from_numpy(np.array(x, dtype=np.float32))[None]
    yb = torch.from_numpy(np.array(y, dtype=np.float32))[None, None]
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    model.train()
    best = 0.0
    for step in range(1, steps + 1):
        opt.zero_grad()
        loss = bce_with_logits(model(xb), yb)
        if not torch.isfinite(loss):
            raise RuntimeError(f"loss diverged at step {step}")
        loss.backward()
        opt.step()
        if step % check_every == 0 or step == steps:
            model.eval()
            with torch.no_grad():
                pred = binarize(model(xb)[0, 0])
            model.train()
            best = max(best, dice(pred, np.asarray(y)))
            if best >= 0.995:
                break
    return best
