"""Shared test utilities: a central finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from mpnerf import diffcore as dc


def fd_check(fn, inputs, rng, h=1e-3, n_coords=None):
    """Compare analytic gradients of ``sum(W * fn(*inputs))`` against central differences.

    The projection onto a fixed random W is evaluated in float64 outside the
    graph so that the oracle does not share the path it checks.  Returns the
    worst norm-wise relative error over all inputs.
    """
    tensors = [dc.parameter(np.asarray(x, dtype=np.float32)) for x in inputs]
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape).astype(np.float32)
    loss = dc.tsum(dc.mul(out, weights))
    grads = dc.grad(loss, tensors)
    w64 = weights.astype(np.float64)

    def projected(vals):
        with dc.no_grad(), dc.precision(np.float64):
            o = fn(*[dc.Tensor(v) for v in vals])
        return float(np.sum(o.data.astype(np.float64) * w64))

    base = [t.data.astype(np.float64) for t in tensors]
    worst = 0.0
    for k, x in enumerate(base):
        flat_idx = np.arange(x.size)
        if n_coords is not None and x.size > n_coords:
            flat_idx = rng.choice(x.size, n_coords, replace=False)
        num = np.empty(len(flat_idx))
        for j, i in enumerate(flat_idx):
            vals = [b.copy() for b in base]
            vals[k].reshape(-1)[i] += h
            fp = projected(vals)
            vals[k].reshape(-1)[i] -= 2 * h
            fm = projected(vals)
            num[j] = (fp - fm) / (2 * h)
        ana = grads[k].reshape(-1)[flat_idx].astype(np.float64)
        denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-6)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


def constant_dataset(size=8, color=(0.2, 0.5, 0.7), n_views=3):
    """A trivial scene: every view is one flat colour, cameras on a short arc."""
    from mpnerf import geometry as geo
    from mpnerf.scene import Dataset, SceneManifest, ViewRecord

    intr = geo.Intrinsics.from_fov(size, size, 45.0)
    views, images = [], []
    for k in range(n_views):
        az = np.radians(-10 + 20 * k / max(1, n_views - 1))
        eye = 3.0 * np.array([np.sin(az), -np.cos(az), 1.0]) / np.sqrt(2)
        views.append(ViewRecord(f"view_{k:03d}.png", intr, geo.look_at(eye, [0.0, 0.0, 0.0])))
        images.append(np.broadcast_to(np.asarray(color, np.float32), (size, size, 3)).copy())
    return Dataset(SceneManifest(views, 1.0, 5.0, size, size), images)
