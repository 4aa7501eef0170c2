"""Shared test utilities: finite-difference gradient checks, synthetic data."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

FD_STEP = 1e-4
FD_TOL = 1e-3


def fd_gradcheck(build_loss, tensors, n_coords=3, h=FD_STEP, tol=FD_TOL, seed=0):
    """Compare autograd gradients against central finite differences.

    ``build_loss`` recomputes the scalar loss from the current tensor values;
    ``tensors`` are float64 leaves with requires_grad set.  A few coordinates
    per tensor are probed.  Returns the worst relative error seen and asserts
    it stays below ``tol``.
    """
    rng = np.random.default_rng(seed)
    loss = build_loss()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    worst = 0.0
    for tensor, g in zip(tensors, grads):
        assert tensor.dtype == torch.float64, "finite differences need float64"
        flat = tensor.detach().reshape(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        coords = rng.choice(n, size=min(n_coords, n), replace=False)
        for idx in coords:
            idx = int(idx)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
            lp = build_loss().item()
            with torch.no_grad():
                flat[idx] = orig - h
            lm = build_loss().item()
            with torch.no_grad():
                flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = gflat[idx].item()
            rel = abs(an - fd) / max(abs(an), abs(fd), 1.0)
            worst = max(worst, rel)
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e} >= {tol}"
    return worst


def module_gradcheck(module, inputs, n_coords=2, include_params=True, seed=0, tol=FD_TOL):
    """FD-check a module's gradients w.r.t. inputs and (optionally) parameters.

    The loss is a fixed random projection of the output, so gradients are
    O(1) and the relative comparison is meaningful.
    """
    module = module.double()
    inputs = [x.double().detach().requires_grad_(True) for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    out_shape = module(*inputs).shape
    proj = torch.randn(out_shape, dtype=torch.float64, generator=gen)

    def build_loss():
        return (module(*inputs) * proj).sum()

    leaves = list(inputs)
    if include_params:
        leaves += [p for p in module.parameters() if p.requires_grad]
    return fd_gradcheck(build_loss, leaves, n_coords=n_coords, seed=seed, tol=tol)


def naive_conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Reference sliding-window convolution with explicit loops (float64)."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    n, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    in_per_group = c_in // groups
    out_per_group = c_out // groups
    for b in range(n):
        for oc in range(c_out):
            gi = oc // out_per_group
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for ic in range(in_per_group):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    xp[b, gi * in_per_group + ic, i * stride + u, j * stride + v]
                                    * weight[oc, ic, u, v]
                                )
                    out[b, oc, i, j] = acc
            if bias is not None:
                out[b, oc] += float(bias[oc])
    return out


def smooth_field(rng, size, channels=3):
    """Random low-frequency image in [0, 1] (bilinear-upsampled 8x8 noise)."""
    low = rng.random((8, 8, channels)).astype(np.float32)
    t = torch.from_numpy(low).permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t.squeeze(0).permute(1, 2, 0).numpy()


def synth_pair(rng, size=64):
    """Underwater-like degraded/clean pair: color cast + blur + light noise."""
    target = np.clip(0.15 + 0.7 * smooth_field(rng, size), 0.0, 1.0)
    cast = np.array([0.45, 0.85, 1.0], dtype=np.float32)
    degraded = target * cast
    padded = np.pad(degraded, ((1, 1), (1, 1), (0, 0)), mode="edge")
    blurred = np.zeros_like(degraded)
    for dy in range(3):
        for dx in range(3):
            blurred += padded[dy : dy + size, dx : dx + size] / 9.0
    noisy = blurred + rng.normal(0.0, 0.01, blurred.shape).astype(np.float32)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32), target.astype(np.float32)


def write_dataset(root, n_pairs, rng, size=64, unpaired=0):
    """Materialize synthetic paired (and optional unpaired) images on disk."""
    from uwrestore.data import save_image

    (root / "input").mkdir(parents=True, exist_ok=True)
    (root / "target").mkdir(parents=True, exist_ok=True)
    for i in range(n_pairs):
        inp, tgt = synth_pair(rng, size)
        save_image(root / "input" / f"img{i:03d}.png", inp)
        save_image(root / "target" / f"img{i:03d}.png", tgt)
    for i in range(unpaired):
        inp, _ = synth_pair(rng, size)
        save_image(root / "input" / f"lone{i:03d}.png", inp)
    return root


def make_train_manifest(root, n_pairs, rng, size=64):
    from uwrestore.data import Manifest, ManifestRecord

    write_dataset(root, n_pairs, rng, size)
    records = [
        ManifestRecord(
            input_path=str(root / "input" / f"img{i:03d}.png"),
            target_path=str(root / "target" / f"img{i:03d}.png"),
            split="train",
            source="other",
        )
        for i in range(n_pairs)
    ]
    return Manifest(records)
