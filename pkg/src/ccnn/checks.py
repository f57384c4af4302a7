"""Numerical self-checks shared by the ``selfcheck`` command and the test suite."""

import numpy as np

from .dense import dense_forward, to_dense_plan
from .loss import loss_joint
from .model import CascadeConfig, K, backward_stages, build_network, forward_stages, stage_probabilities
from .train import normalized_costs


def patch_oracle(net, image, chunk=256):
    """Per-stage probabilities ``(K, AH, AW)`` from cropping every anchor's patch."""
    p = net.config.patch_size
    h, w = image.shape[:2]
    ah, aw = h - p + 1, w - p + 1
    image = image.astype(net.dtype, copy=False)
    # (AH, AW, 3, p, p) view -> flat list of (p, p, 3) crops
    windows = np.lib.stride_tricks.sliding_window_view(image, (p, p), axis=(0, 1)).reshape(ah * aw, -1, p, p)
    out = np.zeros((ah * aw, K), dtype=np.float64)
    for start in range(0, ah * aw, chunk):
        patches = np.ascontiguousarray(windows[start:start + chunk].transpose(0, 2, 3, 1))
        out[start:start + chunk] = stage_probabilities(net, patches)
    return out.T.reshape(K, ah, aw)


def dense_patch_error(net, image):
    """Largest gap between dense stage maps and the patch oracle at any anchor."""
    res = dense_forward(net, to_dense_plan(net), image, thresholds=np.zeros(K), sparse=False)
    return float(np.max(np.abs(res.stage_maps.astype(np.float64) - patch_oracle(net, image))))


def _pattern(cache):
    """ReLU on/off and max-pool winners: the piecewise-linear region of the trunk."""
    parts = []
    for key in sorted(cache):
        if key.startswith("block"):
            _, _, pre, routing = cache[key]
            parts.append(np.packbits(pre > 0).tobytes())
            if routing is not None:
                parts.append(routing.argmax.tobytes())
    return b"".join(parts)


def network_gradient_error(net, patches, labels, beta=0.5, n_coords=100, step=1e-5, seed=0):
    """Worst relative error between back-propagated and central-difference gradients.

    The objective is the summed joint loss over ``patches``.  ``n_coords``
    parameters are sampled, spread over every weight tensor.  A coordinate
    whose +/- step changes a ReLU or max-pool decision sits on a kink where
    the difference quotient is meaningless; it is replaced by another draw.
    """
    costs = normalized_costs(net)
    params = net.parameters()

    def objective():
        cache = {}
        probs, _ = forward_stages(net, patches, cache=cache)
        return loss_joint(probs, labels, costs, beta).total, _pattern(cache)

    cache = {}
    probs, _ = forward_stages(net, patches, cache=cache)
    base = _pattern(cache)
    lb = loss_joint(probs, labels, costs, beta)
    grads, _ = backward_stages(net, cache, lb.d_per_stage)
    rng = np.random.default_rng(seed)
    names = sorted(params)
    per = int(np.ceil(n_coords / len(names)))
    worst = 0.0
    for name in names:
        flat = params[name].reshape(-1)
        g = grads[name].reshape(-1)
        checked = 0
        for c in rng.permutation(flat.size):
            if checked == min(per, flat.size):
                break
            old = flat[c]
            flat[c] = old + step
            up, p_up = objective()
            flat[c] = old - step
            down, p_down = objective()
            flat[c] = old
            if p_up != base or p_down != base:
                continue
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(fd - g[c]) / max(abs(fd), abs(g[c]), 1e-8))
            checked += 1
    return worst


def run_selfcheck(seed=42, images=3, size=96, config=None):
    """Dense/patch agreement in both precisions plus a full-network gradient check.

    Returns a list of ``(name, value, tolerance)`` rows.
    """
    rng = np.random.default_rng(seed)
    config = config or CascadeConfig()
    rows = []
    for precision, dtype, tol in (("single", np.float32, 1e-5), ("double", np.float64, 1e-10)):
        worst = 0.0
        for i in range(images):
            net = build_network(config, seed=seed + i).astype(dtype)
            worst = max(worst, dense_patch_error(net, rng.random((size, size, 3))))
        rows.append((f"dense_vs_patch_{precision}", worst, tol))
    net = build_network(config, seed=seed).astype(np.float64)
    patches = rng.random((4, config.patch_size, config.patch_size, 3))
    labels = np.array([1, 0, 1, 0])
    rows.append(("network_gradient", network_gradient_error(net, patches, labels, seed=seed), 1e-4))
    return rows
