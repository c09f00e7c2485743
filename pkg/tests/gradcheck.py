"""Central-difference oracle for convnet.backward.

ReLU followed by max-pool is piecewise linear.  Inside one linear piece
every pooled output is either a fixed positive pre-activation (the pool
winner) or exactly zero.  A +-h probe that moves into another piece measures
a secant across a kink rather than the derivative.  Such probes are detected
by comparing the piece identifiers at theta +- h with those at theta (plus
the hinge's active set) and are skipped; the caller is told how many were
checked.
"""
import numpy as np

from phasematch import convnet, kernels


def _pattern(params, x, y, kind):
    feats, cache = convnet._features(params, x, True)
    parts = []
    for _, _, z, _, _ in cache:
        pooled, arg = kernels.maxpool2_forward(np.maximum(z, 0))
        parts.append(np.where(pooled > 0, arg, -1).astype(np.int8).tobytes())
    if kind == "hinge":
        score = feats @ params.tensors["fc.w"] + params.tensors["fc.b"][0]
        parts.append((y * score < 1.0).tobytes())
    return b"".join(parts)


def _mean_loss(params, x, y, kind):
    return float(np.mean(convnet.loss(convnet.forward_batch(params, x), y, kind)))


def random_problem(spec, seed, batch=3):
    rng = np.random.default_rng(seed)
    params = convnet.init_params(spec, seed, np.float64)
    for name, t in params.tensors.items():
        if name.endswith(".b"):
            t[...] = rng.normal(0.0, 0.1, t.shape)
    x = rng.standard_normal((batch, spec.input_size, spec.input_size, spec.in_channels))
    y = rng.choice([-1.0, 1.0], size=batch)
    return params, x, y


def _probe(params, x, y, kind, t, idx, h, base):
    """Central difference at step h, or None when the probe leaves the linear piece."""
    old = t[idx]
    t[idx] = old + h
    lp, pp = _mean_loss(params, x, y, kind), _pattern(params, x, y, kind)
    t[idx] = old - h
    lm, pm = _mean_loss(params, x, y, kind), _pattern(params, x, y, kind)
    t[idx] = old
    if pp != base or pm != base:
        return None
    return (lp - lm) / (2 * h)


def check(params, x, y, kind, h=1e-3, fallback=(1e-4, 1e-5, 1e-6), floor=1e-8):
    """Compare every gradient entry with a central difference.

    Entries whose +-h probe crosses a kink are re-probed with the largest
    step from ``fallback`` that stays in the piece.  Returns a dict with the
    worst relative error over all verified entries, how many were verified
    at ``h``, how many needed a smaller step, how many could not be verified
    at all, and the total.
    """
    grads, _, _ = convnet.backward(params, x, y, kind)
    base = _pattern(params, x, y, kind)
    out = {"worst": 0.0, "at_h": 0, "smaller_h": 0, "unverified": 0, "total": 0}
    for name, t in params.tensors.items():
        for idx in np.ndindex(t.shape):
            out["total"] += 1
            numeric = _probe(params, x, y, kind, t, idx, h, base)
            key = "at_h"
            if numeric is None:
                key = "smaller_h"
                for step in fallback:
                    numeric = _probe(params, x, y, kind, t, idx, step, base)
                    if numeric is not None:
                        break
            if numeric is None:
                out["unverified"] += 1
                continue
            out[key] += 1
            analytic = float(grads[name][idx])
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)
            out["worst"] = max(out["worst"], rel)
    return out
