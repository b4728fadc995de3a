"""Central finite-difference check of the hand-written backward pass."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .network import Batch, DSTModel


def _as_float64(model: DSTModel) -> DSTModel:
    cfg = replace(model.cfg, dtype="float64")
    return DSTModel(model.ontology, model.vocab, cfg, params={k: v.astype(np.float64) for k, v in model.params.items()})


def _sample_entries(rng, g: np.ndarray, k: int) -> list[tuple]:
    """Up to ``k`` entries of a tensor, half of them from its nonzero gradient."""
    flat = g.ravel()
    nz = np.flatnonzero(flat)
    picks = []
    if len(nz):
        picks.extend(rng.choice(nz, size=min(len(nz), (k + 1) // 2), replace=False).tolist())
    rest = k - len(picks)
    if rest > 0:
        picks.extend(rng.choice(flat.size, size=min(flat.size, rest), replace=False).tolist())
    return [np.unravel_index(i, g.shape) for i in dict.fromkeys(picks)]


def grad_check(
    model: DSTModel,
    batch: Batch,
    eps: float = 1e-4,
    n_params: int = 200,
    seed: int = 0,
    train_mode: bool = False,
) -> tuple[float, dict[str, float]]:
    """Max relative error between analytic and numeric gradients.

    Entries are sampled from every parameter tensor so each head type and
    encoder layer is covered. Returns the overall maximum and the maximum
    per tensor name.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    if train_mode and model.cfg.dropout > 0:
        raise ValueError("gradient check needs a deterministic loss; run it with dropout off (eval mode)")
    m = _as_float64(model)
    batch = replace(batch, aux=batch.aux.astype(np.float64))
    loss0, _, grads = m.loss_and_grads(batch, train=False)
    if not np.isfinite(loss0):
        raise FloatingPointError(f"non-finite loss {loss0}")
    rng = np.random.default_rng(seed)
    per_tensor = max(1, -(-n_params // len(m.params)))
    errors: dict[str, float] = {}
    for name in sorted(m.params):
        p = m.params[name]
        for idx in _sample_entries(rng, grads[name], per_tensor):
            old = p[idx]
            p[idx] = old + eps
            lp = m.loss(batch)
            p[idx] = old - eps
            lm = m.loss(batch)
            p[idx] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}{idx}")
            gn = (lp - lm) / (2 * eps)
            ga = grads[name][idx]
            err = abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)
            errors[name] = max(errors.get(name, 0.0), float(err))
    return max(errors.values()), errors
