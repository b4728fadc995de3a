"""Small pre-LN transformer encoder with an explicit backward pass.

All parameters live in a flat ``dict[str, ndarray]`` so optimizers,
checkpoints and the gradient checker can treat them uniformly.
"""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv)


def layer_norm_backward(dy, g, cache):
    xh, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xh).sum(axes)
    db = dy.sum(axes)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def gelu_backward(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def scatter_add_rows(target, idx, rows):
    """``target[idx] += rows`` with repeated indices, in a fixed order."""
    order = np.argsort(idx, kind="stable")
    uniq, starts = np.unique(idx[order], return_index=True)
    target[uniq] += np.add.reduceat(rows[order], starts, axis=0)


def init_encoder(rng: np.random.Generator, vocab_size: int, n_roles: int, d: int, n_layers: int, d_ff: int,
                 emb_std: float = 1.0) -> dict[str, np.ndarray]:
    """Fan-in scaled weights; embeddings on the scale of the positions.

    A fixed small std (0.02) left attention uniform at d=64 and the
    pooled vector learned very slowly.
    """

    def w(n_in, n_out):
        return rng.normal(0, n_in**-0.5, (n_in, n_out))

    p = {
        "emb.token": rng.normal(0, emb_std, (vocab_size, d)),
        "emb.role": rng.normal(0, emb_std, (n_roles, d)),
    }
    for i in range(n_layers):
        pre = f"layer{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for m in ("q", "k", "v", "o"):
            p[pre + f"attn.w{m}"] = w(d, d)
            p[pre + f"attn.b{m}"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ffn.w1"] = w(d, d_ff)
        p[pre + "ffn.b1"] = np.zeros(d_ff)
        p[pre + "ffn.w2"] = w(d_ff, d)
        p[pre + "ffn.b2"] = np.zeros(d)
    p["final_ln.g"] = np.ones(d)
    p["final_ln.b"] = np.zeros(d)
    p["pool.w"] = w(d, d)
    p["pool.b"] = np.zeros(d)
    return p


class Encoder:
    """Token + role embeddings, fixed sinusoidal positions, pre-LN blocks.

    ``forward`` returns the pooled vector (tanh projection of position 0)
    and the per-token representations. Dropout is applied to both outputs
    in training mode only.
    """

    def __init__(self, n_layers: int, n_heads: int, dropout: float, max_positions: int = 512):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.dropout = dropout
        self.max_positions = max_positions
        self._pos: dict[tuple[int, str], np.ndarray] = {}

    def positions(self, n: int, d: int, dtype) -> np.ndarray:
        key = (d, np.dtype(dtype).name)
        if key not in self._pos:
            self._pos[key] = sinusoidal_positions(self.max_positions, d).astype(dtype)
        return self._pos[key][:n]

    def forward(self, p, ids, roles, valid, train=False, rng=None):
        B, L = ids.shape
        d = p["emb.token"].shape[1]
        h = self.n_heads
        dh = d // h
        dtype = p["emb.token"].dtype
        x = p["emb.token"][ids] + p["emb.role"][roles] + self.positions(L, d, dtype)[None]
        drop = train and self.dropout > 0
        keep = 1.0 - self.dropout

        def mask(shape):
            return (rng.random(shape, dtype=np.float32) < keep).astype(dtype) / keep if drop else None

        m_emb = mask(x.shape)
        if m_emb is not None:
            x = x * m_emb
        key_bias = np.where(valid, 0.0, -1e9).astype(dtype)[:, None, None, :]
        scale = 1.0 / math.sqrt(dh)
        layers = []
        for i in range(self.n_layers):
            pre = f"layer{i}."
            a, ln1 = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = (a @ p[pre + "attn.wq"] + p[pre + "attn.bq"]).reshape(B, L, h, dh).transpose(0, 2, 1, 3)
            k = (a @ p[pre + "attn.wk"] + p[pre + "attn.bk"]).reshape(B, L, h, dh).transpose(0, 2, 1, 3)
            v = (a @ p[pre + "attn.wv"] + p[pre + "attn.bv"]).reshape(B, L, h, dh).transpose(0, 2, 1, 3)
            att = softmax(q @ k.transpose(0, 1, 3, 2) * scale + key_bias)
            c = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
            m_att, m_ffn = mask(x.shape), mask(x.shape)
            branch = c @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
            x_mid = x + (branch if m_att is None else branch * m_att)
            a2, ln2 = layer_norm(x_mid, p[pre + "ln2.g"], p[pre + "ln2.b"])
            u = a2 @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]
            gu, t = gelu(u)
            branch = gu @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
            x = x_mid + (branch if m_ffn is None else branch * m_ffn)
            layers.append((a, ln1, q, k, v, att, c, a2, ln2, u, gu, t, m_att, m_ffn))
        hf, lnf = layer_norm(x, p["final_ln.g"], p["final_ln.b"])
        pooled = np.tanh(hf[:, 0] @ p["pool.w"] + p["pool.b"])
        tokens = hf
        masks = None
        if drop:
            masks = (mask(pooled.shape), mask(tokens.shape), m_emb)
            pooled_out, tokens_out = pooled * masks[0], tokens * masks[1]
        else:
            pooled_out, tokens_out = pooled, tokens
        cache = (ids, roles, layers, hf, lnf, pooled, masks, scale)
        return pooled_out, tokens_out, cache

    def backward(self, p, cache, d_pooled, d_tokens, grads):
        ids, roles, layers, hf, lnf, pooled, masks, scale = cache
        B, L = ids.shape
        d = hf.shape[-1]
        h = self.n_heads
        dh = d // h
        if masks is not None:
            d_pooled = d_pooled * masks[0]
            d_tokens = d_tokens * masks[1]
        dpre = d_pooled * (1.0 - pooled * pooled)
        grads["pool.w"] += hf[:, 0].T @ dpre
        grads["pool.b"] += dpre.sum(0)
        dhf = d_tokens.copy()
        dhf[:, 0] += dpre @ p["pool.w"].T
        dx, dg, db = layer_norm_backward(dhf, p["final_ln.g"], lnf)
        grads["final_ln.g"] += dg
        grads["final_ln.b"] += db
        for i in reversed(range(self.n_layers)):
            pre = f"layer{i}."
            a, ln1, q, k, v, att, c, a2, ln2, u, gu, t, m_att, m_ffn = layers[i]
            # feed-forward branch
            dxb = dx if m_ffn is None else dx * m_ffn
            grads[pre + "ffn.w2"] += gu.reshape(-1, gu.shape[-1]).T @ dxb.reshape(-1, d)
            grads[pre + "ffn.b2"] += dxb.sum((0, 1))
            du = gelu_backward(dxb @ p[pre + "ffn.w2"].T, u, t)
            grads[pre + "ffn.w1"] += a2.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
            grads[pre + "ffn.b1"] += du.sum((0, 1))
            da2 = du @ p[pre + "ffn.w1"].T
            dxm, dg, db = layer_norm_backward(da2, p[pre + "ln2.g"], ln2)
            grads[pre + "ln2.g"] += dg
            grads[pre + "ln2.b"] += db
            dxm = dxm + dx
            # attention branch
            dxb = dxm if m_att is None else dxm * m_att
            grads[pre + "attn.wo"] += c.reshape(-1, d).T @ dxb.reshape(-1, d)
            grads[pre + "attn.bo"] += dxb.sum((0, 1))
            dc = (dxb @ p[pre + "attn.wo"].T).reshape(B, L, h, dh).transpose(0, 2, 1, 3)
            datt = dc @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ dc
            ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            a_flat = a.reshape(-1, d)
            da = np.zeros_like(a)
            for name, g_ in (("q", dq), ("k", dk), ("v", dv)):
                g2 = g_.transpose(0, 2, 1, 3).reshape(B, L, d)
                grads[pre + f"attn.w{name}"] += a_flat.T @ g2.reshape(-1, d)
                grads[pre + f"attn.b{name}"] += g2.sum((0, 1))
                da += g2 @ p[pre + f"attn.w{name}"].T
            dxi, dg, db = layer_norm_backward(da, p[pre + "ln1.g"], ln1)
            grads[pre + "ln1.g"] += dg
            grads[pre + "ln1.b"] += db
            dx = dxm + dxi
        if masks is not None:
            dx = dx * masks[2]
        flat = dx.reshape(-1, d)
        scatter_add_rows(grads["emb.token"], ids.ravel(), flat)
        scatter_add_rows(grads["emb.role"], roles.ravel(), flat)
