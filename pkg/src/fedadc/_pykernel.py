"""Pure numpy loss/gradient kernel (fallback for ``_ckernel``)."""
import numpy as np

BACKEND = "python"

_FLOOR = 1e-12


def loss_grad(dims, act, params, x, y, targets, lam, tau, wd):
    n_layers = len(dims) - 1
    n = x.shape[0]
    weights, biases, offsets = [], [], []
    pos = 0
    for l in range(n_layers):
        n_w = dims[l] * dims[l + 1]
        offsets.append(pos)
        weights.append(params[pos:pos + n_w].reshape(dims[l], dims[l + 1]))
        pos += n_w
        biases.append(params[pos:pos + dims[l + 1]])
        pos += dims[l + 1]

    hs = [x]
    h = x
    for l in range(n_layers - 1):
        z = h @ weights[l] + biases[l]
        h = np.maximum(z, 0.0) if act == "relu" else np.tanh(z)
        hs.append(h)
    z = h @ weights[-1] + biases[-1]

    rows = np.arange(n)
    loss = 0.0
    dz = None
    if lam < 1.0:
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        p = e / e.sum(axis=1, keepdims=True)
        loss += (1.0 - lam) * np.sum(-np.log(np.maximum(p[rows, y], _FLOOR))) / n
        p[rows, y] -= 1.0
        dz = (1.0 - lam) * p
    if lam > 0.0:
        zt = z / tau
        zt -= zt.max(axis=1, keepdims=True)
        e = np.exp(zt)
        q = e / e.sum(axis=1, keepdims=True)
        pos_t = targets > 0.0
        safe_t = np.where(pos_t, targets, 1.0)
        kl = np.where(pos_t, targets * (np.log(safe_t) - np.log(np.maximum(q, _FLOOR))), 0.0)
        loss += lam * np.sum(kl) / n
        dkl = lam * (q - targets) / tau
        dz = dkl if dz is None else dz + dkl
    dz /= n

    g = np.empty_like(params)
    for l in range(n_layers - 1, -1, -1):
        off = offsets[l]
        n_w = dims[l] * dims[l + 1]
        g[off:off + n_w] = (hs[l].T @ dz).ravel()
        g[off + n_w:off + n_w + dims[l + 1]] = dz.sum(axis=0)
        if l > 0:
            dh = dz @ weights[l].T
            if act == "relu":
                dz = dh * (hs[l] > 0.0)
            else:
                dz = dh * (1.0 - hs[l] * hs[l])
    if wd > 0.0:
        loss += 0.5 * wd * float(params @ params)
        g += wd * params
    return float(loss), g
