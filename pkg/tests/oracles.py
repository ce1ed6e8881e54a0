"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: explicit loops, plain numpy, no reuse
of the package's autodiff ops. These stay independent of the code paths they
check.
"""

import numpy as np


def naive_softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def naive_mha(q_tokens, k_tokens, v_tokens, wq, wk, wv, wo, bq, bk, bv, bo, heads):
    """Loop-based multi-head attention over [n, d] token matrices.

    Weights are [out, in] like the package's linear layers; head n owns
    columns n*hd:(n+1)*hd of each projection output.
    """
    n_q, d = q_tokens.shape
    n_k = k_tokens.shape[0]
    hd = d // heads
    q = q_tokens @ wq.T + bq
    k = k_tokens @ wk.T + bk
    v = v_tokens @ wv.T + bv
    mixed = np.zeros((n_q, d), dtype=q.dtype)
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        for i in range(n_q):
            scores = np.array([qh[i] @ kh[j] for j in range(n_k)]) / np.sqrt(hd)
            attn = naive_softmax(scores)
            mixed[i, sl] = sum(attn[j] * vh[j] for j in range(n_k))
    return mixed @ wo.T + bo


def naive_mha_from_weights(q_tokens, k_tokens, v_tokens, weights, heads):
    return naive_mha(
        q_tokens, k_tokens, v_tokens,
        weights.query.weight.data, weights.key.weight.data,
        weights.value.weight.data, weights.out.weight.data,
        weights.query.bias.data, weights.key.bias.data,
        weights.value.bias.data, weights.out.bias.data, heads)


def naive_lsa(x, weights, window, heads):
    """Per-window attention on [L, L, d], one sample."""
    rows, cols, d = x.shape
    m = rows // window
    out = np.zeros_like(x)
    for wi in range(m):
        for wj in range(m):
            tile = x[wi * window:(wi + 1) * window, wj * window:(wj + 1) * window, :]
            tokens = tile.reshape(window * window, d)
            mixed = naive_mha_from_weights(tokens, tokens, tokens, weights, heads)
            out[wi * window:(wi + 1) * window, wj * window:(wj + 1) * window, :] = \
                mixed.reshape(window, window, d)
    return out


def naive_conv2d(x, kernel, bias, stride, padding):
    """Six-loop cross-correlation on one [c, h, w] sample."""
    ci, h, w = x.shape
    co, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((co, oh, ow), dtype=x.dtype)
    for o in range(co):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(ci):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * stride + a, j * stride + b] * kernel[o, c, a, b]
                out[o, i, j] = acc + bias[o]
    return out


def naive_gsa(x, weights, conv_kernel, conv_bias, window, heads):
    """Subsample with a naive strided conv, then dense cross-attention."""
    rows, cols, d = x.shape
    m = rows // window
    fmap = naive_conv2d(x.transpose(2, 0, 1), conv_kernel, conv_bias,
                        stride=window, padding=0)
    summary = fmap.reshape(d, m * m).T
    queries = x.reshape(rows * cols, d)
    mixed = naive_mha_from_weights(queries, summary, summary, weights, heads)
    return mixed.reshape(rows, cols, d)
