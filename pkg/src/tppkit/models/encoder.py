"""History encoders: sinusoidal time embedding, causal self-attention, RNN.

The encoder consumes a start token followed by the events of a sequence and
produces one state per position; the state at position i summarizes the
first i events and conditions everything that happens before event i+1.
"""

import numpy as np

from tppkit import autodiff as ad


def temporal_encoding(t, d_model: int) -> np.ndarray:
    """Sinusoidal encoding of (possibly batched) timestamps.

    Entry 2j is sin(t / 10000^(2j/d_model)), entry 2j+1 the matching cosine.
    """
    if d_model % 2 != 0:
        raise ValueError("d_model must be even")
    t = np.asarray(t, dtype=np.float64)
    denom = np.power(10000.0, np.arange(0, d_model, 2) / d_model)
    angles = t[..., None] / denom
    enc = np.empty(t.shape + (d_model,))
    enc[..., 0::2] = np.sin(angles)
    enc[..., 1::2] = np.cos(angles)
    return enc


def _dropout(x: ad.Tensor, rate: float, train: bool, rng) -> ad.Tensor:
    if not train or rate <= 0.0 or rng is None:
        return x
    keep = (rng.uniform(size=x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, ad.tensor(keep))


def _split_heads(x: ad.Tensor, n_heads: int) -> ad.Tensor:
    B, T, d = x.shape
    x = ad.reshape(x, (B, T, n_heads, d // n_heads))
    return ad.swapaxes(x, 1, 2)  # (B, h, T, dh)


def _merge_heads(x: ad.Tensor) -> ad.Tensor:
    B, h, T, dh = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (B, T, h * dh))


def attention(query: ad.Tensor, keys: ad.Tensor, values: ad.Tensor, allowed: np.ndarray) -> ad.Tensor:
    """Scaled dot-product attention; `allowed` marks the visible key positions."""
    dh = query.shape[-1]
    logits = ad.scale(ad.matmul(query, ad.swapaxes(keys, -1, -2)), 1.0 / np.sqrt(dh))
    logits = ad.masked_fill(logits, ~allowed, -np.inf)
    return ad.matmul(ad.softmax_lastdim(logits), values)


def _self_attention_block(params: dict, prefix: str, x: ad.Tensor, allowed: np.ndarray,
                          n_heads: int, dropout: float, train: bool, rng) -> ad.Tensor:
    q = _split_heads(ad.matmul(x, params[f"{prefix}.wq"]), n_heads)
    k = _split_heads(ad.matmul(x, params[f"{prefix}.wk"]), n_heads)
    v = _split_heads(ad.matmul(x, params[f"{prefix}.wv"]), n_heads)
    att = attention(q, k, v, allowed[:, None, :, :])  # broadcast over heads
    att = ad.matmul(_merge_heads(att), params[f"{prefix}.wo"])
    x = ad.layer_norm(ad.add(x, _dropout(att, dropout, train, rng)),
                      params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"])
    ff = ad.linear(ad.tanh(ad.linear(x, params[f"{prefix}.ff1_w"], params[f"{prefix}.ff1_b"])),
                   params[f"{prefix}.ff2_w"], params[f"{prefix}.ff2_b"])
    return ad.layer_norm(ad.add(x, _dropout(ff, dropout, train, rng)),
                         params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"])


def _encode_window(params: dict, cfg, x: ad.Tensor, key_real: np.ndarray,
                   train: bool, rng) -> ad.Tensor:
    """One full pass over a token window (B, T, d)."""
    B, T, _ = x.shape
    if cfg.kind == "self_attention":
        causal = np.tril(np.ones((T, T), dtype=bool))
        allowed = causal[None, :, :] & key_real[:, None, :]
        allowed[..., 0] = True  # padding queries still need one visible key
        for layer in range(cfg.n_layers):
            x = _self_attention_block(params, f"enc{layer}", x, allowed,
                                      cfg.n_heads, cfg.dropout, train, rng)
        return x
    if cfg.kind == "recurrent":
        for layer in range(cfg.n_layers):
            wx, wh = params[f"enc{layer}.wx"], params[f"enc{layer}.wh"]
            b = params[f"enc{layer}.b"]
            xs = ad.matmul(x, wx)
            h = ad.tensor(np.zeros((B, cfg.d_model)))
            outs = []
            for t in range(T):
                step = ad.slice_axis(xs, 1, t, t + 1)
                h = ad.tanh(ad.add(ad.add(ad.reshape(step, (B, cfg.d_model)), ad.matmul(h, wh)), b))
                outs.append(ad.reshape(h, (B, 1, cfg.d_model)))
            x = _dropout(ad.concat(outs, axis=1), cfg.dropout, train, rng)
        return x
    raise ValueError(f"unknown encoder kind: {cfg.kind}")


def encode_tokens(params: dict, cfg, token_idx: np.ndarray, token_times: np.ndarray,
                  key_real: np.ndarray, train: bool = False, rng=None) -> ad.Tensor:
    """Embed tokens and run the encoder, windowing past max_context tokens.

    Long sequences are re-encoded in sliding windows with 50% overlap; each
    emitted state then conditions on at least max_context // 2 predecessors.
    """
    emb = ad.embedding_gather(params["mark_emb"], token_idx)
    x = ad.add(emb, ad.tensor(temporal_encoding(token_times, cfg.d_model)))

    T = token_idx.shape[1]
    C = cfg.max_context
    if T <= C:
        return _encode_window(params, cfg, x, key_real, train, rng)

    stride = max(C // 2, 1)
    outs = [_encode_window(params, cfg, ad.slice_axis(x, 1, 0, C), key_real[:, :C], train, rng)]
    pos = C
    while pos < T:
        start = pos - stride
        stop = min(start + C, T)
        chunk = _encode_window(params, cfg, ad.slice_axis(x, 1, start, stop),
                               key_real[:, start:stop], train, rng)
        outs.append(ad.slice_axis(chunk, 1, pos - start, stop - start))
        pos = stop
    return ad.concat(outs, axis=1)


def apply_conditioner(params: dict, hidden: ad.Tensor, static: np.ndarray,
                      n_layers: int) -> ad.Tensor:
    """MLP over the concatenation of encoder states and static features."""
    B, T, _ = hidden.shape
    p = np.broadcast_to(static[:, None, :], (B, T, static.shape[-1]))
    x = ad.concat([hidden, ad.tensor(p.copy())], axis=-1)
    for i in range(n_layers):
        x = ad.linear(x, params[f"cond{i}.w"], params[f"cond{i}.b"])
        if i < n_layers - 1:
            x = ad.tanh(x)
    return x
