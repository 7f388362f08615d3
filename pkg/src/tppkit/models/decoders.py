"""Intensity / density decoders over encoder states.

Every decoder maps a conditioning state h (the encoder output at the start
of an inter-event segment) and an offset dt into either a K-vector of
intensities or, for the log-normal mixture, a density over dt plus a
categorical mark head. Functional forms:

  cond_poisson  lambda_k(dt) = softplus(W h + b)_k, constant in dt
  rmtpp         lambda(dt) = exp(v.h + b + w dt), marks via softmax head
  lnm           mixture of log-normals over dt times a categorical mark head
  mlp_mc        lambda_k(dt) = softplus(MLP(h ++ time_enc(dt)))_k
  sa_mc         query time_enc(dt) attends over visible states; softplus head

The *_mc kinds have no closed-form compensator; their integrals are
estimated by Monte Carlo averaging at uniform offsets within each segment.
"""

import numpy as np

from tppkit import autodiff as ad
from tppkit.models.encoder import temporal_encoding

LOG_2PI = float(np.log(2.0 * np.pi))

DECODER_KINDS = ("cond_poisson", "rmtpp", "lnm", "mlp_mc", "sa_mc")


def _xavier(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_decoder_params(dcfg, d_model: int, class_count: int, rng) -> dict:
    K, C = class_count, dcfg.mixture_components
    p = {}
    if dcfg.kind == "cond_poisson":
        p["dec.w"] = _xavier(rng, d_model, K)
        p["dec.b"] = np.zeros(K)
    elif dcfg.kind == "rmtpp":
        p["dec.v"] = _xavier(rng, d_model, 1)
        p["dec.bv"] = np.zeros(1)
        p["dec.wt"] = np.array([-0.1])  # time slope; exactly 0 would be singular
        p["dec.mark_w"] = _xavier(rng, d_model, K)
        p["dec.mark_b"] = np.zeros(K)
    elif dcfg.kind == "lnm":
        for name in ("loc", "scale", "mix"):
            p[f"dec.{name}_w"] = _xavier(rng, d_model, C)
            p[f"dec.{name}_b"] = np.zeros(C)
        p["dec.mark_w"] = _xavier(rng, d_model, K)
        p["dec.mark_b"] = np.zeros(K)
    elif dcfg.kind == "mlp_mc":
        hidden = dcfg.hidden_dim or d_model
        p["dec.w1"] = _xavier(rng, 2 * d_model, hidden)
        p["dec.b1"] = np.zeros(hidden)
        p["dec.w2"] = _xavier(rng, hidden, K)
        p["dec.b2"] = np.zeros(K)
    elif dcfg.kind == "sa_mc":
        a = dcfg.attention_dim or d_model
        p["dec.wq"] = _xavier(rng, d_model, a)
        p["dec.wk"] = _xavier(rng, d_model, a)
        p["dec.wv"] = _xavier(rng, d_model, a)
        p["dec.wo"] = _xavier(rng, a, K)
        p["dec.bo"] = np.zeros(K)
    else:
        raise ValueError(f"unknown decoder kind: {dcfg.kind}")
    if dcfg.learn_scale:
        p["dec.log_scale"] = np.zeros(K)
    return p


def _softplus_head(params: dict, dcfg, z: ad.Tensor) -> ad.Tensor:
    """softplus with a fixed or learnable per-mark scale; strictly positive."""
    if dcfg.learn_scale:
        s = ad.exp(params["dec.log_scale"])
        return ad.mul(s, ad.softplus_scaled(ad.div(z, s), 1.0))
    return ad.softplus_scaled(z, dcfg.softplus_scale)


def _mlp_lambda(params: dict, dcfg, h: ad.Tensor, enc_dt: np.ndarray) -> ad.Tensor:
    z = ad.concat([h, ad.tensor(enc_dt)], axis=-1)
    z = ad.tanh(ad.linear(z, params["dec.w1"], params["dec.b1"]))
    return _softplus_head(params, dcfg, ad.linear(z, params["dec.w2"], params["dec.b2"]))


def _sa_lambda(params: dict, dcfg, keys: ad.Tensor, values: ad.Tensor,
               enc_dt: np.ndarray, allowed: np.ndarray) -> ad.Tensor:
    """Attention of a time-encoded query over visible states, softplus head."""
    a = params["dec.wq"].shape[1]
    q = ad.matmul(ad.tensor(enc_dt), params["dec.wq"])
    kt = ad.swapaxes(keys, -1, -2)
    while kt.data.ndim < q.data.ndim:
        kt = ad.reshape(kt, kt.shape[:1] + (1,) + kt.shape[1:])
        values = ad.reshape(values, values.shape[:1] + (1,) + values.shape[1:])
    logits = ad.scale(ad.matmul(q, kt), 1.0 / np.sqrt(a))
    logits = ad.masked_fill(logits, ~allowed, -np.inf)
    out = ad.matmul(ad.softmax_lastdim(logits), values)
    return _softplus_head(params, dcfg, ad.linear(out, params["dec.wo"], params["dec.bo"]))


def _expand_states(h: ad.Tensor, m: int) -> ad.Tensor:
    """(B, S, d) -> (B, S, M, d) by broadcast."""
    B, S, d = h.shape
    return ad.add(ad.reshape(h, (B, S, 1, d)), ad.tensor(np.zeros((1, 1, m, 1))))


def intensity_grid(params: dict, dcfg, d_model: int, H: ad.Tensor, dt: np.ndarray) -> ad.Tensor:
    """Intensities (B, L, K) at offset dt[b, e] after the state H[:, e].

    H has one position per prefix length (start token plus events); entry e
    of the grid conditions on the first e events. The grid length follows
    dt, so callers may query any prefix up to the full sequence.
    """
    B, T, _ = H.shape
    L = dt.shape[-1]
    if L > T:
        raise ValueError(f"dt grid length {L} exceeds {T} encoder states")
    h = ad.slice_axis(H, 1, 0, L)
    if dcfg.kind == "cond_poisson":
        return _softplus_head(params, dcfg, ad.linear(h, params["dec.w"], params["dec.b"]))
    if dcfg.kind == "rmtpp":
        c = ad.linear(h, params["dec.v"], params["dec.bv"])                      # (B, L, 1)
        lam_tot = ad.exp(ad.add(c, ad.mul(params["dec.wt"], ad.tensor(dt[..., None]))))
        pi = ad.softmax_lastdim(ad.linear(h, params["dec.mark_w"], params["dec.mark_b"]))
        return ad.mul(pi, lam_tot)
    if dcfg.kind == "mlp_mc":
        return _mlp_lambda(params, dcfg, h, temporal_encoding(dt, d_model))
    if dcfg.kind == "sa_mc":
        keys = ad.matmul(H, params["dec.wk"])
        values = ad.matmul(H, params["dec.wv"])
        allowed = np.tril(np.ones((L, T), dtype=bool))  # query e sees states 0..e
        return _sa_lambda(params, dcfg, keys, values, temporal_encoding(dt, d_model),
                          allowed[None, :, :])
    raise ValueError(f"decoder kind {dcfg.kind} has no intensity grid")


def mc_compensator(params: dict, dcfg, d_model: int, H: ad.Tensor, batch: dict,
                   m_samples: int, rng) -> ad.Tensor:
    """Unbiased Monte Carlo estimate (B,) of the integral of total intensity.

    Each segment contributes seg_len * mean over m uniform offsets of the
    summed intensities, conditioning on the state at the segment start.
    """
    seg_lens, seg_mask = batch["seg_lens"], batch["seg_mask"]
    B, S = seg_lens.shape
    u = rng.uniform(size=(B, S, m_samples))
    offsets = u * seg_lens[:, :, None]
    enc = temporal_encoding(offsets, d_model)
    if dcfg.kind == "mlp_mc":
        lam = _mlp_lambda(params, dcfg, _expand_states(H, m_samples), enc)       # (B,S,M,K)
    elif dcfg.kind == "sa_mc":
        keys = ad.matmul(H, params["dec.wk"])
        values = ad.matmul(H, params["dec.wv"])
        allowed = np.tril(np.ones((S, S), dtype=bool))[None, :, None, :]         # p <= s
        lam = _sa_lambda(params, dcfg, keys, values, enc, allowed)
    else:
        raise ValueError(f"decoder kind {dcfg.kind} does not use MC integration")
    mean_tot = ad.reduce_mean(ad.reduce_sum(lam, axis=-1), axis=-1)              # (B, S)
    return ad.reduce_sum(ad.mul(mean_tot, ad.tensor(seg_lens * seg_mask)), axis=-1)


def closed_form_compensator(params: dict, dcfg, H: ad.Tensor, batch: dict) -> ad.Tensor:
    """Exact integral of total intensity for the closed-form kinds (B,)."""
    seg_lens, seg_mask = batch["seg_lens"], batch["seg_mask"]
    if dcfg.kind == "cond_poisson":
        lam = _softplus_head(params, dcfg, ad.linear(H, params["dec.w"], params["dec.b"]))
        tot = ad.reduce_sum(lam, axis=-1)                                        # (B, S)
        return ad.reduce_sum(ad.mul(tot, ad.tensor(seg_lens * seg_mask)), axis=-1)
    if dcfg.kind == "rmtpp":
        c = ad.reshape(ad.linear(H, params["dec.v"], params["dec.bv"]), seg_lens.shape)
        w = params["dec.wt"]
        w_val = float(w.data[0])
        ec = ad.exp(c)
        if abs(w_val) < 1e-8:
            per_seg = ad.mul(ec, ad.tensor(seg_lens))
        else:
            grown = ad.exp(ad.add(c, ad.mul(w, ad.tensor(seg_lens))))
            per_seg = ad.div(ad.sub(grown, ec), w)
        return ad.reduce_sum(ad.mul(per_seg, ad.tensor(seg_mask)), axis=-1)
    raise ValueError(f"decoder kind {dcfg.kind} has no closed-form compensator")


def log_event_terms(params: dict, dcfg, d_model: int, class_count: int,
                    H: ad.Tensor, batch: dict) -> ad.Tensor:
    """Per-event log-likelihood terms (B, L), already masked.

    log lambda_{k_i}(t_i) for intensity kinds; log density x mark probability
    for the log-normal mixture.
    """
    marks, mask, dt = batch["marks"], batch["mask"], batch["event_dt"]
    B, L = marks.shape
    onehot = np.eye(class_count)[marks]
    h = ad.slice_axis(H, 1, 0, L)

    if dcfg.kind == "lnm":
        y = np.log(np.maximum(dt, 1e-300))                                       # pad dt is 1.0
        locs = ad.linear(h, params["dec.loc_w"], params["dec.loc_b"])            # (B, L, C)
        sig = ad.add(ad.softplus_scaled(ad.linear(h, params["dec.scale_w"], params["dec.scale_b"])),
                     ad.tensor(1e-3))
        logmix = ad.log_softmax_lastdim(ad.linear(h, params["dec.mix_w"], params["dec.mix_b"]))
        z = ad.div(ad.sub(ad.tensor(y[..., None]), locs), sig)
        comp_logpdf = ad.sub(ad.scale(ad.mul(z, z), -0.5),
                             ad.add(ad.log(sig), ad.tensor(0.5 * LOG_2PI)))
        log_q = ad.sub(ad.logsumexp_lastdim(ad.add(logmix, comp_logpdf)), ad.tensor(y))
        logpi = ad.log_softmax_lastdim(ad.linear(h, params["dec.mark_w"], params["dec.mark_b"]))
        picked = ad.reduce_sum(ad.mul(logpi, ad.tensor(onehot)), axis=-1)
        return ad.mul(ad.add(log_q, picked), ad.tensor(mask))

    if dcfg.kind == "rmtpp":
        # log lambda_k = c + w dt + log pi_k, computed in the log domain
        c = ad.reshape(ad.linear(h, params["dec.v"], params["dec.bv"]), (B, L))
        logpi = ad.log_softmax_lastdim(ad.linear(h, params["dec.mark_w"], params["dec.mark_b"]))
        picked = ad.reduce_sum(ad.mul(logpi, ad.tensor(onehot)), axis=-1)
        log_lam = ad.add(ad.add(c, ad.mul(params["dec.wt"], ad.tensor(dt))), picked)
        return ad.mul(log_lam, ad.tensor(mask))

    lam = intensity_grid(params, dcfg, d_model, H, dt)
    picked = ad.reduce_sum(ad.mul(ad.log(lam), ad.tensor(onehot)), axis=-1)
    return ad.mul(picked, ad.tensor(mask))


def lnm_mixture(params: dict, h: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Numpy view of the inter-event mixture at a single state h: (locs, sigmas, weights)."""
    locs = h @ params["dec.loc_w"].data + params["dec.loc_b"].data
    sig = np.logaddexp(0.0, h @ params["dec.scale_w"].data + params["dec.scale_b"].data) + 1e-3
    raw = h @ params["dec.mix_w"].data + params["dec.mix_b"].data
    w = np.exp(raw - raw.max())
    return locs, sig, w / w.sum()


def lnm_density(params: dict, h: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """Mixture-of-log-normals density of the next inter-event time."""
    locs, sig, w = lnm_mixture(params, h)
    dt = np.asarray(dt, dtype=np.float64)[..., None]
    y = np.log(np.maximum(dt, 1e-300))
    comp = np.exp(-0.5 * ((y - locs) / sig) ** 2) / (sig * np.sqrt(2.0 * np.pi))
    return (comp * w).sum(axis=-1) / np.maximum(dt[..., 0], 1e-300)
