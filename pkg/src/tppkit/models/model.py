"""Neural temporal point process models: config, likelihood, prediction, IO."""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from tppkit import autodiff as ad
from tppkit import rng as rngmod
from tppkit.autodiff import NumericalError
from tppkit.data import EventSequence
from tppkit.models import decoders as dec
from tppkit.models.encoder import apply_conditioner, encode_tokens


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "self_attention"  # or "recurrent"
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    dropout: float = 0.1
    max_context: int = 128

    def __post_init__(self):
        if self.kind not in ("self_attention", "recurrent"):
            raise ValueError(f"unknown encoder kind: {self.kind}")
        if self.kind == "self_attention" and self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_context < 1:
            raise ValueError("max_context must be >= 1")


@dataclass(frozen=True)
class DecoderConfig:
    kind: str = "cond_poisson"
    mixture_components: int = 8
    mc_samples_train: int = 20
    mc_samples_eval: int = 200
    hidden_dim: int | None = None     # mlp_mc; defaults to d_model
    attention_dim: int | None = None  # sa_mc; defaults to d_model
    softplus_scale: float = 1.0
    learn_scale: bool = False

    def __post_init__(self):
        if self.kind not in dec.DECODER_KINDS:
            raise ValueError(f"unknown decoder kind: {self.kind} (choose from {dec.DECODER_KINDS})")
        if self.mixture_components < 1 or self.mc_samples_train < 1 or self.mc_samples_eval < 1:
            raise ValueError("mixture components and MC sample counts must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    class_count: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    static_dim: int | None = None               # conditioner present iff set
    conditioner_hidden: tuple | None = None     # None -> (d_model,); () -> linear
    seed: int = 0

    def conditioner_sizes(self) -> tuple:
        if self.static_dim is None:
            return ()
        hidden = self.conditioner_hidden
        if hidden is None:
            hidden = (self.encoder.d_model,)
        return tuple(hidden) + (self.encoder.d_model,)


@dataclass(frozen=True)
class MarkDistribution:
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if np.any(self.probs < 0) or abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError("mark probabilities must be non-negative and sum to 1")

    def argmax(self) -> int:
        return int(np.argmax(self.probs))  # ties break toward the lowest index


# mapping used by the command line tool
CLI_MODEL_NAMES = {
    "sa-cond-poisson": "cond_poisson",
    "sa-lnm": "lnm",
    "sa-mlp-mc": "mlp_mc",
    "sa-rmtpp-poisson": "rmtpp",
    "sa-sa-mc": "sa_mc",
}


def pad_batch(sequences, class_count: int, static_dim: int | None = None) -> dict:
    """Pad a list of EventSequence into dense arrays with masks.

    Position layout: tokens are [start] + events, so encoder outputs have
    L+1 positions and position i is the state after i events. Segment i runs
    from event i (or 0) to event i+1 (or t_end). Padded slots carry benign
    values and zero masks.
    """
    B = len(sequences)
    L = max((len(s) for s in sequences), default=0)
    times = np.zeros((B, L))
    marks = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L))
    event_dt = np.ones((B, L))
    t_end = np.zeros(B)
    seg_lens = np.zeros((B, L + 1))
    seg_mask = np.zeros((B, L + 1))
    token_times = np.zeros((B, L + 1))
    static = np.zeros((B, static_dim)) if static_dim else None

    for b, seq in enumerate(sequences):
        n = len(seq)
        t = seq.times()
        t_end[b] = seq.t_end
        if n:
            times[b, :n] = t
            marks[b, :n] = seq.marks()
            mask[b, :n] = 1.0
            event_dt[b, 0] = t[0]
            event_dt[b, 1:n] = np.diff(t)
            times[b, n:] = t[-1]
            token_times[b, 1 : n + 1] = t
            token_times[b, n + 1 :] = t[-1]
        bounds = np.concatenate([[0.0], t, [seq.t_end]])
        seg_lens[b, : n + 1] = np.diff(bounds)
        seg_mask[b, : n + 1] = 1.0
        if static_dim:
            if seq.static_features is None:
                raise ValueError(f"sequence {seq.seq_id!r} lacks static features")
            static[b] = seq.static_features

    token_idx = np.concatenate([np.full((B, 1), class_count, dtype=np.int64), marks], axis=1)
    key_real = np.concatenate([np.ones((B, 1), dtype=bool), mask.astype(bool)], axis=1)
    return {
        "times": times, "marks": marks, "mask": mask, "event_dt": event_dt,
        "t_end": t_end, "seg_lens": seg_lens, "seg_mask": seg_mask,
        "token_idx": token_idx, "token_times": token_times, "key_real": key_real,
        "static": static, "n_events": float(mask.sum()),
    }


class NeuralTppModel:
    """Encoder + decoder with a named parameter store.

    Parameters are float64 autodiff tensors; evaluation paths run the same
    ops without a tape. Instances are cheap to construct from a config and
    round-trip exactly through save_checkpoint / load_checkpoint.
    """

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()

    # -- parameters -----------------------------------------------------------

    def _init_params(self) -> dict:
        cfg, enc = self.config, self.config.encoder
        rng = rngmod.make_rng(cfg.seed)
        d, K = enc.d_model, cfg.class_count
        p = {"mark_emb": rng.normal(0.0, 1.0 / math.sqrt(d), size=(K + 1, d))}
        for layer in range(enc.n_layers):
            pre = f"enc{layer}"
            if enc.kind == "self_attention":
                for name in ("wq", "wk", "wv", "wo"):
                    p[f"{pre}.{name}"] = dec._xavier(rng, d, d)
                p[f"{pre}.ff1_w"] = dec._xavier(rng, d, 2 * d)
                p[f"{pre}.ff1_b"] = np.zeros(2 * d)
                p[f"{pre}.ff2_w"] = dec._xavier(rng, 2 * d, d)
                p[f"{pre}.ff2_b"] = np.zeros(d)
                for name in ("ln1_g", "ln2_g"):
                    p[f"{pre}.{name}"] = np.ones(d)
                for name in ("ln1_b", "ln2_b"):
                    p[f"{pre}.{name}"] = np.zeros(d)
            else:
                p[f"{pre}.wx"] = dec._xavier(rng, d, d)
                p[f"{pre}.wh"] = dec._xavier(rng, d, d)
                p[f"{pre}.b"] = np.zeros(d)
        sizes = self.config.conditioner_sizes()
        if sizes:
            fan_in = d + self.config.static_dim
            for i, out in enumerate(sizes):
                p[f"cond{i}.w"] = dec._xavier(rng, fan_in, out)
                p[f"cond{i}.b"] = np.zeros(out)
                fan_in = out
        p.update(dec.init_decoder_params(cfg.decoder, d, K, rng))
        return {k: ad.tensor(v, requires_grad=True) for k, v in p.items()}

    def parameters(self) -> dict:
        return self.params

    # -- forward --------------------------------------------------------------

    def encode(self, batch: dict, train: bool = False, rng=None) -> ad.Tensor:
        H = encode_tokens(self.params, self.config.encoder, batch["token_idx"],
                          batch["token_times"], batch["key_real"], train, rng)
        sizes = self.config.conditioner_sizes()
        if sizes:
            if batch["static"] is None:
                raise ValueError("model has a static-feature conditioner but batch lacks static features")
            H = apply_conditioner(self.params, H, batch["static"], len(sizes))
        return H

    def nll_batch(self, batch: dict, train: bool = False, rng=None,
                  mc_seed: int = 0) -> ad.Tensor:
        """Mean per-sequence negative log-likelihood of a padded batch."""
        dcfg = self.config.decoder
        d = self.config.encoder.d_model
        H = self.encode(batch, train, rng)
        terms = dec.log_event_terms(self.params, dcfg, d, self.config.class_count, H, batch)
        loglik = ad.reduce_sum(terms, axis=-1)
        if dcfg.kind in ("cond_poisson", "rmtpp"):
            loglik = ad.sub(loglik, dec.closed_form_compensator(self.params, dcfg, H, batch))
        elif dcfg.kind in ("mlp_mc", "sa_mc"):
            m = dcfg.mc_samples_train if train else dcfg.mc_samples_eval
            mc_rng = rng if (train and rng is not None) else rngmod.make_rng(mc_seed)
            loglik = ad.sub(loglik, dec.mc_compensator(self.params, dcfg, d, H, batch, m, mc_rng))
        return ad.scale(ad.reduce_sum(loglik), -1.0 / max(batch["mask"].shape[0], 1))

    def history_embedding(self, seq: EventSequence) -> np.ndarray:
        """Per-prefix states (n+1, d_model): row i conditions on the first i events."""
        batch = pad_batch([seq], self.config.class_count, self.config.static_dim)
        return self.encode(batch).data[0]

    def nll(self, seq: EventSequence, mc_seed: int = 0) -> float:
        """Negative log-likelihood of one sequence (non-finite values raise)."""
        batch = pad_batch([seq], self.config.class_count, self.config.static_dim)
        value = float(self.nll_batch(batch, train=False, mc_seed=mc_seed).data)
        if not np.isfinite(value):
            idx = self._first_bad_interval(batch)
            raise NumericalError(f"non-finite NLL for {seq.seq_id!r} at interval {idx}")
        return value

    def _first_bad_interval(self, batch: dict) -> int:
        dcfg = self.config.decoder
        d = self.config.encoder.d_model
        H = self.encode(batch)
        terms = dec.log_event_terms(self.params, dcfg, d, self.config.class_count, H, batch)
        bad = np.argwhere(~np.isfinite(terms.data))
        return int(bad[0, 1]) if len(bad) else int(batch["mask"].sum())

    # -- prediction -----------------------------------------------------------

    def _prefix_seq(self, prefix) -> EventSequence:
        if isinstance(prefix, EventSequence):
            t_last = prefix.events[-1].time if prefix.events else 0.0
            return EventSequence(events=prefix.events, t_end=t_last,
                                 static_features=prefix.static_features, seq_id=prefix.seq_id)
        events = tuple(prefix)
        t_last = events[-1].time if events else 0.0
        return EventSequence(events=events, t_end=t_last)

    def _prefix_batch(self, seq: EventSequence) -> dict:
        if self.config.static_dim and seq.static_features is None:
            raise ValueError("model has a conditioner; prefix needs static features")
        return pad_batch([seq], self.config.class_count, self.config.static_dim)

    def intensities(self, prefix: EventSequence | list, t_next: float) -> np.ndarray:
        """Intensity K-vector at t_next given the events of `prefix`."""
        seq = self._prefix_seq(prefix)
        t_last = seq.events[-1].time if seq.events else 0.0
        if t_next < t_last:
            raise ValueError(f"t_next {t_next} earlier than last prefix event {t_last}")
        if self.config.decoder.kind == "lnm":
            raise ValueError("lnm decoder defines a density, not intensities")
        batch = self._prefix_batch(seq)
        H = self.encode(batch)
        n = len(seq.events)
        grid = dec.intensity_grid(self.params, self.config.decoder,
                                  self.config.encoder.d_model, H,
                                  np.full((1, n + 1), t_next - t_last))
        return grid.data[0, n]

    def predict_mark(self, prefix: EventSequence | list, t_next: float) -> MarkDistribution:
        """Distribution of the next mark given it occurs at t_next."""
        dcfg = self.config.decoder
        if dcfg.kind in ("lnm", "rmtpp"):
            seq = self._prefix_seq(prefix)
            batch = self._prefix_batch(seq)
            h = self.encode(batch).data[0, len(seq.events)]
            logits = h @ self.params["dec.mark_w"].data + self.params["dec.mark_b"].data
            e = np.exp(logits - logits.max())
            return MarkDistribution(e / e.sum())
        lam = self.intensities(prefix, t_next)
        return MarkDistribution(lam / lam.sum())

    def sample_next(self, prefix: EventSequence | list, seed) -> tuple[float, int | None]:
        """Draw (dt, mark) for the next event after the prefix.

        Exact inverse-CDF sampling for the closed-form kinds; thinning with a
        probed dominating rate for the MC kinds. Returns (inf, None) when the
        model puts positive mass on "no further event".
        """
        rng = rngmod.make_rng(seed)
        seq = self._prefix_seq(prefix)
        t_last = seq.events[-1].time if seq.events else 0.0
        dcfg = self.config.decoder
        batch = self._prefix_batch(seq)
        H = self.encode(batch)
        h = H.data[0, len(seq.events)]

        if dcfg.kind == "cond_poisson":
            lam = self.intensities(prefix, t_last)
            tot = float(lam.sum())
            dt = rng.exponential(1.0 / tot)
            mark = int(rng.choice(len(lam), p=lam / tot))
            return dt, mark
        if dcfg.kind == "rmtpp":
            c = float(h @ self.params["dec.v"].data[:, 0] + self.params["dec.bv"].data[0])
            w = float(self.params["dec.wt"].data[0])
            u = rng.uniform()
            if abs(w) < 1e-12:
                dt = rng.exponential(np.exp(-c))
            else:
                arg = math.exp(c) - w * math.log(u)
                if arg <= 0.0:
                    return math.inf, None
                dt = (math.log(arg) - c) / w
            probs = self.predict_mark(prefix, t_last).probs
            return float(dt), int(rng.choice(len(probs), p=probs))
        if dcfg.kind == "lnm":
            locs, sig, weights = dec.lnm_mixture(self.params, h)
            comp = int(rng.choice(len(weights), p=weights))
            dt = float(np.exp(locs[comp] + sig[comp] * rng.normal()))
            probs = self.predict_mark(prefix, t_last).probs
            return dt, int(rng.choice(len(probs), p=probs))

        # MC kinds: thinning against a probed dominating rate
        horizon = 50.0
        probe = np.linspace(0.0, horizon, 201)
        totals = np.array([self.intensities(prefix, t_last + float(x)).sum() for x in probe])
        lam_dom = float(totals.max()) * 2.0
        if not np.isfinite(lam_dom) or lam_dom <= 0:
            raise NumericalError("dominating-rate construction failed: probed intensities "
                                 f"max {totals.max():.3g}")
        t = 0.0
        for _ in range(100_000):
            t += rng.exponential(1.0 / lam_dom)
            if t > 10.0 * horizon:
                return math.inf, None
            lam = self.intensities(prefix, t_last + t)
            tot = float(lam.sum())
            if tot > lam_dom:
                raise NumericalError(
                    f"dominating rate {lam_dom:.3g} exceeded by intensity {tot:.3g} at dt={t:.3g}")
            if rng.uniform() * lam_dom <= tot:
                return t, int(rng.choice(len(lam), p=lam / tot))
        raise NumericalError("thinning failed to terminate")


# -- checkpoint IO -------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: NeuralTppModel, path) -> None:
    """Write a versioned JSON checkpoint.

    Fields: format_version; config {class_count, encoder{...}, decoder{...},
    static_dim, conditioner_hidden, seed}; params {name: {shape, data}} with
    row-major float lists. JSON float repr round-trips exactly, so
    load_checkpoint(save_checkpoint(m)) is value-identical.
    """
    cfg = model.config
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": {
            "class_count": cfg.class_count,
            "encoder": asdict(cfg.encoder),
            "decoder": asdict(cfg.decoder),
            "static_dim": cfg.static_dim,
            "conditioner_hidden": list(cfg.conditioner_hidden) if cfg.conditioner_hidden is not None else None,
            "seed": cfg.seed,
        },
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
            for name, t in sorted(model.params.items())
        },
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_checkpoint(path) -> NeuralTppModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('format_version')}")
    c = payload["config"]
    cfg = ModelConfig(
        class_count=c["class_count"],
        encoder=EncoderConfig(**c["encoder"]),
        decoder=DecoderConfig(**c["decoder"]),
        static_dim=c["static_dim"],
        conditioner_hidden=tuple(c["conditioner_hidden"]) if c["conditioner_hidden"] is not None else None,
        seed=c["seed"],
    )
    params = {
        name: ad.tensor(np.array(spec["data"]).reshape(spec["shape"]), requires_grad=True)
        for name, spec in payload["params"].items()
    }
    return NeuralTppModel(cfg, params)
