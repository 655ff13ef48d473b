"""Tiny decoder-only transformer policy, decoding, and checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tasks import STOP, VOCAB_SIZE

CHECKPOINT_FORMAT = "spinelab-checkpoint"
CHECKPOINT_VERSION = 1
_MASKED = -1e9


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int = VOCAB_SIZE
    context_len: int = 128
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if min(self.vocab_size, self.context_len, self.embed_dim, self.n_layers,
               self.n_heads, self.mlp_ratio) < 1:
            raise ValueError("policy dimensions must be positive")


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 0.7
    top_p: float = 0.95
    max_new_tokens: int = 64
    stop_token: int = STOP
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class Rollout:
    """One response plus behaviour-policy statistics for each emitted token.

    ``logprobs_old`` and ``entropies`` are measured on the raw policy
    distribution (temperature 1, no nucleus truncation).
    """
    prompt_tokens: tuple
    response_tokens: tuple
    logprobs_old: np.ndarray
    entropies: np.ndarray
    terminated: bool
    answer: object = None
    fork_mask: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.response_tokens)


def _param_shapes(cfg):
    d, v, hidden = cfg.embed_dim, cfg.vocab_size, cfg.embed_dim * cfg.mlp_ratio
    shapes = {"tok_emb": (v, d), "pos_emb": (cfg.context_len, d)}
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w1": (d, hidden), p + "b1": (hidden,),
            p + "w2": (hidden, d), p + "b2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "w_out": (d, v), "b_out": (v,)})
    return shapes


class TransformerPolicy:
    """Pre-norm causal transformer with learned positional embeddings."""

    def __init__(self, config=None, seed=0, params=None):
        self.config = config or PolicyConfig()
        shapes = _param_shapes(self.config)
        if params is None:
            params = self._init_params(shapes, seed)
        else:
            for name, shape in shapes.items():
                if name not in params:
                    raise ValueError(f"missing parameter {name!r}")
                if tuple(np.shape(params[name])) != shape:
                    raise ValueError(f"parameter {name!r} has shape {np.shape(params[name])}, "
                                     f"expected {shape}")
        self.params = {k: T.Tensor(np.asarray(params[k], dtype=np.float64), requires_grad=True)
                       for k in shapes}

    def _init_params(self, shapes, seed):
        rng = np.random.default_rng(seed)
        resid_scale = 1.0 / math.sqrt(2 * self.config.n_layers)
        out = {}
        for name, shape in shapes.items():
            leaf = name.split(".")[-1]
            if leaf.endswith("_g"):
                out[name] = np.ones(shape)
            elif len(shape) == 1:
                out[name] = np.zeros(shape)
            elif name in ("tok_emb", "pos_emb"):
                out[name] = rng.normal(0.0, 0.1, shape)
            else:
                std = 1.0 / math.sqrt(shape[0])
                if leaf in ("wo", "w2"):
                    std *= resid_scale
                out[name] = rng.normal(0.0, std, shape)
        return out

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        for k, p in self.params.items():
            if k not in state or np.shape(state[k]) != p.shape:
                raise ValueError(f"state mismatch for parameter {k!r}")
            p.data = np.array(state[k], dtype=np.float64)

    def copy(self):
        return TransformerPolicy(self.config, params=self.state_dict())

    def digest(self):
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def n_params(self):
        return int(np.sum([p.size for p in self.params.values()]))

    # -- forward ------------------------------------------------------------
    def forward_logits(self, tokens, pad_mask=None, pos_offset=None):
        """Logits for every position of a (B, L) batch (or a single sequence).

        ``pad_mask`` marks real tokens; padding must sit on the left. Position
        ids count real tokens only, so a left-padded row sees the same
        positions it would unpadded. ``pos_offset`` (B,) shifts every position
        id of a row; it is only used to randomise positions in pretraining.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        if pad_mask is None:
            pad_mask = np.ones(tokens.shape, dtype=bool)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if pad_mask.shape != tokens.shape:
            raise T.ShapeError("forward_logits", tokens.shape, pad_mask.shape)
        cfg = self.config
        b, n = tokens.shape
        pos = np.clip(np.cumsum(pad_mask, axis=1) - 1, 0, None)
        if pos_offset is not None:
            pos = pos + np.asarray(pos_offset, dtype=np.int64).reshape(-1, 1)
        if n and pos.max() >= cfg.context_len:
            raise ValueError(f"sequence of length {pos.max() + 1} exceeds context_len "
                             f"{cfg.context_len}")
        if n and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError("token id out of vocabulary range")
        causal = np.tril(np.ones((n, n), dtype=bool))
        allowed = causal[None, :, :] & pad_mask[:, None, :]
        allowed |= np.eye(n, dtype=bool)[None]
        bias = np.where(allowed, 0.0, _MASKED)[:, None, :, :]

        p = self.params
        x = T.embedding(p["tok_emb"], tokens) + T.embedding(p["pos_emb"], pos)
        h_, hd = cfg.n_heads, cfg.embed_dim // cfg.n_heads
        scale = 1.0 / math.sqrt(hd)
        for i in range(cfg.n_layers):
            q_ = f"h{i}."
            h = T.layer_norm(x, p[q_ + "ln1_g"], p[q_ + "ln1_b"])
            q = (h @ p[q_ + "wq"]).reshape(b, n, h_, hd).transpose(0, 2, 1, 3)
            k = (h @ p[q_ + "wk"]).reshape(b, n, h_, hd).transpose(0, 2, 3, 1)
            v = (h @ p[q_ + "wv"]).reshape(b, n, h_, hd).transpose(0, 2, 1, 3)
            att = T.softmax((q @ k) * scale + bias, axis=-1)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, cfg.embed_dim)
            x = x + (y @ p[q_ + "wo"] + p[q_ + "bo"])
            h = T.layer_norm(x, p[q_ + "ln2_g"], p[q_ + "ln2_b"])
            h = T.relu(h @ p[q_ + "w1"] + p[q_ + "b1"])
            x = x + (h @ p[q_ + "w2"] + p[q_ + "b2"])
        x = T.layer_norm(x, p["lnf_g"], p["lnf_b"])
        logits = x @ p["w_out"] + p["b_out"]
        return logits.reshape(n, cfg.vocab_size) if single else logits

    # -- persistence --------------------------------------------------------
    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


def save_checkpoint(policy, path, extra=None):
    """Write an ``.npz`` holding every parameter plus a JSON ``__meta__`` entry."""
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "config": asdict(policy.config), "params": sorted(policy.params),
            "extra": extra or {}}
    arrays = {k: v.data for k, v in policy.params.items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expect_config=None):
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint {meta.get('format')} "
                             f"v{meta.get('version')}")
        cfg = PolicyConfig(**meta["config"])
        if expect_config is not None and cfg != expect_config:
            raise ValueError(f"{path}: checkpoint config {cfg} does not match {expect_config}")
        params = {k: z[k] for k in meta["params"]}
    return TransformerPolicy(cfg, params=params)


# -- distributions -----------------------------------------------------------
def _log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_entropy(logits):
    """Entropy in nats of softmax(logits); works on the last axis."""
    logp = _log_softmax_np(np.asarray(logits, dtype=np.float64))
    p = np.exp(logp)
    return -(p * logp).sum(axis=-1)


def nucleus_probs(logits, temperature, top_p):
    """Temperature-scaled, top-p truncated, renormalised sampling probabilities."""
    logits = np.asarray(logits, dtype=np.float64)
    p = np.exp(_log_softmax_np(logits / temperature))
    order = np.argsort(-p, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=-1)
    cum = np.cumsum(sorted_p, axis=-1)
    keep_n = np.minimum((cum < top_p).sum(axis=-1) + 1, p.shape[-1])
    ranks = np.arange(p.shape[-1])
    keep_sorted = ranks[None, :] < keep_n[..., None] if p.ndim == 2 else ranks < keep_n
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    q = np.where(keep, p, 0.0)
    total = q.sum(axis=-1, keepdims=True)
    assert np.all(total > 0), "empty nucleus"
    return q / total


def _left_pad(seqs, fill=0):
    n = max(len(s) for s in seqs)
    toks = np.full((len(seqs), n), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        if len(s):
            toks[i, n - len(s):] = s
            mask[i, n - len(s):] = True
    return toks, mask


def _ln_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * g + b


class _KVDecoder:
    """Inference-only forward with a key/value cache (plain numpy, no tape).

    Mirrors :meth:`TransformerPolicy.forward_logits` exactly, one chunk of new
    positions at a time.
    """

    def __init__(self, policy, batch):
        self.cfg = policy.config
        self.p = {k: v.data for k, v in policy.params.items()}
        self.b = batch
        hd = self.cfg.embed_dim // self.cfg.n_heads
        self.keys = [np.zeros((batch, self.cfg.n_heads, 0, hd)) for _ in range(self.cfg.n_layers)]
        self.vals = [np.zeros((batch, self.cfg.n_heads, 0, hd)) for _ in range(self.cfg.n_layers)]
        self.key_mask = np.zeros((batch, 0), dtype=bool)
        self.count = np.zeros(batch, dtype=np.int64)

    def feed(self, tokens, mask):
        """Append (B, n) tokens; return logits (B, V) at the last new position."""
        cfg, p = self.cfg, self.p
        b, n = tokens.shape
        pos = np.clip(self.count[:, None] + np.cumsum(mask, axis=1) - 1, 0, None)
        if pos.max() >= cfg.context_len:
            raise ValueError("sequence exceeds context_len")
        self.count = self.count + mask.sum(axis=1)
        prev = self.key_mask.shape[1]
        self.key_mask = np.concatenate([self.key_mask, mask], axis=1)
        total = prev + n
        qi = prev + np.arange(n)
        causal = np.arange(total)[None, :] <= qi[:, None]
        allowed = causal[None] & self.key_mask[:, None, :]
        allowed |= (np.arange(total)[None, :] == qi[:, None])[None]
        bias = np.where(allowed, 0.0, _MASKED)[:, None, :, :]
        x = p["tok_emb"][tokens] + p["pos_emb"][pos]
        h_, hd = cfg.n_heads, cfg.embed_dim // cfg.n_heads
        scale = 1.0 / math.sqrt(hd)
        for i in range(cfg.n_layers):
            q_ = f"h{i}."
            h = _ln_np(x, p[q_ + "ln1_g"], p[q_ + "ln1_b"])
            q = (h @ p[q_ + "wq"]).reshape(b, n, h_, hd).transpose(0, 2, 1, 3)
            k = (h @ p[q_ + "wk"]).reshape(b, n, h_, hd).transpose(0, 2, 1, 3)
            v = (h @ p[q_ + "wv"]).reshape(b, n, h_, hd).transpose(0, 2, 1, 3)
            self.keys[i] = np.concatenate([self.keys[i], k], axis=2)
            self.vals[i] = np.concatenate([self.vals[i], v], axis=2)
            s = (q @ self.keys[i].transpose(0, 1, 3, 2)) * scale + bias
            s = np.exp(s - s.max(axis=-1, keepdims=True))
            att = s / s.sum(axis=-1, keepdims=True)
            y = (att @ self.vals[i]).transpose(0, 2, 1, 3).reshape(b, n, cfg.embed_dim)
            x = x + (y @ p[q_ + "wo"] + p[q_ + "bo"])
            h = _ln_np(x, p[q_ + "ln2_g"], p[q_ + "ln2_b"])
            x = x + (np.maximum(h @ p[q_ + "w1"] + p[q_ + "b1"], 0.0) @ p[q_ + "w2"] + p[q_ + "b2"])
        x = _ln_np(x[:, -1], p["lnf_g"], p["lnf_b"])
        logits = x @ p["w_out"] + p["b_out"]
        if not np.all(np.isfinite(logits)):
            raise T.NumericError("decode", "non-finite logits")
        return logits


def generate(policy, prompts, cfg, rng=None):
    """Decode one response per prompt in a single left-padded batch.

    ``cfg.temperature == 0`` selects greedy decoding (argmax, lowest id on
    ties); otherwise tokens come from the nucleus distribution drawn with
    ``rng`` (a ``numpy.random.Generator``).
    """
    prompts = [tuple(int(t) for t in p) for p in prompts]
    if not prompts:
        return []
    greedy = cfg.temperature == 0
    if not greedy and rng is None:
        rng = np.random.default_rng(cfg.seed)
    toks, mask = _left_pad(prompts)
    b = len(prompts)
    room = policy.config.context_len - max(len(p) for p in prompts)
    steps = min(cfg.max_new_tokens, room)
    if steps < 1:
        raise ValueError("prompt leaves no room for a response within context_len")
    alive = np.ones(b, dtype=bool)
    resp = [[] for _ in range(b)]
    lps = [[] for _ in range(b)]
    ents = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    dec = _KVDecoder(policy, b)
    logits = dec.feed(toks, mask)
    for step in range(steps):
        logp = _log_softmax_np(logits)
        ent = -(np.exp(logp) * logp).sum(axis=-1)
        if greedy:
            nxt = np.argmax(logits, axis=-1)
        else:
            probs = nucleus_probs(logits, cfg.temperature, cfg.top_p)
            u = rng.random(b)
            cdf = np.cumsum(probs, axis=-1)
            nxt = np.minimum((cdf < u[:, None]).sum(axis=-1), probs.shape[-1] - 1)
            # guard against cdf rounding landing on a zero-probability id
            bad = probs[np.arange(b), nxt] == 0
            if bad.any():
                nxt[bad] = np.argmax(probs[bad], axis=-1)
        was_alive = alive.copy()
        for i in np.flatnonzero(was_alive):
            t = int(nxt[i])
            resp[i].append(t)
            lps[i].append(float(logp[i, t]))
            ents[i].append(float(ent[i]))
            if t == cfg.stop_token:
                alive[i] = False
                done[i] = True
        if not alive.any():
            break
        logits = dec.feed(np.where(was_alive, nxt, 0)[:, None], was_alive[:, None])
    return [Rollout(prompts[i], tuple(resp[i]), np.array(lps[i]), np.array(ents[i]),
                    bool(done[i])) for i in range(b)]


def sample_response(policy, prompt, cfg, rng=None):
    """Sample one response; see :func:`generate`."""
    return generate(policy, [prompt], cfg, rng)[0]


def greedy_decode(policy, prompt, cfg=None):
    cfg = cfg or DecodeConfig()
    cfg = DecodeConfig(0.0, 1.0, cfg.max_new_tokens, cfg.stop_token, cfg.seed)
    return generate(policy, [prompt], cfg)[0]


def score_responses(policy, prompts, responses, pos_offset=None):
    """Differentiable per-token statistics of given responses under ``policy``.

    Returns a dict with ``logp_all`` (B, Tmax, V) log-softmax tensor, ``logp``
    (B, Tmax) chosen-token log-probs, ``entropy`` (B, Tmax) and the boolean
    ``valid`` (B, Tmax) marking real response positions.
    """
    seqs = [tuple(p) + tuple(r) for p, r in zip(prompts, responses)]
    toks, mask = _left_pad(seqs)
    b, n = toks.shape
    t_max = max(len(r) for r in responses)
    idx = np.zeros((b, t_max), dtype=np.int64)
    valid = np.zeros((b, t_max), dtype=bool)
    resp_tok = np.zeros((b, t_max), dtype=np.int64)
    for i, (p, r) in enumerate(zip(prompts, responses)):
        start = n - len(seqs[i]) + len(p)
        tr = len(r)
        idx[i, :tr] = i * n + start + np.arange(tr) - 1
        valid[i, :tr] = True
        resp_tok[i, :tr] = r
    logits = policy.forward_logits(toks, mask, pos_offset)
    flat = logits.reshape(b * n, policy.config.vocab_size)
    picked = T.embedding(flat, idx)
    logp_all = T.log_softmax(picked, axis=-1)
    logp = T.take_last(logp_all, resp_tok)
    ent = T.neg(T.sum(T.exp(logp_all) * logp_all, axis=-1))
    return {"logp_all": logp_all, "logp": logp, "entropy": ent, "valid": valid,
            "tokens": resp_tok}
