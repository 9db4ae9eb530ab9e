"""Feature-conditioned autoregressive softmax policy over the response vocabulary.

Each position sees the embeddings of the two previous tokens, a learned
position vector and a linear projection of the (base or feedback) feature
vector; two tanh layers of width 128 produce logits over all 365 tokens.
Gradients are hand-derived and checked against finite differences in the
tests.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import response
from .features import FULL_DIM, SCALES, pad_base

EMBED = 32
HIDDEN = 128
CONTEXT_TOKENS = 2
MAX_LEN = response.MAX_LEN
VOCAB = response.VOCAB_SIZE
CHECKPOINT_VERSION = "drivefb-policy/1"

PARAM_SHAPES = {
    "E": (VOCAB, EMBED),
    "We": (EMBED * CONTEXT_TOKENS, HIDDEN),
    "Wc1": (FULL_DIM, HIDDEN),
    "P": (MAX_LEN, HIDDEN),
    "b1": (HIDDEN,),
    "W2": (HIDDEN, HIDDEN),
    "Wc2": (FULL_DIM, HIDDEN),
    "b2": (HIDDEN,),
    "Wo": (HIDDEN, VOCAB),
    "bo": (VOCAB,),
}
PARAM_NAMES = tuple(PARAM_SHAPES)


class NumericalFailure(FloatingPointError):
    pass


@dataclass
class PolicyParams:
    weights: dict[str, np.ndarray]
    reference: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            {k: v.copy() for k, v in self.weights.items()},
            self.reference,  # frozen: shared, never written
            dict(self.meta),
        )

    def freeze_reference(self) -> None:
        ref = {k: v.copy() for k, v in self.weights.items()}
        for v in ref.values():
            v.setflags(write=False)
        self.reference = ref

    def reference_params(self) -> "PolicyParams":
        if self.reference is None:
            raise ValueError("no reference snapshot; call freeze_reference() after SFT")
        return PolicyParams(self.reference)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.weights.values())


def init_params(seed: int = 0, scale: float = 1.0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    w = {}
    for name, shape in PARAM_SHAPES.items():
        if name.startswith("b"):
            w[name] = np.zeros(shape)
        elif name == "E":
            w[name] = rng.normal(0.0, 0.5 * scale, shape)
        elif name == "P":
            w[name] = rng.normal(0.0, 0.5 * scale, shape)
        else:
            w[name] = rng.normal(0.0, scale / np.sqrt(shape[0]), shape)
    return PolicyParams(w)


def zeros_like(params: PolicyParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.weights.items()}


# --- batched teacher-forced forward / backward -----------------------------


@dataclass
class Batch:
    """Padded token batch. ``mask[b, t]`` marks real tokens."""

    tokens: np.ndarray  # (B, L) int
    mask: np.ndarray  # (B, L) bool
    feats: np.ndarray  # (B, FULL_DIM)

    @classmethod
    def build(cls, feats, token_lists) -> "Batch":
        B = len(token_lists)
        L = max(1, max((len(t) for t in token_lists), default=1))
        if L > MAX_LEN:
            raise ValueError(f"token sequence longer than {MAX_LEN}")
        tokens = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L), dtype=bool)
        for b, t in enumerate(token_lists):
            tokens[b, : len(t)] = t
            mask[b, : len(t)] = True
        F = np.atleast_2d(np.asarray(feats, dtype=float))
        if F.shape[0] == 1 and B > 1:
            F = np.repeat(F, B, axis=0)
        return cls(tokens, mask, pad_base(F))


def _context_inputs(W, tokens: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Concatenated embeddings of the previous CONTEXT_TOKENS tokens, (B, L, 64)."""
    B, L = tokens.shape
    parts, used = [], []
    for lag in range(1, CONTEXT_TOKENS + 1):
        prev = np.zeros((B, L), dtype=np.int64)
        has = np.zeros((B, L), dtype=bool)
        if L > lag:
            prev[:, lag:] = tokens[:, :-lag]
            has[:, lag:] = mask[:, :-lag]
        parts.append(W["E"][prev] * has[..., None])
        used.append((prev, has))
    return np.concatenate(parts, axis=-1), used


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def forward(params: PolicyParams, batch: Batch, weights: dict | None = None):
    W = weights if weights is not None else params.weights
    B, L = batch.tokens.shape
    emb, used = _context_inputs(W, batch.tokens, batch.mask)
    c1 = batch.feats @ W["Wc1"]
    c2 = batch.feats @ W["Wc2"]
    h1 = np.tanh(emb @ W["We"] + c1[:, None, :] + W["P"][:L][None] + W["b1"])
    h2 = np.tanh(h1 @ W["W2"] + c2[:, None, :] + W["b2"])
    logp_all = log_softmax(h2 @ W["Wo"] + W["bo"])
    lp = np.take_along_axis(logp_all, batch.tokens[..., None], axis=-1)[..., 0]
    lp = np.where(batch.mask, lp, 0.0)
    cache = (emb, used, h1, h2, logp_all)
    return lp, cache


def backward(params: PolicyParams, batch: Batch, cache, g: np.ndarray, weights: dict | None = None) -> dict[str, np.ndarray]:
    """Gradient of sum(g * logprob) w.r.t. every parameter."""
    W = weights if weights is not None else params.weights
    emb, used, h1, h2, logp_all = cache
    B, L = batch.tokens.shape
    g = np.where(batch.mask, g, 0.0)
    dlogits = -np.exp(logp_all) * g[..., None]
    np.add.at(dlogits, (np.arange(B)[:, None], np.arange(L)[None, :], batch.tokens), g)

    grads = {}
    H2 = h2.reshape(-1, HIDDEN)
    DL = dlogits.reshape(-1, VOCAB)
    grads["Wo"] = H2.T @ DL
    grads["bo"] = DL.sum(0)
    da2 = (dlogits @ W["Wo"].T) * (1.0 - h2 * h2)
    DA2 = da2.reshape(-1, HIDDEN)
    grads["W2"] = h1.reshape(-1, HIDDEN).T @ DA2
    grads["b2"] = DA2.sum(0)
    grads["Wc2"] = batch.feats.T @ da2.sum(1)
    da1 = (da2 @ W["W2"].T) * (1.0 - h1 * h1)
    DA1 = da1.reshape(-1, HIDDEN)
    grads["We"] = emb.reshape(-1, EMBED * CONTEXT_TOKENS).T @ DA1
    grads["b1"] = DA1.sum(0)
    grads["Wc1"] = batch.feats.T @ da1.sum(1)
    dP = np.zeros_like(W["P"])
    dP[:L] = da1.sum(0)
    grads["P"] = dP
    demb = da1 @ W["We"].T
    dE = np.zeros_like(W["E"])
    for lag, (prev, has) in enumerate(used):
        part = demb[..., lag * EMBED : (lag + 1) * EMBED] * has[..., None]
        np.add.at(dE, prev.ravel(), part.reshape(-1, EMBED))
    grads["E"] = dE
    return grads


# --- public operations -----------------------------------------------------


@dataclass
class SampleOutput:
    tokens: list[int]
    per_token_logprob: np.ndarray
    conditioning: str = "base"

    @property
    def total_logprob(self) -> float:
        return float(np.sum(self.per_token_logprob))


def _step_logits(W, ctx1, ctx2, prev1, has1, prev2, has2, t):
    emb = np.concatenate([W["E"][prev1] * has1[:, None], W["E"][prev2] * has2[:, None]], axis=-1)
    h1 = np.tanh(emb @ W["We"] + ctx1 + W["P"][t] + W["b1"])
    h2 = np.tanh(h1 @ W["W2"] + ctx2 + W["b2"])
    return h2 @ W["Wo"] + W["bo"]


def generate(params: PolicyParams, feats, temperature: float, rngs, greedy: bool = False, conditioning: str = "base"):
    """Sample one sequence per row of ``feats`` using the matching generator in ``rngs``.

    Log-probabilities are recorded at temperature 1 regardless of the sampling
    temperature.
    """
    if not greedy and not temperature > 0:
        raise ValueError("temperature must be positive")
    W = params.weights
    F = pad_base(np.atleast_2d(np.asarray(feats, dtype=float)))
    B = F.shape[0]
    ctx1 = F @ W["Wc1"]
    ctx2 = F @ W["Wc2"]
    toks = np.zeros((B, MAX_LEN), dtype=np.int64)
    lps = np.zeros((B, MAX_LEN))
    alive = np.ones(B, dtype=bool)
    length = np.zeros(B, dtype=np.int64)
    zeros = np.zeros(B, dtype=np.int64)
    for t in range(MAX_LEN):
        prev1 = toks[:, t - 1] if t >= 1 else zeros
        prev2 = toks[:, t - 2] if t >= 2 else zeros
        has1 = np.full(B, t >= 1)
        has2 = np.full(B, t >= 2)
        logits = _step_logits(W, ctx1, ctx2, prev1, has1, prev2, has2, t)
        logp = log_softmax(logits)
        if greedy:
            choice = np.argmax(logits, axis=-1)
        else:
            probs = np.exp(log_softmax(logits / temperature))
            cdf = np.cumsum(probs, axis=-1)
            u = np.array([rng.random() for rng in rngs]) * cdf[:, -1]
            choice = np.minimum((cdf < u[:, None]).sum(-1), VOCAB - 1)
        choice = np.where(alive, choice, 0)
        toks[:, t] = choice
        lps[:, t] = np.where(alive, logp[np.arange(B), choice], 0.0)
        length += alive
        alive &= choice != response.END
        if not alive.any():
            break
    return [SampleOutput(toks[b, : length[b]].tolist(), lps[b, : length[b]].copy(), conditioning) for b in range(B)]


def sample(params: PolicyParams, feat, temperature: float, rng, conditioning: str = "base") -> SampleOutput:
    return generate(params, np.atleast_2d(feat), temperature, [rng], conditioning=conditioning)[0]


def greedy(params: PolicyParams, feats) -> list[SampleOutput]:
    F = np.atleast_2d(feats)
    return generate(params, F, 1.0, [None] * F.shape[0], greedy=True)


def logprob_batch(params: PolicyParams, feats, token_lists, weights: dict | None = None) -> list[np.ndarray]:
    batch = Batch.build(feats, token_lists)
    lp, _ = forward(params, batch, weights)
    return [lp[b, : len(t)] for b, t in enumerate(token_lists)]


def logprob(params: PolicyParams, feat, tokens) -> np.ndarray:
    return logprob_batch(params, np.atleast_2d(feat), [list(tokens)])[0]


def grad_logprob(params: PolicyParams, feat, tokens) -> dict[str, np.ndarray]:
    tokens = list(tokens)
    if not tokens:
        return zeros_like(params)
    batch = Batch.build(np.atleast_2d(feat), [tokens])
    _, cache = forward(params, batch)
    return backward(params, batch, cache, np.ones_like(batch.tokens, dtype=float))


def k3(lp: np.ndarray, lp_ref: np.ndarray) -> np.ndarray:
    """Per-token k3 estimator rho - log rho - 1 with rho = pi_ref / pi."""
    d = lp_ref - lp
    return np.exp(d) - d - 1.0


def kl_to_reference(params: PolicyParams, feat, tokens) -> float:
    tokens = list(tokens)
    if not tokens:
        return 0.0
    lp = logprob(params, feat, tokens)
    lp_ref = logprob(params.reference_params(), feat, tokens)
    return float(np.mean(k3(lp, lp_ref)))


# --- optimisation ----------------------------------------------------------


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def sgd_update(params: PolicyParams, grads: dict[str, np.ndarray], lr: float, clip: float = 1.0, ascend: bool = False) -> float:
    """In-place SGD step with global-norm clipping. Returns the pre-clip norm."""
    norm = grad_norm(grads)
    if not np.isfinite(norm):
        raise NumericalFailure("non-finite gradient norm")
    scale = lr * (min(1.0, clip / norm) if norm > 0 else 1.0)
    sign = 1.0 if ascend else -1.0
    for k, g in grads.items():
        params.weights[k] += sign * scale * g
    return norm


def nll_and_grad(params: PolicyParams, feats, token_lists) -> tuple[float, dict[str, np.ndarray]]:
    """Mean sequence negative log-likelihood over the batch and its gradient."""
    batch = Batch.build(feats, token_lists)
    lp, cache = forward(params, batch)
    B = len(token_lists)
    loss = -float(lp.sum()) / B
    grads = backward(params, batch, cache, np.full(lp.shape, -1.0 / B))
    return loss, grads


def sft_step(params: PolicyParams, batch: list[tuple[np.ndarray, list[int]]], learning_rate: float, clip: float = 1.0):
    """One SGD step on the mean NLL of (features, target tokens) pairs.

    Returns the updated params (a copy) and the pre-step loss.
    """
    if not batch:
        raise ValueError("empty SFT batch")
    feats = np.stack([pad_base(np.asarray(f, dtype=float)) for f, _ in batch])
    loss, grads = nll_and_grad(params, feats, [list(t) for _, t in batch])
    new = params.copy()
    if learning_rate > 0:
        sgd_update(new, grads, learning_rate, clip)
    return new, loss


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(params: PolicyParams, path: str | Path, rng_state: dict | None = None, extra: dict | None = None) -> None:
    arrays = {f"w/{k}": v for k, v in params.weights.items()}
    if params.reference is not None:
        arrays.update({f"ref/{k}": v for k, v in params.reference.items()})
    header = {
        "version": CHECKPOINT_VERSION,
        "vocabulary": response.vocabulary_table(),
        "feature_scales": {k: float(v) for k, v in SCALES.items()},
        "rng_state": rng_state,
        "meta": params.meta,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    with np.load(Path(path)) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {header.get('version')!r} != {CHECKPOINT_VERSION!r}")
        if len(header["vocabulary"]) != VOCAB:
            raise ValueError("checkpoint vocabulary does not match this build")
        weights = {k: np.array(z[f"w/{k}"]) for k in PARAM_NAMES}
        ref = None
        if f"ref/{PARAM_NAMES[0]}" in z.files:
            ref = {k: np.array(z[f"ref/{k}"]) for k in PARAM_NAMES}
            for v in ref.values():
                v.setflags(write=False)
    return PolicyParams(weights, ref, header.get("meta", {})), header
