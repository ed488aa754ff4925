"""Desk-scale byte-level language model harness.

A pre-normalization transformer with learned positional embeddings and a
pluggable attention variant (exact dense, hierarchical, hierarchical with
downsampled queries). Every forward and backward pass is hand-written on
the numpy substrate, so training exercises the same verified primitives
as the test suites. Supports next-byte autoregressive training and
masked-token training (15% of positions replaced by a mask token, loss on
masked positions only), greedy deterministic batching, raw-float32
checkpoints with a name/shape/offset manifest, and bits-per-character or
perplexity evaluation over non-overlapping windows.

CLI (installed as ``lm``)::

    lm train --config cfg.txt --data corpus.txt --steps 500 --seed 0 --out model.ckpt
    lm eval  --ckpt model.ckpt --data corpus.txt --split test
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import attention
from .downsampler import DownsampleWeights, init_weights
from .hierarchy import build
from .tensor_core import NonFiniteError, Parameter, matmul, matmul_backward

__all__ = [
    "MASK_TOKEN",
    "VARIANTS",
    "ModelConfig",
    "TransformerLM",
    "Adam",
    "EvalResult",
    "AuditResult",
    "ingest",
    "train",
    "training_step",
    "evaluate",
    "causality_audit",
    "save_checkpoint",
    "load_checkpoint",
    "main",
]

MASK_TOKEN = 256
VARIANTS = ("dense", "fma", "fma-linear")
OBJECTIVES = ("autoregressive", "masked")

_CKPT_MAGIC = b"fma-lm-checkpoint-v1\n"
_LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    """Model, hierarchy, objective and optimizer settings in one text-serializable block."""

    layers: int = 2
    width: int = 128
    heads: int = 4
    vocab: int = 256
    context: int = 256
    variant: str = "fma"
    m: int = 32
    p: int = 4
    mode: str = "causal"
    partition_rule: str = "fmm_parity"
    objective: str = "autoregressive"
    batch_size: int = 12
    ffn_mult: int = 4
    lr: float = 3e-3
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    mask_rate: float = 0.15
    init_std: float = 0.02
    downsample_init: str = "average_plus_noise"

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def embed_rows(self) -> int:
        # The mask sentinel needs an embedding row; it is never predicted.
        return self.vocab + (1 if self.objective == "masked" else 0)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.width % self.heads != 0:
            raise ValueError(f"heads={self.heads} must divide width={self.width}")
        if self.vocab != 256:
            raise ValueError("byte-level harness requires vocab=256")
        expected_mode = "causal" if self.objective == "autoregressive" else "bidirectional"
        if self.mode != expected_mode:
            raise ValueError(
                f"objective {self.objective!r} requires mode {expected_mode!r}, got {self.mode!r}"
            )
        if self.variant != "dense":
            build(self.context, self.m, self.p, self.mode, self.partition_rule)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs: dict = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = types[key]
            if kind == "int":
                kwargs[key] = int(value)
            elif kind == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        config = cls(**kwargs)
        config.validate()
        return config


def ingest(path: str | Path, ratios: tuple[float, float, float] = (0.9, 0.05, 0.05)):
    """Read a file as bytes (token ids 0..255) and split it contiguously."""
    data = Path(path).read_bytes()
    if len(data) == 0:
        raise ValueError(f"corpus file {path} is empty")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three values summing to 1, got {ratios}")
    stream = np.frombuffer(data, dtype=np.uint8)
    n_train = int(len(stream) * ratios[0])
    n_valid = int(len(stream) * ratios[1])
    return (
        stream[:n_train],
        stream[n_train : n_train + n_valid],
        stream[n_train + n_valid :],
    )


# ---------------------------------------------------------------------------
# layers


def _layer_norm(x: np.ndarray, gamma: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(_LN_EPS))
    xhat = xc * inv
    return xhat * gamma, (xhat, inv)


def _layer_norm_backward(dout: np.ndarray, cache, gamma: np.ndarray):
    xhat, inv = cache
    dgamma = (dout * xhat).sum(axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * gamma
    w = xhat.shape[-1]
    mean_d = dxhat.mean(axis=-1, keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_d - xhat * mean_dx)
    del w
    return dx, dgamma


def _gelu(x: np.ndarray):
    u = x.dtype.type(_GELU_C) * (x + x.dtype.type(_GELU_A) * x * x * x)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_backward(dout: np.ndarray, cache):
    x, t = cache
    du = x.dtype.type(_GELU_C) * (1.0 + 3.0 * x.dtype.type(_GELU_A) * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


@dataclass
class _LayerRefs:
    ln1: Parameter
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    ln2: Parameter
    w1: Parameter
    w2: Parameter
    head_weights: list[DownsampleWeights] = field(default_factory=list)
    head_params: list[dict[tuple[str, int], Parameter]] = field(default_factory=list)


class TransformerLM:
    """Pre-norm transformer over byte tokens with pluggable attention."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.dtype = np.float32
        self.params: dict[str, Parameter] = {}
        self.layers: list[_LayerRefs] = []

        if config.variant != "dense":
            self.hierarchy, self.ilist = build(
                config.context, config.m, config.p, config.mode, config.partition_rule
            )
        else:
            self.hierarchy, self.ilist = None, None

        w, std = config.width, config.init_std

        def param(name: str, value: np.ndarray) -> Parameter:
            par = Parameter(name, value.astype(self.dtype))
            self.params[name] = par
            return par

        param("tok_embed", rng.normal(0.0, std, (config.embed_rows, w)))
        param("pos_embed", rng.normal(0.0, std, (config.context, w)))
        streams = {"dense": (), "fma": ("k", "v"), "fma-linear": ("k", "v", "q")}[config.variant]
        for i in range(config.layers):
            refs = _LayerRefs(
                ln1=param(f"L{i}.ln1.g", np.ones(w)),
                wq=param(f"L{i}.attn.wq", rng.normal(0.0, std, (w, w))),
                wk=param(f"L{i}.attn.wk", rng.normal(0.0, std, (w, w))),
                wv=param(f"L{i}.attn.wv", rng.normal(0.0, std, (w, w))),
                wo=param(f"L{i}.attn.wo", rng.normal(0.0, std, (w, w))),
                ln2=param(f"L{i}.ln2.g", np.ones(w)),
                w1=param(f"L{i}.ffn.w1", rng.normal(0.0, std, (w, config.ffn_mult * w))),
                w2=param(f"L{i}.ffn.w2", rng.normal(0.0, std, (config.ffn_mult * w, w))),
            )
            for h in range(config.heads):
                if streams:
                    seed = int(rng.integers(0, 2**31 - 1))
                    dw = init_weights(
                        self.hierarchy,
                        config.head_dim,
                        streams=streams,
                        strategy=config.downsample_init,
                        seed=seed,
                        dtype=self.dtype,
                    )
                    pmap: dict[tuple[str, int], Parameter] = {}
                    for (stream, level), kern in dw.kernels.items():
                        par = param(f"L{i}.attn.h{h}.down.{stream}.lv{level}", kern)
                        dw.kernels[(stream, level)] = par.value  # share storage
                        pmap[(stream, level)] = par
                    refs.head_weights.append(dw)
                    refs.head_params.append(pmap)
            self.layers.append(refs)
        param("final.ln.g", np.ones(w))
        param("head.w", rng.normal(0.0, std, (w, config.vocab)))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def non_attention_parameter_count(self) -> int:
        return sum(p.value.size for name, p in self.params.items() if ".attn." not in name)

    # -- forward / backward ------------------------------------------------

    def _slice_attention(self, refs: _LayerRefs, x_ln: np.ndarray):
        """Per (batch item, head) attention over (n, head_dim) slices."""
        cfg = self.config
        B, n, w = x_ln.shape
        H, dh = cfg.heads, cfg.head_dim
        flat = x_ln.reshape(B * n, w)
        q = matmul(flat, refs.wq.value).reshape(B, n, H, dh)
        k = matmul(flat, refs.wk.value).reshape(B, n, H, dh)
        v = matmul(flat, refs.wv.value).reshape(B, n, H, dh)
        out = np.empty((B, n, H, dh), dtype=x_ln.dtype)
        tapes = []
        for b in range(B):
            for h in range(H):
                qs = np.ascontiguousarray(q[b, :, h, :])
                ks = np.ascontiguousarray(k[b, :, h, :])
                vs = np.ascontiguousarray(v[b, :, h, :])
                if cfg.variant == "dense":
                    o, tape = attention.dense_forward(qs, ks, vs, cfg.mode)
                elif cfg.variant == "fma":
                    o, tape = attention.forward(
                        qs, ks, vs, refs.head_weights[h], self.hierarchy, self.ilist
                    )
                else:
                    o, tape = attention.forward_linear(
                        qs, ks, vs, refs.head_weights[h], self.hierarchy, self.ilist
                    )
                out[b, :, h, :] = o
                tapes.append(tape)
        proj_in = out.reshape(B * n, w)
        y = matmul(proj_in, refs.wo.value).reshape(B, n, w)
        cache = {"x_ln": x_ln, "tapes": tapes, "proj_in": proj_in, "shape": (B, n, H, dh)}
        return y, cache

    def _slice_attention_backward(self, refs: _LayerRefs, dout: np.ndarray, cache):
        cfg = self.config
        B, n, H, dh = cache["shape"]
        w = cfg.width
        dproj_in, dwo = matmul_backward(dout.reshape(B * n, w), cache["proj_in"], refs.wo.value)
        refs.wo.accumulate(dwo)
        dslices = dproj_in.reshape(B, n, H, dh)
        dq = np.empty((B, n, H, dh), dtype=dout.dtype)
        dk = np.empty_like(dq)
        dv = np.empty_like(dq)
        for b in range(B):
            for h in range(H):
                tape = cache["tapes"][b * H + h]
                grads = attention.backward(tape, np.ascontiguousarray(dslices[b, :, h, :]))
                dq[b, :, h, :] = grads.dq
                dk[b, :, h, :] = grads.dk
                dv[b, :, h, :] = grads.dv
                for key, dwk in grads.dweights.items():
                    refs.head_params[h][key].accumulate(dwk)
        flat = cache["x_ln"].reshape(B * n, w)
        dx = np.zeros_like(flat)
        for darr, wpar in ((dq, refs.wq), (dk, refs.wk), (dv, refs.wv)):
            dflat, dw = matmul_backward(darr.reshape(B * n, w), flat, wpar.value)
            wpar.accumulate(dw)
            dx += dflat
        return dx.reshape(B, n, w)

    def forward(self, tokens: np.ndarray):
        """tokens (B, context) int -> logits (B, context, vocab) plus backward cache."""
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != cfg.context:
            raise ValueError(f"tokens must be (B, {cfg.context}), got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= cfg.embed_rows:
            raise ValueError("token id out of range")
        B, n = tokens.shape
        x = self.params["tok_embed"].value[tokens] + self.params["pos_embed"].value[None, :, :]
        caches = []
        for refs in self.layers:
            a, ln1_cache = _layer_norm(x, refs.ln1.value)
            attn_out, attn_cache = self._slice_attention(refs, a)
            x1 = x + attn_out
            f, ln2_cache = _layer_norm(x1, refs.ln2.value)
            h1 = matmul(f.reshape(B * n, -1), refs.w1.value)
            g, gelu_cache = _gelu(h1)
            h2 = matmul(g, refs.w2.value).reshape(B, n, -1)
            x = x1 + h2
            caches.append(
                {"ln1": ln1_cache, "attn": attn_cache, "ln2": ln2_cache, "f": f,
                 "h1_gelu": gelu_cache, "g": g}
            )
        hfin, lnf_cache = _layer_norm(x, self.params["final.ln.g"].value)
        logits = matmul(hfin.reshape(B * n, -1), self.params["head.w"].value)
        cache = {"tokens": tokens, "layers": caches, "lnf": lnf_cache, "hfin": hfin}
        return logits.reshape(B, n, cfg.vocab), cache

    def backward(self, dlogits: np.ndarray, cache) -> None:
        """Accumulate parameter gradients for a forward pass; additive."""
        cfg = self.config
        tokens = cache["tokens"]
        B, n = tokens.shape
        w = cfg.width
        hfin2 = cache["hfin"].reshape(B * n, w)
        dh, dhead = matmul_backward(dlogits.reshape(B * n, cfg.vocab), hfin2, self.params["head.w"].value)
        self.params["head.w"].accumulate(dhead)
        dx, dgf = _layer_norm_backward(dh.reshape(B, n, w), cache["lnf"], self.params["final.ln.g"].value)
        self.params["final.ln.g"].accumulate(dgf)

        for refs, lc in zip(reversed(self.layers), reversed(cache["layers"])):
            dg, dw2 = matmul_backward(dx.reshape(B * n, w), lc["g"], refs.w2.value)
            refs.w2.accumulate(dw2)
            dh1 = _gelu_backward(dg, lc["h1_gelu"])
            df, dw1 = matmul_backward(dh1, lc["f"].reshape(B * n, -1), refs.w1.value)
            refs.w1.accumulate(dw1)
            dx1, dg2 = _layer_norm_backward(df.reshape(B, n, w), lc["ln2"], refs.ln2.value)
            refs.ln2.accumulate(dg2)
            dx1 = dx1 + dx  # residual around the FFN
            da = self._slice_attention_backward(refs, dx1, lc["attn"])
            dxa, dg1 = _layer_norm_backward(da, lc["ln1"], refs.ln1.value)
            refs.ln1.accumulate(dg1)
            dx = dx1 + dxa  # residual around attention

        self.params["pos_embed"].accumulate(dx.sum(axis=0))
        dtok = np.zeros_like(self.params["tok_embed"].value)
        np.add.at(dtok, tokens.reshape(-1), dx.reshape(B * n, w))
        self.params["tok_embed"].accumulate(dtok)


# ---------------------------------------------------------------------------
# loss, optimizer, training


def softmax_xent(logits: np.ndarray, targets: np.ndarray, position_mask: np.ndarray | None = None):
    """Mean cross entropy in nats over (optionally masked) positions, plus dlogits.

    Stable log-sum-exp formulation; accumulations run in float64 so the
    reported loss is reproducible bit for bit across runs.
    """
    B, n, vocab = logits.shape
    flat = logits.reshape(B * n, vocab).astype(np.float64)
    tgt = targets.reshape(B * n)
    zmax = flat.max(axis=1)
    lse = zmax + np.log(np.exp(flat - zmax[:, None]).sum(axis=1))
    nll = lse - flat[np.arange(B * n), tgt]
    if position_mask is None:
        weights = np.ones(B * n)
    else:
        weights = position_mask.reshape(B * n).astype(np.float64)
    total = weights.sum()
    if total == 0:
        raise ValueError("no positions selected for the loss")
    loss = float((nll * weights).sum() / total)
    probs = np.exp(flat - lse[:, None])
    probs[np.arange(B * n), tgt] -= 1.0
    dlogits = (probs * (weights / total)[:, None]).astype(logits.dtype).reshape(B, n, vocab)
    return loss, dlogits


class Adam:
    """Adam with linear warmup and in-place parameter updates."""

    def __init__(self, params: list[Parameter], config: ModelConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        lr = cfg.lr * min(1.0, self.t / max(cfg.warmup, 1))
        if cfg.grad_clip > 0:
            sq = 0.0
            for p in self.params:
                sq += float((p.grad.astype(np.float64) ** 2).sum())
            norm = math.sqrt(sq)
            if norm > cfg.grad_clip:
                scale = np.float32(cfg.grad_clip / norm)
                for p in self.params:
                    p.grad *= scale
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * (p.grad * p.grad)
            update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
            p.value -= np.asarray(lr * update, dtype=p.value.dtype)


def _sample_batch(rng: np.random.Generator, stream: np.ndarray, config: ModelConfig):
    n = config.context
    if config.objective == "autoregressive":
        if len(stream) < n + 1:
            raise ValueError(f"stream length {len(stream)} < context+1 = {n + 1}")
        starts = rng.integers(0, len(stream) - n, size=config.batch_size)
        windows = np.stack([stream[s : s + n + 1] for s in starts]).astype(np.int64)
        return windows[:, :-1], windows[:, 1:], None
    if len(stream) < n:
        raise ValueError(f"stream length {len(stream)} < context = {n}")
    starts = rng.integers(0, len(stream) - n + 1, size=config.batch_size)
    windows = np.stack([stream[s : s + n] for s in starts]).astype(np.int64)
    return _apply_masking(rng, windows, config)


def _apply_masking(rng: np.random.Generator, windows: np.ndarray, config: ModelConfig):
    n = config.context
    k = max(1, round(config.mask_rate * n))
    inputs = windows.copy()
    mask = np.zeros_like(windows, dtype=bool)
    for row in range(windows.shape[0]):
        pos = rng.choice(n, size=k, replace=False)
        mask[row, pos] = True
        inputs[row, pos] = MASK_TOKEN
    return inputs, windows, mask


def training_step(model: TransformerLM, opt: Adam, inputs, targets, position_mask=None) -> float:
    model.zero_grads()
    logits, cache = model.forward(inputs)
    loss, dlogits = softmax_xent(logits, targets, position_mask)
    model.backward(dlogits, cache)
    opt.step()
    return loss


def train(config: ModelConfig, stream: np.ndarray, steps: int, seed: int, log_every: int = 0):
    """Train from scratch; deterministic given (config, stream, steps, seed).

    Returns (model, losses) with losses in nats/token. Aborts with a
    diagnostic if the loss diverges to NaN/Inf.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    model = TransformerLM(config, rng)
    opt = Adam(model.parameters(), config)
    losses = []
    for step in range(1, steps + 1):
        inputs, targets, mask = _sample_batch(rng, stream, config)
        try:
            loss = training_step(model, opt, inputs, targets, mask)
        except NonFiniteError as exc:
            raise RuntimeError(f"training diverged at step {step}: {exc}") from exc
        if not math.isfinite(loss):
            raise RuntimeError(f"training diverged at step {step}: loss={loss}")
        losses.append(loss)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {loss:.4f} nats  ({loss / math.log(2):.4f} bits)")
    return model, np.array(losses)


# ---------------------------------------------------------------------------
# evaluation and audits


@dataclass(frozen=True)
class EvalResult:
    metric: str  # "bpc" or "ppl"
    value: float
    loss_nats: float
    tokens_scored: int


def evaluate(model: TransformerLM, stream: np.ndarray, max_windows: int | None = None) -> EvalResult:
    """bpc (autoregressive) or perplexity (masked) over non-overlapping windows."""
    cfg = model.config
    n = cfg.context
    total_nll = 0.0
    total_tokens = 0
    if cfg.objective == "autoregressive":
        count = (len(stream) - 1) // n
        if max_windows is not None:
            count = min(count, max_windows)
        if count == 0:
            raise ValueError(f"stream too short to evaluate: {len(stream)} tokens, context {n}")
        starts = [k * n for k in range(count)]
    else:
        count = len(stream) // n
        if max_windows is not None:
            count = min(count, max_windows)
        if count == 0:
            raise ValueError(f"stream too short to evaluate: {len(stream)} tokens, context {n}")
        starts = [k * n for k in range(count)]
        mask_rng = np.random.Generator(np.random.PCG64(0x5EED))  # fixed: eval is deterministic

    for batch_start in range(0, count, cfg.batch_size):
        chunk = starts[batch_start : batch_start + cfg.batch_size]
        if cfg.objective == "autoregressive":
            windows = np.stack([stream[s : s + n + 1] for s in chunk]).astype(np.int64)
            inputs, targets, mask = windows[:, :-1], windows[:, 1:], None
        else:
            windows = np.stack([stream[s : s + n] for s in chunk]).astype(np.int64)
            inputs, targets, mask = _apply_masking(mask_rng, windows, model.config)
        logits, _ = model.forward(inputs)
        B = len(chunk)
        flat = logits.reshape(B * n, cfg.vocab).astype(np.float64)
        tgt = targets.reshape(B * n)
        zmax = flat.max(axis=1)
        lse = zmax + np.log(np.exp(flat - zmax[:, None]).sum(axis=1))
        nll = lse - flat[np.arange(B * n), tgt]
        if mask is None:
            total_nll += float(nll.sum())
            total_tokens += B * n
        else:
            sel = mask.reshape(B * n)
            total_nll += float(nll[sel].sum())
            total_tokens += int(sel.sum())

    mean_nll = total_nll / total_tokens
    if cfg.objective == "autoregressive":
        return EvalResult("bpc", mean_nll / math.log(2), mean_nll, total_tokens)
    return EvalResult("ppl", math.exp(mean_nll), mean_nll, total_tokens)


@dataclass(frozen=True)
class AuditResult:
    passed: bool
    violations: tuple[int, ...]
    positions_checked: int


def causality_audit(model: TransformerLM, sample: np.ndarray, positions=None) -> AuditResult:
    """Perturb token t and require logits at positions < t to be bit-identical."""
    if model.config.objective != "autoregressive":
        raise ValueError("causality audit applies to autoregressive checkpoints")
    sample = np.asarray(sample, dtype=np.int64).reshape(1, -1)
    base, _ = model.forward(sample)
    n = sample.shape[1]
    positions = list(range(n)) if positions is None else list(positions)
    violations = []
    for t in positions:
        perturbed = sample.copy()
        perturbed[0, t] = (perturbed[0, t] + 1) % 256
        out, _ = model.forward(perturbed)
        if t > 0 and not np.array_equal(base[0, :t], out[0, :t]):
            violations.append(t)
    return AuditResult(passed=not violations, violations=tuple(violations), positions_checked=len(positions))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TransformerLM, path: str | Path) -> None:
    """Config text block + manifest (name/shape/offset) + raw little-endian fp32."""
    blobs = []
    manifest = []
    offset = 0
    for name, par in model.params.items():
        raw = np.ascontiguousarray(par.value, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(par.value.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    payload = (
        _CKPT_MAGIC
        + b"[config]\n"
        + model.config.to_text().encode()
        + b"\n[manifest]\n"
        + json.dumps(manifest).encode()
        + b"\n[data]\n"
        + b"".join(blobs)
    )
    Path(path).write_bytes(payload)


def load_checkpoint(path: str | Path) -> TransformerLM:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    head, _, blob = raw.partition(b"\n[data]\n")
    head = head[len(_CKPT_MAGIC) :].decode()
    config_text = head.split("[config]\n", 1)[1].split("\n[manifest]\n", 1)[0]
    manifest = json.loads(head.split("\n[manifest]\n", 1)[1])
    config = ModelConfig.from_text(config_text)

    expected = 0
    for entry in manifest:
        if entry["offset"] != expected:
            raise ValueError(f"manifest offsets overlap or leave gaps at {entry['name']}")
        expected += int(np.prod(entry["shape"])) * 4
    if expected != len(blob):
        raise ValueError(f"manifest covers {expected} bytes but data holds {len(blob)}")

    model = TransformerLM(config, np.random.Generator(np.random.PCG64(0)))
    names = set(model.params)
    for entry in manifest:
        name = entry["name"]
        if name not in names:
            raise ValueError(f"checkpoint parameter {name!r} not in model")
        size = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=entry["offset"])
        model.params[name].value[...] = arr.reshape(entry["shape"])
    return model


# ---------------------------------------------------------------------------
# CLI


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lm", description="byte-level LM harness")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--log-every", type=int, default=50)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "valid", "test"), default="test")
    e.add_argument("--max-windows", type=int, default=None)

    args = parser.parse_args(argv)
    if args.command == "train":
        config = ModelConfig.from_text(Path(args.config).read_text())
        train_split, _, _ = ingest(args.data)
        model, losses = train(config, train_split, args.steps, args.seed, log_every=args.log_every)
        save_checkpoint(model, args.out)
        bits = losses[-1] / math.log(2)
        print(f"final training loss: {losses[-1]:.4f} nats/token ({bits:.4f} bits)")
        print(f"checkpoint written to {args.out}")
        return 0

    model = load_checkpoint(args.ckpt)
    splits = ingest(args.data)
    stream = dict(zip(("train", "valid", "test"), splits))[args.split]
    result = evaluate(model, stream, max_windows=args.max_windows)
    print(f"{result.metric} = {result.value:.4f} ({result.tokens_scored} tokens scored)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
