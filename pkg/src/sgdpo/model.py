"""Tiny causal transformer policy and per-token log-probability traces."""

from __future__ import annotations

import json
import math
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1

TokenSeq = Sequence[int]


class InputError(ValueError):
    """Token ids or lengths that the model cannot accept."""


@dataclass(frozen=True)
class Vocab:
    size: int
    pad_id: int
    bos_id: int
    eos_id: int

    def __post_init__(self):
        if not 0 < self.size <= 512:
            raise ValueError("vocab size must lie in (0, 512]")
        for name in ("pad_id", "bos_id", "eos_id"):
            if not 0 <= getattr(self, name) < self.size:
                raise ValueError(f"{name} outside [0, {self.size})")

    @classmethod
    def bytes(cls) -> "Vocab":
        return cls(size=259, pad_id=256, bos_id=257, eos_id=258)

    @classmethod
    def small(cls, n_symbols: int) -> "Vocab":
        """``n_symbols`` content ids followed by pad, bos, eos."""
        return cls(size=n_symbols + 3, pad_id=n_symbols, bos_id=n_symbols + 1, eos_id=n_symbols + 2)


class ByteTokenizer:
    """Raw UTF-8 bytes map to ids 0..255; no normalisation."""

    vocab = Vocab.bytes()

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def encode_response(self, text: str) -> list[int]:
        return self.encode(text) + [self.vocab.eos_id]

    def decode(self, ids: TokenSeq) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class ModelConfig:
    vocab: Vocab = field(default_factory=Vocab.bytes)
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_context: int = 256
    max_params: int = 200_000

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab"] = Vocab(**d["vocab"])
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab.size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_context, d),
    }
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.w_qkv": (d, 3 * d),
                p + "attn.w_out": (d, d),
                p + "attn.b_out": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "mlp.w_in": (d, f),
                p + "mlp.b_in": (f,),
                p + "mlp.w_out": (f, d),
                p + "mlp.b_out": (d,),
            }
        )
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, v), "head.b": (v,)})
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    frozen: bool = False

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        trainable = requires_grad and not self.frozen
        return {k: Tensor(v, requires_grad=trainable) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.frozen)


def init_params(
    cfg: ModelConfig, seed: int = 0, *, uniform_head: bool = False, init_std: float = 0.02
) -> ModelParams:
    """GPT-2 style init. ``uniform_head`` zeroes the output layer so every
    next-token distribution is exactly uniform."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arrays[name] = np.ones(shape)
        elif leaf.startswith("b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, init_std, size=shape)
    if uniform_head:
        arrays["head.w"][:] = 0.0
        arrays["head.b"][:] = 0.0
    params = ModelParams(cfg, arrays)
    if params.n_params > cfg.max_params:
        raise ValueError(f"model has {params.n_params} parameters, cap is {cfg.max_params}")
    return params


def clone_frozen(params: ModelParams) -> ModelParams:
    """Deep copy that never receives gradients or optimizer updates."""
    clone = params.copy()
    clone.frozen = True
    for a in clone.arrays.values():
        a.flags.writeable = False
    return clone


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * ((var + eps) ** -0.5) * g + b


def forward_logits(p: dict[str, Tensor], cfg: ModelConfig, tokens: np.ndarray) -> Tensor:
    """Logits of shape (batch, time, vocab) for right-padded token ids."""
    tokens = np.asarray(tokens, dtype=np.int64)
    bsz, t = tokens.shape
    d, h = cfg.d_model, cfg.n_heads
    dh = d // h
    x = p["tok_emb"][tokens] + p["pos_emb"][np.arange(t)]
    causal = np.triu(np.full((t, t), -np.inf), k=1)
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.n_layers):
        pre = f"h{i}."
        a = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        # no qkv bias: the key bias would be softmax-invariant and never learn
        qkv = a @ p[pre + "attn.w_qkv"]
        q, k, v = (qkv[..., j * d : (j + 1) * d].reshape(bsz, t, h, dh).transpose(0, 2, 1, 3) for j in range(3))
        scores = (q * scale) @ k.transpose(0, 1, 3, 2) + causal
        att = ad.softmax(scores, axis=-1) @ v
        att = att.transpose(0, 2, 1, 3).reshape(bsz, t, d)
        x = x + att @ p[pre + "attn.w_out"] + p[pre + "attn.b_out"]
        m = _layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        m = ad.gelu(m @ p[pre + "mlp.w_in"] + p[pre + "mlp.b_in"])
        x = x + m @ p[pre + "mlp.w_out"] + p[pre + "mlp.b_out"]
    x = _layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    return x @ p["head.w"] + p["head.b"]


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


@dataclass
class SequenceTrace:
    """Per-token conditional log-probs of a response given its prompt.

    ``logprobs`` may carry an autodiff graph; the numpy views below never do.
    """

    token_ids: tuple[int, ...]
    logprobs: Tensor

    def __post_init__(self):
        if self.logprobs.shape != (len(self.token_ids),):
            raise InputError("trace length does not match response length")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def per_token_logprob(self) -> np.ndarray:
        return self.logprobs.data

    @property
    def total_logprob(self) -> float:
        return float(self.logprobs.data.sum())

    def total(self) -> Tensor:
        return self.logprobs.sum()

    def span(self, start: int, length: int) -> Tensor:
        _check_span(len(self), start, length)
        return self.logprobs[start : start + length].sum()


def _check_span(n: int, start: int, length: int) -> None:
    if length < 1 or start < 0 or start + length > n:
        raise InputError(f"span (start={start}, length={length}) invalid for length {n}")


def span_logprob(trace: SequenceTrace, start: int, length: int) -> float:
    _check_span(len(trace), start, length)
    return float(trace.per_token_logprob[start : start + length].sum())


def _validate(cfg: ModelConfig, prompt: TokenSeq, response: TokenSeq) -> None:
    if len(response) < 1:
        raise InputError("response must contain at least one token")
    for tok in (*prompt, *response):
        if not 0 <= int(tok) < cfg.vocab.size:
            raise InputError(f"token id {tok} outside vocab of size {cfg.vocab.size}")
    if 1 + len(prompt) + len(response) > cfg.max_context:
        raise InputError(
            f"bos + prompt ({len(prompt)}) + response ({len(response)}) exceeds context {cfg.max_context}"
        )


def batch_traces(
    tensors: dict[str, Tensor],
    cfg: ModelConfig,
    prompts: Sequence[TokenSeq],
    responses: Sequence[TokenSeq],
) -> list[SequenceTrace]:
    """Score a batch of (prompt, response) pairs in one padded forward pass.

    Only response tokens are scored; the model sees ``[bos] + prompt + response``.
    """
    if len(prompts) != len(responses) or not prompts:
        raise InputError("need equally many, and at least one, prompts and responses")
    for pr, rs in zip(prompts, responses):
        _validate(cfg, pr, rs)
    seqs = [[cfg.vocab.bos_id, *map(int, pr), *map(int, rs)] for pr, rs in zip(prompts, responses)]
    t = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), t), cfg.vocab.pad_id, dtype=np.int64)
    targets = np.full((len(seqs), t), cfg.vocab.pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        inputs[i, : len(s) - 1] = s[:-1]
        targets[i, : len(s) - 1] = s[1:]
    logp = ad.gather(ad.log_softmax(forward_logits(tensors, cfg, inputs), axis=-1), targets)
    traces = []
    for i, (pr, rs) in enumerate(zip(prompts, responses)):
        # target index j predicts seqs[i][j + 1]; responses start after bos + prompt
        start = len(pr)
        traces.append(SequenceTrace(tuple(int(x) for x in rs), logp[i, start : start + len(rs)]))
    return traces


def seq_logprob(params: ModelParams, prompt: TokenSeq, response: TokenSeq) -> SequenceTrace:
    with ad.no_grad():
        return batch_traces(params.tensors(), params.config, [prompt], [response])[0]


def next_token_logprobs(params: ModelParams, context: TokenSeq) -> np.ndarray:
    """Log-distribution over the token following ``[bos] + context``."""
    cfg = params.config
    seq = [cfg.vocab.bos_id, *map(int, context)]
    if len(seq) > cfg.max_context:
        raise InputError("context exceeds model window")
    with ad.no_grad():
        logits = forward_logits(params.tensors(), cfg, np.asarray([seq]))
        return ad.log_softmax(logits, axis=-1).data[0, -1]


def sample(
    params: ModelParams,
    prompt: TokenSeq,
    max_len: int,
    rng_seed: int = 0,
    temperature: float = 1.0,
) -> list[int]:
    """Ancestral sampling; ``temperature=0`` is greedy. Stops at eos."""
    cfg = params.config
    rng = np.random.default_rng(rng_seed)
    out: list[int] = []
    budget = min(max_len, cfg.max_context - 1 - len(prompt))
    for _ in range(max(0, budget)):
        lp = next_token_logprobs(params, [*prompt, *out])
        if temperature == 0:
            tok = int(np.argmax(lp))
        else:
            z = lp / temperature
            prob = np.exp(z - z.max())
            tok = int(rng.choice(cfg.vocab.size, p=prob / prob.sum()))
        if tok == cfg.vocab.eos_id:
            break
        out.append(tok)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> Path:
    """Write an ``.npz`` container atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": CHECKPOINT_VERSION, "config": params.config.to_dict()}
    payload = {f"param/{k}": v for k, v in params.arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh, zipfile.ZipFile(fh, "w", zipfile.ZIP_STORED) as zf:
            for name, arr in payload.items():
                # fixed timestamp so identical parameters give identical bytes
                with zf.open(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), "w") as member:
                    np.lib.format.write_array(member, np.ascontiguousarray(arr), allow_pickle=False)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig.from_dict(meta["config"])
        arrays = {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("param/")}
    expected = param_shapes(cfg)
    if set(arrays) != set(expected) or any(arrays[k].shape != s for k, s in expected.items()):
        raise ValueError("checkpoint arrays do not match its architecture")
    return ModelParams(cfg, {k: arrays[k] for k in expected})
