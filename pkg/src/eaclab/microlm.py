"""A miniature pre-norm decoder-only transformer on the numgrad tape.

MLP blocks compute ``W_proj @ gelu(W_fc @ ln(h) + b_fc)`` with no output bias,
so the post-GELU activation is the memory *key* and ``W_proj @ key`` is the
memory *value* written into the residual stream.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numgrad as ng

FORMAT_VERSION = "eaclab-microlm/1"


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_mlp: int = 256
    max_seq: int = 24
    rng_seed: int = 0

    def validate(self) -> "LmConfig":
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_mlp", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_mlp < self.d_model:
            raise ConfigError("d_mlp must be >= d_model")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be non-negative")
        return self


@dataclass(frozen=True)
class TraceSpec:
    layer: int
    token_index: int
    capture: tuple[str, ...] = ("mlp_key", "mlp_value", "hidden")


CAPTURE_KINDS = ("mlp_key", "mlp_value", "hidden", "resid_mid", "attn_in")


class Tokenizer:
    """Whitespace tokenizer over a fixed vocabulary; unknown words map to ``<unk>``."""

    UNK = "<unk>"

    def __init__(self, words: Sequence[str]):
        if len(set(words)) != len(words):
            raise ValueError("vocabulary has duplicate entries")
        if self.UNK not in words:
            raise ValueError("vocabulary must contain <unk>")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.unk_id = self.index[self.UNK]

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.words[int(i)] for i in ids)

    def id(self, word: str) -> int:
        return self.index[word]


def _param_shapes(cfg: LmConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, m = cfg.d_model, cfg.d_mlp
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_seq, d))]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "ln1.g", (d,)),
            (p + "ln1.b", (d,)),
            (p + "attn.W_q", (d, d)),
            (p + "attn.W_k", (d, d)),
            (p + "attn.W_v", (d, d)),
            (p + "attn.W_o", (d, d)),
            (p + "ln2.g", (d,)),
            (p + "ln2.b", (d,)),
            (p + "mlp.W_fc", (m, d)),
            (p + "mlp.b_fc", (m,)),
            (p + "mlp.W_proj", (d, m)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("unembed", (cfg.vocab_size, d))]
    return shapes


class MicroLM:
    """Config plus a flat name -> array parameter store.

    ``version`` is bumped by every in-place edit so cached predictions can be
    checked for staleness.
    """

    def __init__(self, config: LmConfig, params: dict[str, np.ndarray], version: int = 0):
        self.config = config
        self.params = params
        self.version = version
        self._const: dict[str, tuple[np.ndarray, ng.Tensor]] = {}

    def constants(self) -> dict[str, ng.Tensor]:
        """Parameters wrapped as constant tensors, rebuilt only for replaced arrays."""
        out = {}
        for k, v in self.params.items():
            hit = self._const.get(k)
            if hit is None or hit[0] is not v:
                hit = self._const[k] = (v, ng.Tensor(v))
            out[k] = hit[1]
        return out

    def W_proj(self, layer: int) -> np.ndarray:
        return self.params[f"layers.{layer}.mlp.W_proj"]

    def set_W_proj(self, layer: int, W: np.ndarray) -> None:
        key = f"layers.{layer}.mlp.W_proj"
        if W.shape != self.params[key].shape:
            raise ValueError(f"W_proj shape {W.shape} != {self.params[key].shape}")
        self.params[key] = np.array(W, dtype=np.float64)
        self.version += 1

    def copy(self) -> "MicroLM":
        return MicroLM(self.config, {k: v.copy() for k, v in self.params.items()}, self.version)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())


def init_model(config: LmConfig) -> MicroLM:
    cfg = config.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    params: dict[str, np.ndarray] = {}
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    for name, shape in _param_shapes(cfg):
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith(".b") or name.endswith("b_fc"):
            params[name] = np.zeros(shape)
        elif name.endswith("W_o") or name.endswith("W_proj"):
            params[name] = rng.normal(0.0, resid_std, shape)
        else:
            params[name] = rng.normal(0.0, 0.02 if "emb" not in name else 0.1, shape)
    return MicroLM(cfg, params)


# forward ----------------------------------------------------------------------


@dataclass
class Substitution:
    """Replace the MLP output of ``layer`` at ``(batch_idx[i], pos_idx[i])`` with ``z``."""

    layer: int
    batch_idx: np.ndarray
    pos_idx: np.ndarray
    z: ng.Tensor


@dataclass
class ForwardResult:
    logits: ng.Tensor
    captured: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)


def _as_ids(tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError(f"token batch must be (B, T) with T >= 1, got {ids.shape}")
    return ids


def run(
    model: MicroLM,
    tokens,
    *,
    capture: Iterable[int] = (),
    substitute: Substitution | None = None,
    params: dict[str, ng.Tensor] | None = None,
    logit_positions: np.ndarray | None = None,
    resume: tuple[int, ng.Tensor] | None = None,
    past: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
) -> ForwardResult:
    """Batched forward pass returning logits (B, T, V) plus captured activations.

    ``capture`` lists layers whose ``mlp_key``/``mlp_value``/``hidden``/
    ``resid_mid`` arrays (B, T, ·) are recorded. ``params`` may hold leaf
    tensors (training); otherwise weights enter the tape as constants. With
    ``logit_positions`` (one position per row) logits come back as (B, V).
    ``resume=(layer, x)`` skips the embedding and blocks up to ``layer`` and
    continues from the residual stream ``x`` (B, T, d_model) after it.
    ``past`` maps a layer to cached attention keys/values of earlier positions
    (see :func:`numgrad.attention_cache`); ``tokens`` are then the positions
    that follow them and only make sense together with ``resume``.
    """
    cfg = model.config
    ids = _as_ids(tokens)
    B, T = ids.shape
    if past and resume is None:
        raise ValueError("past attention caches need a resumed stream")
    if T > cfg.max_seq:
        raise ValueError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    P = params if params is not None else model.constants()
    capture = set(capture)
    if substitute is not None and not 0 <= substitute.layer < cfg.n_layers:
        raise IndexError(f"substitution layer {substitute.layer} out of range")
    H = cfg.n_heads
    captured: dict[tuple[int, str], np.ndarray] = {}

    if resume is None:
        first = 0
        x = ng.embedding(P["tok_emb"], ids) + ng.reshape(
            ng.embedding(P["pos_emb"], np.arange(T)), (1, T, cfg.d_model)
        )
    else:
        first, x = resume[0] + 1, resume[1]
        if x.shape != (B, T, cfg.d_model):
            raise ValueError(f"resume stream has shape {x.shape}, expected {(B, T, cfg.d_model)}")
    for layer in range(first, cfg.n_layers):
        p = f"layers.{layer}."
        h = ng.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        kv = past.get(layer) if past else None
        x = x + ng.attention(h, P[p + "attn.W_q"], P[p + "attn.W_k"], P[p + "attn.W_v"], P[p + "attn.W_o"], H, kv)

        h2 = ng.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        key = ng.gelu(ng.linear(h2, P[p + "mlp.W_fc"], P[p + "mlp.b_fc"]))
        value = ng.linear(key, P[p + "mlp.W_proj"])
        if layer in capture:
            captured[(layer, "attn_in")] = h.data
            captured[(layer, "resid_mid")] = x.data
            captured[(layer, "mlp_key")] = key.data
            captured[(layer, "mlp_value")] = value.data
        if substitute is not None and substitute.layer == layer:
            value = ng.replace_rows(value, substitute.batch_idx, substitute.pos_idx, substitute.z)
        x = x + value
        if layer in capture:
            captured[(layer, "hidden")] = x.data

    x = ng.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    if logit_positions is not None:
        pos = np.asarray(logit_positions, dtype=np.int64)
        flat = ng.reshape(x, (B * T, cfg.d_model))
        sel = np.arange(B) * T + pos
        # one-hot row selection keeps the op set small
        onehot = np.zeros((B, B * T))
        onehot[np.arange(B), sel] = 1.0
        x = ng.matmul(ng.Tensor(onehot), flat)
    logits = ng.linear(x, P["unembed"])
    return ForwardResult(logits, captured)


def logits(model: MicroLM, tokens) -> np.ndarray:
    return run(model, tokens).logits.data


def forward_traced(model: MicroLM, tokens, trace: TraceSpec) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Logits (T, V) for one sequence plus vectors captured at ``trace``."""
    ids = _as_ids(tokens)
    if ids.shape[0] != 1:
        raise ValueError("forward_traced takes a single sequence")
    if not 0 <= trace.layer < model.config.n_layers:
        raise IndexError(f"trace layer {trace.layer} out of range")
    if not 0 <= trace.token_index < ids.shape[1]:
        raise IndexError(f"trace token {trace.token_index} out of range for length {ids.shape[1]}")
    unknown = set(trace.capture) - set(CAPTURE_KINDS)
    if unknown:
        raise ValueError(f"unknown capture kinds {sorted(unknown)}")
    res = run(model, ids, capture=[trace.layer])
    vecs = {kind: res.captured[(trace.layer, kind)][0, trace.token_index].copy() for kind in trace.capture}
    return res.logits.data[0], vecs


def forward_substituted(model: MicroLM, tokens, layer: int, token_index: int, z) -> ng.Tensor:
    """Logits (T, V) with the MLP output at (layer, token_index) replaced by ``z``.

    Differentiable in ``z`` when ``z`` is a leaf tensor.
    """
    ids = _as_ids(tokens)
    zt = z if isinstance(z, ng.Tensor) else ng.Tensor(z)
    if zt.shape != (model.config.d_model,):
        raise ValueError(f"z must have shape ({model.config.d_model},), got {zt.shape}")
    if not 0 <= token_index < ids.shape[1]:
        raise IndexError(f"token_index {token_index} out of range")
    sub = Substitution(layer, np.zeros(1, dtype=np.int64), np.array([token_index]), zt)
    out = run(model, ids, substitute=sub).logits
    return ng.reshape(out, out.shape[1:])


def predict_next(model: MicroLM, prompts: Sequence[Sequence[int]]) -> np.ndarray:
    """Greedy next-token id after each prompt (prompts may differ in length)."""
    out = np.empty(len(prompts), dtype=np.int64)
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    for n, idx in by_len.items():
        batch = np.array([prompts[i] for i in idx], dtype=np.int64)
        lg = run(model, batch, logit_positions=np.full(len(idx), n - 1)).logits.data
        out[idx] = lg.argmax(axis=-1)
    return out


# training ---------------------------------------------------------------------


def cross_entropy(lg: ng.Tensor, targets: np.ndarray) -> ng.Tensor:
    V = lg.shape[-1]
    flat = ng.reshape(ng.log_softmax(lg), (-1, V))
    t = np.asarray(targets).reshape(-1)
    return ng.neg(ng.mean(ng.pick(flat, np.arange(t.size), t)))


def _windows(corpus: np.ndarray, starts: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    idx = starts[:, None] + np.arange(T + 1)[None, :]
    w = corpus[idx]
    return w[:, :-1], w[:, 1:]


def eval_loss(model: MicroLM, corpus, seq_len: int | None = None, max_windows: int = 64) -> float:
    """Mean next-token cross-entropy over non-overlapping windows of ``corpus``."""
    corpus = np.asarray(corpus, dtype=np.int64)
    T = min(seq_len or model.config.max_seq, len(corpus) - 1)
    if T < 1:
        raise ValueError("corpus too short")
    starts = np.arange(0, len(corpus) - T - 1 + 1, T)[:max_windows]
    x, y = _windows(corpus, starts, T)
    return cross_entropy(run(model, x).logits, y).item()


def train_toy(
    model: MicroLM,
    corpus,
    steps: int,
    *,
    lr: float = 3e-3,
    batch_size: int = 8,
    seed: int = 0,
    weight_decay: float = 0.0,
    log_every: int = 0,
) -> list[float]:
    """Adam on random corpus windows; mutates ``model`` and returns per-step losses."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size < 2:
        raise ValueError("corpus is empty")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    T = min(model.config.max_seq, corpus.size - 1)
    rng = np.random.default_rng(seed)
    names = list(model.params)
    m = {k: np.zeros_like(model.params[k]) for k in names}
    v = {k: np.zeros_like(model.params[k]) for k in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses: list[float] = []
    warmup = max(1, min(100, steps // 10))
    for step in range(steps):
        starts = rng.integers(0, corpus.size - T, size=batch_size)
        x, y = _windows(corpus, starts, T)
        leaves = {k: ng.leaf(model.params[k]) for k in names}
        try:
            loss = cross_entropy(run(model, x, params=leaves).logits, y)
        except ng.NonFiniteError as exc:
            raise TrainingError(step, "non-finite activations") from exc
        if not math.isfinite(loss.item()):
            raise TrainingError(step, "loss is NaN")
        losses.append(loss.item())
        grads = ng.grad(loss, [leaves[k] for k in names])
        frac = min(1.0, (step + 1) / warmup)
        # cosine decay to 10% after warmup
        decay = 0.55 + 0.45 * math.cos(math.pi * step / max(1, steps))
        step_lr = lr * frac * decay
        t = step + 1
        for k, g in zip(names, grads):
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            upd = (m[k] / (1 - b1**t)) / (np.sqrt(v[k] / (1 - b2**t)) + eps)
            if weight_decay and k.endswith(("W_q", "W_k", "W_v", "W_o", "W_fc", "W_proj")):
                upd = upd + weight_decay * model.params[k]
            model.params[k] = model.params[k] - step_lr * upd
        if log_every and step % log_every == 0:
            print(f"step {step:5d} loss {losses[-1]:.4f}")
    model.version += 1
    return losses


# checkpoints --------------------------------------------------------------------


def save_checkpoint(model: MicroLM, path) -> Path:
    path = Path(path)
    meta = {
        "format": FORMAT_VERSION,
        "config": asdict(model.config),
        "version": model.version,
        "params": {k: list(v.shape) for k, v in model.params.items()},
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path) -> MicroLM:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        cfg = LmConfig(**meta["config"]).validate()
        params = {}
        for name, shape in _param_shapes(cfg):
            arr = z[f"param/{name}"]
            if list(arr.shape) != list(shape):
                raise ValueError(f"{name}: stored shape {arr.shape}, expected {shape}")
            params[name] = np.array(arr, dtype=np.float64)
    return MicroLM(cfg, params, meta.get("version", 0))
