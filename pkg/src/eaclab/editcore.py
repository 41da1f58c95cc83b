"""Locate-then-edit engine for the micro-LM.

The MLP output matrix ``W_proj`` of a layer is treated as a linear associative
memory: a key ``k*`` read at the last subject token is bound to a new value
``v*`` with a closed-form rank-one write that leaves every key orthogonal to
``C^-1 k*`` untouched. Value vectors are found by gradient descent on the
substituted forward pass; the optimized variable is the displacement from the
memory's current read-out ``W k*``.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import eac as eac_mod
from . import microlm as lm
from . import numgrad as ng
from .eac import EacParams, ElasticConfig, OptimizationError

METHODS = ("ROME", "ROME-EAC", "MEMIT-lite", "MEMIT-lite-EAC", "FT", "FT-EN")


class SpanError(ValueError):
    pass


class DegenerateKeyError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class FactEdit:
    id: str
    subject: str
    prompt_template: str
    target: str
    rephrases: list[str] = field(default_factory=list)
    locality: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.prompt_template.count("{}") != 1:
            raise ValueError(f"{self.id}: prompt template needs exactly one '{{}}' slot")
        if not self.target.strip():
            raise ValueError(f"{self.id}: empty target")
        if not self.subject.strip():
            raise ValueError(f"{self.id}: empty subject")

    @property
    def prompt(self) -> str:
        return self.prompt_template.format(self.subject)

    def rephrase_prompts(self) -> list[str]:
        return [r.format(self.subject) if "{}" in r else r for r in self.rephrases]


@dataclass
class EncodedFact:
    prompt_ids: list[int]
    subject_last: int
    target_id: int
    essence_ids: list[int]
    essence_subject_last: int


def encode_fact(tok: lm.Tokenizer, fact: FactEdit, essence_template: str = "{} is a") -> EncodedFact:
    """Token ids of the prompt and essence prompt plus the last-subject-token index."""
    subj = tok.encode(fact.subject)
    if not subj or tok.unk_id in subj:
        raise SpanError(f"{fact.id}: subject {fact.subject!r} does not tokenize cleanly")
    target = tok.encode(fact.target)
    if len(target) != 1 or target[0] == tok.unk_id:
        raise ValueError(f"{fact.id}: target {fact.target!r} must be a single known token")

    def place(template: str) -> tuple[list[int], int]:
        pre, post = template.split("{}")
        ids = tok.encode(pre) + subj + tok.encode(post)
        return ids, len(tok.encode(pre)) + len(subj) - 1

    prompt_ids, last = place(fact.prompt_template)
    ess_ids, ess_last = place(essence_template)
    return EncodedFact(prompt_ids, last, target[0], ess_ids, ess_last)


# contexts -------------------------------------------------------------------------


def sample_prefixes(corpus, n: int, length: int, boundary_id: int, seed: int) -> list[list[int]]:
    """``n`` prefixes: the empty prefix first, then corpus slices of ``length``
    tokens that end on a sentence boundary."""
    if n < 1:
        raise ValueError("n_prefixes must be >= 1")
    corpus = np.asarray(corpus, dtype=np.int64)
    out: list[list[int]] = [[]]
    if n == 1 or length == 0:
        return out * n if length == 0 else out
    ends = np.flatnonzero(corpus == boundary_id)
    ends = ends[ends >= length - 1]
    if ends.size == 0:
        raise DataError("corpus has no sentence boundary to anchor prefixes")
    rng = np.random.default_rng(seed)
    for e in rng.choice(ends, size=n - 1, replace=ends.size < n - 1):
        out.append(corpus[e - length + 1 : e + 1].tolist())
    return out


@dataclass
class Contexts:
    """Prefix-conditioned copies of one prompt, grouped by length for batching."""

    sequences: list[list[int]]
    subject_pos: list[int]

    @classmethod
    def build(cls, prefixes: Sequence[Sequence[int]], ids: Sequence[int], subject_last: int) -> "Contexts":
        seqs = [list(p) + list(ids) for p in prefixes]
        return cls(seqs, [len(p) + subject_last for p in prefixes])

    def groups(self) -> list[tuple[np.ndarray, np.ndarray]]:
        by_len: dict[int, list[int]] = {}
        for i, s in enumerate(self.sequences):
            by_len.setdefault(len(s), []).append(i)
        return [
            (np.array([self.sequences[i] for i in idx]), np.array([self.subject_pos[i] for i in idx]))
            for _, idx in sorted(by_len.items())
        ]


def sample_windows(corpus, n: int, length: int, seed: int) -> np.ndarray:
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0 or n < 1:
        raise DataError("empty corpus sample")
    length = min(length, corpus.size)
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, corpus.size - length + 1, size=n)
    return corpus[starts[:, None] + np.arange(length)[None, :]]


# keys, covariance, values -----------------------------------------------------------


def compute_key(model: lm.MicroLM, contexts: Contexts, layer: int) -> np.ndarray:
    """Mean MLP key at the last subject token over the prefix contexts."""
    if not 0 <= layer < model.config.n_layers:
        raise IndexError(f"layer {layer} out of range")
    total = np.zeros(model.config.d_mlp)
    n = 0
    for ids, pos in contexts.groups():
        cap = lm.run(model, ids, capture=[layer]).captured[(layer, "mlp_key")]
        total += cap[np.arange(len(ids)), pos].sum(axis=0)
        n += len(ids)
    return total / n


def mean_hidden(model: lm.MicroLM, contexts: Contexts, layer: int, substitute=None) -> np.ndarray:
    """Mean residual stream after ``layer`` at the subject token; ``substitute`` is
    an optional ``(layer, z)`` MLP-output override at the same token."""
    total = np.zeros(model.config.d_model)
    for ids, pos in contexts.groups():
        sub = None
        if substitute is not None:
            sub = lm.Substitution(substitute[0], np.arange(len(ids)), pos, ng.Tensor(substitute[1]))
        cap = lm.run(model, ids, capture=[layer], substitute=sub).captured[(layer, "hidden")]
        total += cap[np.arange(len(ids)), pos].sum(axis=0)
    return total / len(contexts.sequences)


def estimate_covariance(model: lm.MicroLM, windows, layer: int, batch: int = 128) -> np.ndarray:
    """Uncentered second moment (1/M) sum k k^T of MLP keys at every window position."""
    windows = np.asarray(windows, dtype=np.int64)
    if windows.size == 0:
        raise DataError("empty covariance sample")
    if windows.ndim == 1:
        windows = windows[None, :]
    d = model.config.d_mlp
    C = np.zeros((d, d))
    M = 0
    for i in range(0, len(windows), batch):
        keys = lm.run(model, windows[i : i + batch], capture=[layer]).captured[(layer, "mlp_key")]
        K = keys.reshape(-1, d)
        C += K.T @ K
        M += K.shape[0]
    C /= M
    return 0.5 * (C + C.T)


class ValueObjective:
    """L(delta) = mean NLL(target | MLP output := base + delta) + kl_weight * KL on the essence prompt.

    Callable on a displacement vector; returns ``(loss, gradient)`` and keeps
    the most recent NLL/KL split in ``last``. Positions before the subject
    token never see the substitution, so their attention keys/values are cached
    once and each evaluation runs only the suffix from the subject token on,
    for every context and the essence prompt in a single batch.
    """

    def __init__(
        self,
        model: lm.MicroLM,
        enc: EncodedFact,
        contexts: Contexts,
        layer: int,
        base: np.ndarray,
        kl_weight: float,
    ):
        self.model = model
        self.layer = layer
        self.base = np.asarray(base, dtype=np.float64)
        self.kl_weight = kl_weight
        self.target = enc.target_id
        self.n = len(contexts.sequences)
        seqs = list(contexts.sequences)
        subj = list(contexts.subject_pos)
        if kl_weight:
            seqs.append(list(enc.essence_ids))
            subj.append(enc.essence_subject_last)
        self._build(seqs, subj)
        if kl_weight:
            ids = np.array([enc.essence_ids])
            lg = lm.run(model, ids, logit_positions=[ids.shape[1] - 1]).logits
            self.ref_logp = ng.log_softmax(lg).data
        self.last: dict[str, float] = {}

    def _build(self, seqs: list[list[int]], subj: list[int]) -> None:
        cfg = self.model.config
        later = range(self.layer + 1, cfg.n_layers)
        R = len(seqs)
        S = max(len(q) - p for q, p in zip(seqs, subj))
        Pmax = max(subj)
        d, H = cfg.d_model, cfg.n_heads
        dh = d // H
        self.ids = np.zeros((R, S), dtype=np.int64)
        self.hidden = np.zeros((R, S, d))
        self.mid = np.zeros((R, d))
        self.logit_pos = np.zeros(R, dtype=np.int64)
        valid = np.zeros((R, Pmax), dtype=bool)
        ks = {j: np.zeros((R, H, Pmax, dh)) for j in later}
        vs = {j: np.zeros((R, H, Pmax, dh)) for j in later}
        by_len: dict[int, list[int]] = {}
        for r, q in enumerate(seqs):
            by_len.setdefault(len(q), []).append(r)
        for _, rows in sorted(by_len.items()):
            batch = np.array([seqs[r] for r in rows])
            cap = lm.run(self.model, batch, capture=range(self.layer, cfg.n_layers)).captured
            for i, r in enumerate(rows):
                p, n = subj[r], len(seqs[r])
                self.ids[r, : n - p] = seqs[r][p:]
                self.hidden[r, : n - p] = cap[(self.layer, "hidden")][i, p:]
                self.mid[r] = cap[(self.layer, "resid_mid")][i, p]
                self.logit_pos[r] = n - 1 - p
                valid[r, :p] = True
                for j in later:
                    pre = f"layers.{j}.attn."
                    k, v = ng.attention_cache(
                        cap[(j, "attn_in")][i : i + 1, :p],
                        self.model.params[pre + "W_k"],
                        self.model.params[pre + "W_v"],
                        H,
                    )
                    ks[j][r, :, :p] = k[0]
                    vs[j][r, :, :p] = v[0]
        self.past = {j: (ks[j], vs[j], valid) for j in later}

    def tape(self, delta):
        z = ng.leaf(delta)
        zfull = ng.add(ng.Tensor(self.base), z)
        R = len(self.ids)
        rows = np.arange(R)
        x = ng.replace_rows(ng.Tensor(self.hidden), rows, np.zeros(R, dtype=np.int64), ng.add(ng.Tensor(self.mid), zfull))
        lg = lm.run(self.model, self.ids, resume=(self.layer, x), past=self.past, logit_positions=self.logit_pos).logits
        lp = ng.log_softmax(lg)
        picked = ng.pick(lp, np.arange(self.n), np.full(self.n, self.target))
        nll = ng.scale(ng.tsum(picked), -1.0 / self.n)
        kl = ng.Tensor(0.0)
        total = nll
        if self.kl_weight:
            V = lp.shape[1]
            ess = ng.pick(lp, np.full(V, R - 1), np.arange(V))
            kl = ng.tsum(ng.mul(ng.exp(ess), ng.sub(ess, ng.Tensor(self.ref_logp[0]))))
            total = ng.add(nll, ng.scale(kl, self.kl_weight))
        return z, total, nll, kl

    def __call__(self, delta) -> tuple[float, np.ndarray]:
        try:
            z, total, nll, kl = self.tape(delta)
        except ng.NonFiniteError:
            return math.nan, np.full_like(np.asarray(delta, dtype=np.float64), np.nan)
        (g,) = ng.grad(total, [z])
        self.last = {"nll": nll.item(), "kl": kl.item()}
        return total.item(), g


@dataclass
class ValueResult:
    v_star: np.ndarray
    delta: np.ndarray
    base: np.ndarray
    loss_trace: list[float]
    nll_trace: list[float]
    grad_at_opt: np.ndarray
    steps: int
    trajectory: list[np.ndarray]


def optimize_value(
    objective: ValueObjective,
    steps: int,
    lr: float,
    clip: float | None = 5.0,
    known_nll: float | None = None,
    init=None,
    stop_nll: float | None = None,
) -> ValueResult:
    """Clipped gradient descent on the displacement, starting from ``init`` (default 0).

    If ``known_nll`` is set and the model already assigns the target an NLL at or
    below it, no step is taken. With ``stop_nll`` the descent also ends at the
    first iterate whose target NLL is at or below it. The gradient at the returned
    point is evaluated and returned.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    delta = np.zeros_like(objective.base) if init is None else np.array(init, dtype=np.float64)
    trace, nll_trace, traj = [], [], [delta.copy()]
    taken = 0
    for step in range(steps + 1):
        loss, g = objective(delta)
        if not math.isfinite(loss):
            raise OptimizationError(step)
        trace.append(loss)
        nll_trace.append(objective.last["nll"])
        if step == 0 and known_nll is not None and objective.last["nll"] <= known_nll:
            break
        if step == steps or (stop_nll is not None and objective.last["nll"] <= stop_nll):
            break
        delta = delta - lr * eac_mod.clip_norm(g, clip)
        traj.append(delta.copy())
        taken += 1
    return ValueResult(objective.base + delta, delta, objective.base, trace, nll_trace, g, taken, traj)


def rank_one_update(W, k_star, v_star, C) -> tuple[np.ndarray, np.ndarray]:
    """W_hat = W + Lam (C^-1 k)^T with Lam = (v - W k) / ((C^-1 k)^T k).

    Returns ``(W_hat, update)``; ``W_hat @ k_star == v_star`` up to rounding.
    """
    W = np.asarray(W, dtype=np.float64)
    k = np.asarray(k_star, dtype=np.float64)
    v = np.asarray(v_star, dtype=np.float64)
    u = ng.solve_linear(C, k)
    den = float(u @ k)
    if not abs(den) >= 1e-12:
        raise DegenerateKeyError(f"(C^-1 k)^T k = {den:.3g} is too small")
    lam = (v - W @ k) / den
    update = np.outer(lam, u)
    return W + update, update


def numerical_rank(M: np.ndarray, rtol: float = 1e-8) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


# orchestration -----------------------------------------------------------------------


@dataclass(frozen=True)
class EditParams:
    layer: int = 0
    layers: tuple[int, ...] = (0, 1)
    n_prefixes: int = 8
    prefix_len: int = 6
    v_steps: int = 20
    v_lr: float = 5.0
    kl_weight: float = 0.0625
    clip: float | None = 5.0
    known_nll: float | None = 0.05
    stop_nll: float | None = None
    cov_windows: int = 500
    ft_steps: int = 20
    ft_lr: float = 0.5
    ft_elastic: ElasticConfig = field(default_factory=lambda: ElasticConfig(lam=1e-4, mu=1e-2))
    eac: EacParams = field(default_factory=EacParams)
    essence_template: str = "{} is a"
    seed: int = 0

    def replace(self, **kw) -> "EditParams":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EditParams":
        d = dict(d)
        if "eac" in d and isinstance(d["eac"], dict):
            e = dict(d["eac"])
            if isinstance(e.get("elastic"), dict):
                e["elastic"] = ElasticConfig(**e["elastic"])
            d["eac"] = EacParams(**e)
        if isinstance(d.get("ft_elastic"), dict):
            d["ft_elastic"] = ElasticConfig(**d["ft_elastic"])
        if "layers" in d:
            d["layers"] = tuple(d["layers"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown edit params {sorted(unknown)}")
        return cls(**d)


@dataclass
class KeyValuePlan:
    layer: int
    k_star: np.ndarray
    v_star: np.ndarray
    C: np.ndarray
    loss_trace: list[float]
    grad_at_opt: np.ndarray
    v_base: np.ndarray
    contexts: Contexts
    steps: int = 0

    @property
    def delta(self) -> np.ndarray:
        return self.v_star - self.v_base


@dataclass
class EditOutcome:
    fact_id: str
    method: str
    edited_layers: list[int]
    update_norm_l1: float
    rank_of_update: list[int]
    pre_l1: list[float]
    post_l1: list[float]
    success: bool
    opt_steps: int
    noop: bool = False
    wall_ms: float = 0.0
    popcount: int | None = None
    value_l1: float | None = None

    @property
    def rank(self) -> int:
        return sum(self.rank_of_update)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Editor:
    """Applies edits to one model in place; caches per-layer key covariances.

    Covariances are estimated once per layer from the model as it was when the
    editor first needed them and reused for every later edit.
    """

    def __init__(self, model: lm.MicroLM, tok: lm.Tokenizer, corpus, params: EditParams | None = None):
        self.model = model
        self.tok = tok
        self.corpus = np.asarray(corpus, dtype=np.int64)
        self.params = params or EditParams()
        self._cov: dict[int, np.ndarray] = {}
        self._boundary = tok.id(".") if "." in tok.index else tok.unk_id

    def covariance(self, layer: int) -> np.ndarray:
        if layer not in self._cov:
            p = self.params
            windows = sample_windows(self.corpus, p.cov_windows, self.model.config.max_seq, p.seed + 7919 * (layer + 1))
            self._cov[layer] = estimate_covariance(self.model, windows, layer)
        return self._cov[layer]

    def contexts(self, enc: EncodedFact, fact_id: str, params: EditParams | None = None) -> Contexts:
        p = params or self.params
        max_pre = self.model.config.max_seq - len(enc.prompt_ids)
        length = min(p.prefix_len, max(0, max_pre))
        # per-fact stream so a request sees the same prefixes regardless of edit order
        seed = (p.seed * 1_000_003 + sum(ord(c) * 131**i for i, c in enumerate(fact_id))) % 2**32
        pre = sample_prefixes(self.corpus, p.n_prefixes, length, self._boundary, seed)
        return Contexts.build(pre, enc.prompt_ids, enc.subject_last)

    def objective(self, enc: EncodedFact, ctx: Contexts, layer: int, params: EditParams | None = None):
        p = params or self.params
        k_star = compute_key(self.model, ctx, layer)
        base = self.model.W_proj(layer) @ k_star
        return k_star, ValueObjective(self.model, enc, ctx, layer, base, p.kl_weight)

    def plan(self, fact: FactEdit, layer: int, params: EditParams | None = None, steps: int | None = None):
        """Key, covariance and optimized value for one fact at one layer."""
        p = params or self.params
        enc = encode_fact(self.tok, fact, p.essence_template)
        ctx = self.contexts(enc, fact.id, p)
        k_star, obj = self.objective(enc, ctx, layer, p)
        res = optimize_value(obj, steps or p.v_steps, p.v_lr, p.clip, p.known_nll, stop_nll=p.stop_nll)
        plan = KeyValuePlan(
            layer, k_star, res.v_star, self.covariance(layer), res.loss_trace, res.grad_at_opt, res.base, ctx, res.steps
        )
        return plan, obj, res, enc

    def _write(self, layer: int, k_star, v_target) -> tuple[np.ndarray, float, float]:
        W = self.model.W_proj(layer)
        W_hat, update = rank_one_update(W, k_star, v_target, self.covariance(layer))
        pre = float(np.abs(W).sum())
        self.model.set_W_proj(layer, W_hat)
        return update, pre, float(np.abs(W_hat).sum())

    def predicts(self, enc: EncodedFact) -> bool:
        return int(lm.predict_next(self.model, [enc.prompt_ids])[0]) == enc.target_id

    def apply(self, fact: FactEdit, method: str, params: EditParams | None = None) -> EditOutcome:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
        p = params or self.params
        t0 = time.perf_counter()
        if method in ("FT", "FT-EN"):
            out = fine_tune_edit(self, fact, p.ft_steps, p.ft_lr, p.ft_elastic if method == "FT-EN" else None, params=p)
        elif method.startswith("MEMIT"):
            out = self._memit(fact, method, p)
        else:
            out = self._rome(fact, method, p)
        out.wall_ms = 1e3 * (time.perf_counter() - t0)
        return out

    @staticmethod
    def _stop(obj: ValueObjective, p: EditParams):
        if p.stop_nll is None:
            return None
        return lambda: obj.last["nll"] <= p.stop_nll

    def _compress(self, obj: ValueObjective, res: ValueResult, p: EditParams):
        e = p.eac
        ranking = eac_mod.strategy_score(e.strategy, res.delta, res.grad_at_opt)
        mask = eac_mod.build_mask(ranking, e.percentile, e.strategy, seed=e.seed)
        saliency = eac_mod.saliency_score(res.delta, res.grad_at_opt)
        rt = eac_mod.masked_retrain(
            obj, res.delta, mask, e.elastic, e.retrain_steps, e.retrain_lr or p.v_lr, p.clip, alpha_score=saliency, stop=self._stop(obj, p)
        )
        return rt, mask

    def _rome(self, fact: FactEdit, method: str, p: EditParams) -> EditOutcome:
        layer = p.layer
        use_eac = method.endswith("EAC")
        steps = p.eac.anchor_steps if use_eac else p.v_steps
        plan, obj, res, enc = self.plan(fact, layer, p, steps=steps)
        popcount = None
        if res.steps == 0:
            delta = res.delta
            total = 0
        elif use_eac:
            rt, mask = self._compress(obj, res, p)
            delta, popcount = rt.v_prime, mask.popcount
            total = res.steps + rt.steps
        else:
            delta, total = res.delta, res.steps
        update, pre, post = self._write(layer, plan.k_star, plan.v_base + delta)
        return EditOutcome(
            fact.id,
            method,
            [layer],
            float(np.abs(update).sum()),
            [numerical_rank(update)],
            [pre],
            [post],
            self.predicts(enc),
            total,
            noop=res.steps == 0,
            popcount=popcount,
            value_l1=float(np.abs(delta).sum()),
        )

    def _memit(self, fact: FactEdit, method: str, p: EditParams) -> EditOutcome:
        # delta is optimized at the lowest window layer; the hidden state it
        # produces after the top layer is the target the window writes share
        layers = sorted(p.layers)
        bottom, top = layers[0], layers[-1]
        use_eac = method.endswith("EAC")
        steps = p.eac.anchor_steps if use_eac else p.v_steps
        enc = encode_fact(self.tok, fact, p.essence_template)
        ctx = self.contexts(enc, fact.id, p)
        _, obj = self.objective(enc, ctx, bottom, p)
        res = optimize_value(obj, steps, p.v_lr, p.clip, p.known_nll, stop_nll=p.stop_nll)
        popcount = None
        delta, total = res.delta, res.steps
        if res.steps and use_eac:
            rt, mask = self._compress(obj, res, p)
            delta, popcount = rt.v_prime, mask.popcount
            total += rt.steps
        target = mean_hidden(self.model, ctx, top, substitute=(bottom, obj.base + delta))
        ranks, pres, posts, l1 = [], [], [], 0.0
        for i, layer in enumerate(layers):
            if res.steps == 0:
                break
            resid = (target - mean_hidden(self.model, ctx, top)) / (len(layers) - i)
            k_star = compute_key(self.model, ctx, layer)
            W = self.model.W_proj(layer)
            update, pre, post = self._write(layer, k_star, W @ k_star + resid)
            ranks.append(numerical_rank(update))
            pres.append(pre)
            posts.append(post)
            l1 += float(np.abs(update).sum())
        return EditOutcome(
            fact.id,
            method,
            layers,
            l1,
            ranks or [0] * len(layers),
            pres,
            posts,
            self.predicts(enc),
            total,
            noop=res.steps == 0,
            popcount=popcount,
            value_l1=float(np.abs(delta).sum()),
        )


def apply_edit(model, fact: FactEdit, method: str, params: EditParams | None = None, *, tok, corpus) -> EditOutcome:
    """One-off edit with a fresh :class:`Editor` (no covariance reuse)."""
    return Editor(model, tok, corpus, params).apply(fact, method)


def fine_tune_edit(
    editor: Editor,
    fact: FactEdit,
    steps: int,
    lr: float,
    elastic: ElasticConfig | None = None,
    params: EditParams | None = None,
) -> EditOutcome:
    """Clipped gradient steps on the target NLL applied to ``W_proj`` of one layer.

    With ``elastic`` the update on ``Delta W = W - W0`` is proximal: the smooth
    step includes ``2 mu Delta W`` and the L1 part soft-thresholds with weights
    ``1 / (|W0 * grad0| + eps)`` from the first-step weight saliency.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    p = params or editor.params
    model, layer = editor.model, p.layer
    enc = encode_fact(editor.tok, fact, p.essence_template)
    name = f"layers.{layer}.mlp.W_proj"
    W0 = model.params[name].copy()
    ids = np.array([enc.prompt_ids])
    consts = {k: ng.Tensor(v) for k, v in model.params.items() if k != name}
    dW = np.zeros_like(W0)
    alpha = None
    taken = 0
    for step in range(steps):
        leafW = ng.leaf(W0 + dW)
        P = dict(consts, **{name: leafW})
        lg = lm.run(model, ids, params=P, logit_positions=[ids.shape[1] - 1]).logits
        loss = ng.neg(ng.tsum(ng.pick(ng.log_softmax(lg), [0], [enc.target_id])))
        if not math.isfinite(loss.item()):
            raise OptimizationError(step)
        if step == 0 and p.known_nll is not None and loss.item() <= p.known_nll:
            break
        (g,) = ng.grad(loss, [leafW])
        if elastic is None:
            dW = dW - lr * _clip_matrix(g, p.clip)
        else:
            if alpha is None:
                alpha = eac_mod.alpha_weights(W0 * g, elastic.epsilon)
            smooth = _clip_matrix(g + 2.0 * elastic.mu * dW, p.clip)
            dW = eac_mod.soft_threshold(dW - lr * smooth, lr * elastic.lam * alpha)
        taken += 1
    pre = float(np.abs(W0).sum())
    if taken:
        model.set_W_proj(layer, W0 + dW)
    post = float(np.abs(model.W_proj(layer)).sum())
    return EditOutcome(
        fact.id,
        "FT-EN" if elastic is not None else "FT",
        [layer],
        float(np.abs(dW).sum()),
        [numerical_rank(dW)],
        [pre],
        [post],
        editor.predicts(enc),
        taken,
        noop=taken == 0,
    )


def _clip_matrix(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    return eac_mod.clip_norm(g.reshape(-1), max_norm).reshape(g.shape)
