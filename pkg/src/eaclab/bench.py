"""Fact files, experiment configs, the sequential-editing harness and report output."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import editcore as ec
from . import evalkit as ev
from . import microlm as lm
from . import toyworld as tw
from .eac import POLICIES, STRATEGIES, EacParams, ElasticConfig

FACTS_FORMAT = "eaclab-facts/1"
CONFIG_FORMAT = "eaclab-experiment/1"
REPORT_FORMAT = "eaclab-sequential/1"
TABLE_FORMAT = "eaclab-metrics/1"
PLOT_FORMAT = "eaclab-plot/1"
TABLE_COLUMNS = ("step", "reliability", "generalization", "locality", "l1_dev_abs", "l1_dev_rel", "edit_ms")
OUTPUT_ENV = "EACLAB_OUTPUT_DIR"


class FactFileError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# fact files -----------------------------------------------------------------------


def _from_counterfact(r: dict) -> dict:
    rw = r["requested_rewrite"]
    prompt = rw["prompt"].replace("{}", "{}")
    return {
        "id": str(r.get("case_id", "")),
        "subject": rw["subject"],
        "prompt": prompt,
        "target": rw["target_new"]["str"],
        "rephrases": list(r.get("paraphrase_prompts", [])),
        "locality": [
            {"prompt": p, "expected": rw.get("target_true", {}).get("str", "")}
            for p in r.get("neighborhood_prompts", [])
        ],
    }


def _from_zsre(r: dict) -> dict:
    subject = r["subject"]
    reph = r.get("rephrase", [])
    return {
        "id": str(r.get("case_id", r.get("id", ""))),
        "subject": subject,
        "prompt": r["src"].replace(subject, "{}", 1),
        "target": r["alt"],
        "rephrases": [reph] if isinstance(reph, str) else list(reph),
        "locality": [{"prompt": r["loc"], "expected": r.get("loc_ans", "")}] if r.get("loc") else [],
    }


def _normalize(r: dict) -> dict:
    if "requested_rewrite" in r:
        return _from_counterfact(r)
    if "src" in r and "alt" in r:
        return _from_zsre(r)
    return r


def _to_fact(i: int, raw) -> ec.FactEdit:
    if not isinstance(raw, dict):
        raise FactFileError(f"record {i}: expected an object, got {type(raw).__name__}")
    try:
        r = _normalize(raw)
    except (KeyError, TypeError, AttributeError) as exc:
        raise FactFileError(f"record {i}: malformed source record ({exc})") from exc
    for key in ("id", "subject", "prompt", "target"):
        if key not in r:
            raise FactFileError(f"record {i}: missing field '{key}'")
        if not isinstance(r[key], str):
            raise FactFileError(f"record {i}: field '{key}' must be a string")
    loc = []
    for j, probe in enumerate(r.get("locality", [])):
        try:
            loc.append((str(probe["prompt"]), str(probe["expected"])))
        except (KeyError, TypeError) as exc:
            raise FactFileError(f"record {i}: locality probe {j} needs prompt and expected") from exc
    try:
        return ec.FactEdit(r["id"], r["subject"], r["prompt"], r["target"], [str(x) for x in r.get("rephrases", [])], loc)
    except ValueError as exc:
        raise FactFileError(f"record {i}: {exc}") from exc


def parse_facts(doc) -> list[ec.FactEdit]:
    """Validate a decoded fact document: a bare list or ``{"format", "facts"}``."""
    if isinstance(doc, dict):
        if doc.get("format") != FACTS_FORMAT:
            raise FactFileError(f"unsupported fact file format {doc.get('format')!r}")
        doc = doc.get("facts")
    if not isinstance(doc, list):
        raise FactFileError("fact file must hold a list of records")
    facts, seen = [], {}
    for i, raw in enumerate(doc):
        f = _to_fact(i, raw)
        if f.id in seen:
            raise FactFileError(f"record {i}: duplicate id {f.id!r} (first at record {seen[f.id]})")
        seen[f.id] = i
        facts.append(f)
    return facts


def load_facts(path=None) -> list[ec.FactEdit]:
    """Facts from a JSON file; ``None`` loads the bundled 64-fact toy set."""
    if path is None:
        text = resources.files("eaclab").joinpath("data/toy_facts.json").read_text()
        where = "bundled toy facts"
    else:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"fact file not found: {path}")
        text = path.read_text()
        where = str(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FactFileError(f"{where}: not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    return parse_facts(doc)


def toy_fact_document(seed: int = 0) -> dict:
    return {"format": FACTS_FORMAT, "facts": tw.edit_requests(seed)}


# config ----------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    method: str = "ROME-EAC"
    n_edits: int = 20
    eval_every: int = 5
    checkpoint: str | None = None
    model: dict = field(default_factory=dict)
    train_steps: int = 2000
    dataset: str | None = None
    world_seed: int = 0
    order_seed: int | None = 0
    edit: dict = field(default_factory=dict)
    eac: dict = field(default_factory=dict)
    drift_prompts: int = 100
    output_dir: str = "eaclab-out"
    formats: tuple[str, ...] = ("table", "record", "plot")

    def __post_init__(self):
        if self.method not in ec.METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {ec.METHODS}")
        if self.n_edits < 1:
            raise ConfigError("n_edits must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        self.formats = tuple(self.formats)
        bad = set(self.formats) - {"table", "record", "plot"}
        if bad:
            raise ConfigError(f"unknown report formats {sorted(bad)}")
        self.edit_params()

    def check_paths(self) -> None:
        for name in ("checkpoint", "dataset"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise FileNotFoundError(f"{name} not found: {p}")

    def edit_params(self) -> ec.EditParams:
        e = dict(self.eac)
        if "policy" in e:
            pol = e.pop("policy")
            if pol not in POLICIES:
                raise ConfigError(f"unknown percentile policy {pol!r}")
            e["percentile"] = POLICIES[pol]
        if "budget" in e:
            e["anchor_steps"], e["retrain_steps"] = e.pop("budget")
        elastic = {k: e.pop(k) for k in ("lam", "mu", "epsilon") if k in e}
        if e.get("strategy", STRATEGIES[0]) not in STRATEGIES:
            raise ConfigError(f"unknown strategy {e['strategy']!r}")
        try:
            if elastic:
                e["elastic"] = ElasticConfig(**{**dataclasses.asdict(EacParams().elastic), **elastic})
            p = dict(self.edit)
            p["eac"] = EacParams(**e)
            return ec.EditParams.from_dict(p)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid edit parameters: {exc}") from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["formats"] = list(self.formats)
        d["format"] = CONFIG_FORMAT
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        fmt = d.pop("format", CONFIG_FORMAT)
        if fmt != CONFIG_FORMAT:
            raise ConfigError(f"unsupported config format {fmt!r}")
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON (line {exc.lineno}): {exc.msg}") from exc
        cfg = cls.from_dict(d)
        # relative paths are taken from the config file's folder
        for name in ("checkpoint", "dataset"):
            p = getattr(cfg, name)
            if p is not None and not Path(p).is_absolute():
                setattr(cfg, name, str(path.parent / p))
        cfg.check_paths()
        return cfg

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


# harness ---------------------------------------------------------------------------


@dataclass
class MetricsRow:
    step: int
    reliability: float
    generalization: float
    locality: float
    l1_dev_abs: float
    l1_dev_rel: float
    edit_ms: float = 0.0

    def __post_init__(self):
        for name in ("reliability", "generalization", "locality"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.l1_dev_abs < 0:
            raise ValueError("l1_dev_abs must be >= 0")


@dataclass
class SequentialReport:
    config: dict
    rows: list[MetricsRow] = field(default_factory=list)
    outcomes: list[dict] = field(default_factory=list)
    drift: list[dict] = field(default_factory=list)
    error: dict | None = None
    started: str = ""
    format: str = REPORT_FORMAT

    @property
    def wall_ms(self) -> list[float]:
        return [o["wall_ms"] for o in self.outcomes]

    def final(self) -> MetricsRow:
        return self.rows[-1]

    def to_dict(self) -> dict:
        return {
            "format": self.format,
            "started": self.started,
            "config": self.config,
            "rows": [dataclasses.asdict(r) for r in self.rows],
            "outcomes": self.outcomes,
            "drift": self.drift,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SequentialReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"unsupported report format {d.get('format')!r}")
        return cls(
            config=d["config"],
            rows=[MetricsRow(**r) for r in d["rows"]],
            outcomes=list(d["outcomes"]),
            drift=list(d["drift"]),
            error=d.get("error"),
            started=d.get("started", ""),
        )

    def deterministic_dict(self) -> dict:
        """The record without wall-clock fields, for replay comparisons."""
        d = self.to_dict()
        d.pop("started")
        for r in d["rows"]:
            r.pop("edit_ms")
        d["outcomes"] = [{k: v for k, v in o.items() if k != "wall_ms"} for o in d["outcomes"]]
        return d


def checkpoint_steps(n_edits: int, eval_every: int) -> list[int]:
    steps = list(range(0, n_edits + 1, eval_every))
    if steps[-1] != n_edits:
        steps.append(n_edits)
    return steps


def drift_prompts(tok: lm.Tokenizer, facts: Sequence[ec.FactEdit], n: int) -> list[tuple[list[int], int]]:
    """Up to ``n`` (ids, subject-final position) trace points: each fact's prompt, then rephrases."""
    out = []
    pools = [[f.prompt_template] + list(f.rephrases) for f in facts]
    depth = max((len(p) for p in pools), default=0)
    for j in range(depth):
        for f, pool in zip(facts, pools):
            if j < len(pool) and len(out) < n:
                tmpl = pool[j] if "{}" in pool[j] else None
                if tmpl is None:
                    continue
                enc = ec.encode_fact(tok, dataclasses.replace(f, prompt_template=tmpl))
                out.append((enc.prompt_ids, enc.subject_last))
    return out


def prepare_model(cfg: ExperimentConfig, tok: lm.Tokenizer, corpus) -> lm.MicroLM:
    if cfg.checkpoint is not None:
        return lm.load_checkpoint(cfg.checkpoint)
    model = lm.init_model(lm.LmConfig(**cfg.model).validate())
    lm.train_toy(model, corpus, cfg.train_steps)
    return model


def _cases(applied: Sequence[ec.FactEdit]) -> list[ev.EditEvalCase]:
    scope = set()
    for f in applied:
        scope |= {f.prompt, *f.rephrase_prompts()}
    cases = []
    for f in applied:
        probes = [(p, e) for p, e in f.locality if p not in scope]
        cases.append(ev.EditEvalCase(f, f.rephrase_prompts(), probes))
    return cases


def _l1(model: lm.MicroLM, base: lm.MicroLM, layers: Iterable[int]) -> tuple[float, float]:
    now = np.concatenate([model.W_proj(l).ravel() for l in layers])
    ref = np.concatenate([base.W_proj(l).ravel() for l in layers])
    return ev.l1_deviation(now, ref)


def run_sequential(
    config: ExperimentConfig,
    model: lm.MicroLM | None = None,
    facts: Sequence[ec.FactEdit] | None = None,
    covariance: dict | None = None,
) -> SequentialReport:
    """Apply ``config.n_edits`` edits in order, scoring every checkpoint.

    At each checkpoint all edits applied so far are re-tested; locality uses
    the applied edits' probes minus anything in their edit scope, compared
    against the unedited model. Step 0 scores the unedited model on the whole
    planned edit set. ``model`` (edited in place) and ``facts`` override the
    config; ``covariance`` is an optional shared per-layer cache.
    """
    tok = tw.tokenizer(model.config.vocab_size if model is not None else config.model.get("vocab_size", 256))
    corpus = tw.corpus_tokens(tok, tw.world_facts(config.world_seed), seed=config.world_seed)
    if model is None:
        config.check_paths()
        model = prepare_model(config, tok, corpus)
    if facts is None:
        facts = load_facts(config.dataset)
    facts = list(facts)
    if config.order_seed is not None:
        order = np.random.default_rng(config.order_seed).permutation(len(facts))
        facts = [facts[i] for i in order]
    if len(facts) < config.n_edits:
        raise ConfigError(f"dataset has {len(facts)} facts, n_edits is {config.n_edits}")
    plan = facts[: config.n_edits]
    params = config.edit_params()
    layers = sorted(params.layers) if config.method.startswith("MEMIT") else [params.layer]

    base = model.copy()
    editor = ec.Editor(model, tok, corpus, params)
    if covariance is not None:
        editor._cov = covariance
    after, before = ev.LMPredictor(model, tok), ev.LMPredictor(base, tok)
    cache = ev.PredictionCache.build(before, [p for f in plan for p, _ in f.locality])
    report = SequentialReport(config.to_dict(), started=time.strftime("%Y-%m-%dT%H:%M:%S"))

    def score(step: int, ms: float) -> None:
        cases = _cases(plan if step == 0 else plan[:step])
        rel = ev.reliability(after, cases)
        gen = ev.generalization(after, cases) if all(c.rephrases for c in cases) else 0.0
        has_probes = any(c.locality_probes for c in cases)
        loc = ev.locality(after, before, cases, cache) if has_probes else 1.0
        a, r = _l1(model, base, layers)
        report.rows.append(MetricsRow(step, rel, gen, loc, a, r, ms))

    marks = set(checkpoint_steps(config.n_edits, config.eval_every))
    score(0, 0.0)
    window: list[float] = []
    for i, fact in enumerate(plan, start=1):
        try:
            out = editor.apply(fact, config.method)
        except Exception as exc:  # truncate the report at the failing step, keep what we have
            report.error = {"step": i, "fact_id": fact.id, "type": type(exc).__name__, "message": str(exc)}
            break
        report.outcomes.append(out.to_dict())
        window.append(out.wall_ms)
        if i in marks:
            score(i, float(np.mean(window)))
            window = []
    if config.drift_prompts and report.error is None:
        prompts = drift_prompts(tok, tw_facts(tok, config.world_seed), config.drift_prompts)
        if len(prompts) >= 10:
            d = ev.fact_drift_pca(model, base, prompts, layers[0])
            report.drift.append({"step": len(report.outcomes), **d.to_dict()})
    return report


def tw_facts(tok: lm.Tokenizer, seed: int) -> list[ec.FactEdit]:
    """The toy world's true facts as edit records (prompt, rephrases), for drift probes."""
    out = []
    for i, f in enumerate(tw.world_facts(seed)):
        phr = tw.RELATIONS[f.relation]
        out.append(ec.FactEdit(f"world-{i:03d}", f.subject, "{} " + phr[0], f.obj, ["{} " + p for p in phr[1:]]))
    return out


# reports ---------------------------------------------------------------------------


def emit_report(report: SequentialReport, out_dir, formats: Iterable[str] = ("table", "record", "plot")) -> list[Path]:
    """Write the metrics table (CSV), the full record (JSON) and SVG plots."""
    out_dir = Path(out_dir)
    formats = set(formats)
    bad = formats - {"table", "record", "plot"}
    if bad:
        raise ValueError(f"unknown report formats {sorted(bad)}")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = []
    try:
        if "table" in formats:
            path = out_dir / "metrics.csv"
            with open(path, "w", newline="") as fh:
                fh.write(f"# format: {TABLE_FORMAT}\n")
                w = csv.writer(fh)
                w.writerow(TABLE_COLUMNS)
                for r in report.rows:
                    w.writerow([repr(getattr(r, c)) for c in TABLE_COLUMNS])
            written.append(path)
        if "record" in formats:
            path = out_dir / "report.json"
            path.write_text(json.dumps(report.to_dict(), indent=1))
            written.append(path)
        if "plot" in formats:
            written += _plots(report, out_dir)
    except OSError as exc:
        raise OSError(f"writing report to {out_dir} failed: {exc}") from exc
    return written


def read_table(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [
        MetricsRow(int(r["step"]), *(float(r[c]) for c in TABLE_COLUMNS[1:]))
        for r in rows
    ]


def load_report(path) -> SequentialReport:
    return SequentialReport.from_dict(json.loads(Path(path).read_text()))


def _plots(report: SequentialReport, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    meta = {"Title": "eaclab report", "Description": PLOT_FORMAT}
    written = []
    steps = [r.step for r in report.rows]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in ("reliability", "generalization", "locality"):
        ax.plot(steps, [getattr(r, name) for r in report.rows], marker="o", label=name)
    ax.set_xlabel("edits")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    ax2.plot(steps, [r.l1_dev_rel for r in report.rows], marker="o", color="k")
    ax2.set_xlabel("edits")
    ax2.set_ylabel("relative L1 change")
    fig.suptitle(report.config.get("method", ""))
    fig.tight_layout()
    path = out_dir / "metrics.svg"
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)
    written.append(path)
    for d in report.drift:
        proj = np.array(d["projections"]).reshape(-1, 2)
        labels = np.array(d["labels"])
        fig, ax = plt.subplots(figsize=(4, 4))
        for lab, name in ((0, "edited"), (1, "original")):
            sel = labels == lab
            ax.scatter(proj[sel, 0], proj[sel, 1], s=8, label=name)
        ax.set_title(f"step {d['step']}: separation {d['accuracy']:.2f}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"drift_step{d['step']}.svg"
        fig.savefig(path, format="svg", metadata=meta)
        plt.close(fig)
        written.append(path)
    return written
