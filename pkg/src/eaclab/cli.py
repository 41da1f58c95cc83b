"""Command-line entry point: ``eaclab {train-toy,edit,run,drift,ablate}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import bench
from . import editcore as ec
from . import evalkit as ev
from . import microlm as lm
from . import toyworld as tw
from .eac import STRATEGIES


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eaclab", description="Sequential knowledge-editing lab on a toy transformer.")
    sub = ap.add_subparsers(dest="cmd", metavar="COMMAND")

    p = sub.add_parser("train-toy", help="train the toy model on the synthetic fact world and save it")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0, help="weight-init seed")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-mlp", type=int, default=256)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)

    p = sub.add_parser("edit", help="apply one edit and print its outcome")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--facts", help="fact file (default: bundled toy set)")
    p.add_argument("--fact-id", required=True)
    p.add_argument("--method", default="ROME-EAC", choices=ec.METHODS)
    p.add_argument("--layer", type=int)
    p.add_argument("--percentile", type=float)
    p.add_argument("--save", help="write the edited checkpoint here")

    p = sub.add_parser("run", help="run a sequential-editing experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", help="overrides the config (and the environment variable)")

    p = sub.add_parser("drift", help="PCA fact drift between two checkpoints")
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--prompts", type=int, default=100)
    p.add_argument("--fit", choices=("pooled", "a"), default="pooled")
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--out", help="write the drift record (JSON) here")

    p = sub.add_parser("ablate", help="anchor-strategy sweep, one sequential run per strategy")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--strategies", default=",".join(STRATEGIES))
    return ap


def _out_dir(cfg: bench.ExperimentConfig, flag: str | None) -> Path:
    return Path(flag) if flag else cfg.resolved_output_dir()


def _train(a) -> int:
    tok = tw.tokenizer()
    facts = tw.world_facts(a.world_seed)
    corpus = tw.corpus_tokens(tok, facts, seed=a.world_seed)
    cfg = lm.LmConfig(d_model=a.d_model, d_mlp=a.d_mlp, n_layers=a.layers, n_heads=a.heads, rng_seed=a.seed)
    model = lm.init_model(cfg)
    losses = lm.train_toy(model, corpus, a.steps)
    prompts = [tok.encode(f.prompt(0)) for f in facts]
    pred = lm.predict_next(model, prompts)
    recall = sum(int(p) == tok.id(f.obj) for p, f in zip(pred, facts)) / len(facts)
    lm.save_checkpoint(model, a.out)
    print(json.dumps({"checkpoint": a.out, "final_loss": losses[-1], "recall": recall}))
    return 0


def _edit(a) -> int:
    model = lm.load_checkpoint(a.checkpoint)
    facts = {f.id: f for f in bench.load_facts(a.facts)}
    if a.fact_id not in facts:
        raise KeyError(f"no fact with id {a.fact_id!r}")
    tok = tw.tokenizer(model.config.vocab_size)
    corpus = tw.corpus_tokens(tok, tw.world_facts(0))
    p = ec.EditParams()
    if a.layer is not None:
        p = p.replace(layer=a.layer)
    if a.percentile is not None:
        p = p.replace(eac=dataclasses.replace(p.eac, percentile=a.percentile))
    out = ec.Editor(model, tok, corpus, p).apply(facts[a.fact_id], a.method)
    print(json.dumps(out.to_dict(), indent=1))
    if a.save:
        lm.save_checkpoint(model, a.save)
    return 0


def _run(a) -> int:
    cfg = bench.ExperimentConfig.load(a.config)
    report = bench.run_sequential(cfg)
    files = bench.emit_report(report, _out_dir(cfg, a.output_dir), cfg.formats)
    last = report.final()
    print(f"step {last.step}: reliability {last.reliability:.3f} generalization {last.generalization:.3f} "
          f"locality {last.locality:.3f} l1 {last.l1_dev_abs:.1f}")
    for f in files:
        print(f)
    if report.error:
        print(f"edit failed at step {report.error['step']}: {report.error['message']}", file=sys.stderr)
        return 1
    return 0


def _drift(a) -> int:
    ma, mb = lm.load_checkpoint(a.checkpoint_a), lm.load_checkpoint(a.checkpoint_b)
    if ma.config != mb.config:
        raise ValueError("checkpoints have different model configs")
    tok = tw.tokenizer(ma.config.vocab_size)
    prompts = bench.drift_prompts(tok, bench.tw_facts(tok, a.world_seed), a.prompts)
    rep = ev.fact_drift_pca(ma, mb, prompts, a.layer, a.fit)
    if a.out:
        rep.save(a.out)
    print(json.dumps({"layer": rep.layer, "accuracy": rep.accuracy, "degenerate": rep.degenerate,
                      "explained_variance": rep.explained_variance.tolist()}))
    return 0


def _ablate(a) -> int:
    cfg = bench.ExperimentConfig.load(a.config)
    root = _out_dir(cfg, a.output_dir)
    strategies = [s for s in a.strategies.split(",") if s]
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}")
    status = 0
    for s in strategies:
        c = dataclasses.replace(cfg, eac={**cfg.eac, "strategy": s})
        report = bench.run_sequential(c)
        bench.emit_report(report, root / s, cfg.formats)
        print(f"{s}: reliability {report.final().reliability:.3f} (step {report.final().step})")
        status |= report.error is not None
    return int(status)


_HANDLERS = {"train-toy": _train, "edit": _edit, "run": _run, "drift": _drift, "ablate": _ablate}


def cli_main(argv=None) -> int:
    ap = _parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if a.cmd is None:
        ap.print_usage(sys.stderr)
        return 2
    try:
        return _HANDLERS[a.cmd](a)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"eaclab {a.cmd}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
