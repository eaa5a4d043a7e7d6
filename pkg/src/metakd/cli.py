"""Command line entry point: ``meta-kd {gen-data,train-teacher,distill,run,report}``.

Every subcommand returns 0 on success and 1 if any part of the work failed.
Worker parallelism for ``run`` is bounded by the MKD_THREADS environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data as D
from .distill import DistillPlan, dataset_expertise_weights, distill, mtn_kd_distill
from .encoder import Encoder, EncoderConfig
from .harness import PROTOCOLS, Experiment, ExperimentConfig, HarnessError, RecordStore, derive_seed, emit_report, run
from .teacher import PrototypeTable, accuracy

log = logging.getLogger("metakd")


def sidecar(checkpoint) -> Path:
    """Prototype-table JSON that travels next to a teacher checkpoint."""
    p = Path(checkpoint)
    return p.with_name(p.name + ".prototypes.json")


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


# ------------------------------------------------------------------ commands
def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    spec = replace(cfg.synth, **({"seed": args.seed} if args.seed is not None else {}))
    if args.domains:
        spec = replace(spec, num_domains=args.domains)
    out = D.write_corpus_dir(D.synth_multidomain(spec), args.out, spec)
    print(f"wrote {spec.num_domains} domains to {out}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    exp = Experiment(cfg)
    if args.domains:
        domains = tuple(args.domains.split(","))
    elif args.mode == "single":
        raise ValueError("--mode single needs --domains <name>")
    else:
        domains = tuple(exp.roster)
    if args.mode == "single" and len(domains) != 1:
        raise ValueError("--mode single trains on exactly one domain")
    kind = {"meta": "meta", "single": "single", "mix": "mix"}[args.mode]
    model, table = exp.teacher(kind, domains, args.seed)
    tokens = sorted(exp.vocab.token_to_id, key=exp.vocab.token_to_id.get)
    model.save(args.out, {"kind": kind, "domains": list(domains), "roster": exp.roster, "vocab": tokens,
                          "max_seq_len": cfg.max_seq_len, "seed": args.seed, "config_hash": exp.hash})
    if table is not None:
        table.save(sidecar(args.out))
    with D.unguarded():
        for d in domains:
            print(f"{d}\ttest accuracy {accuracy(model, exp.test_set(d)):.4f}")
    return 0


def _load_teacher(path) -> tuple[Encoder, dict]:
    model, meta = Encoder.load(path)
    if "vocab" not in meta or "roster" not in meta:
        raise ValueError(f"{path} is not a teacher checkpoint written by train-teacher")
    return model.eval(), meta


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    teacher, meta = _load_teacher(args.teacher)
    ensemble = [_load_teacher(p)[0] for p in args.teachers.split(",")] if args.teachers else None
    vocab = D.Vocab({tok: i for i, tok in enumerate(meta["vocab"])})
    roster = meta["roster"]
    if args.domain not in roster:
        raise ValueError(f"domain {args.domain!r} not in the teacher roster {roster}")
    corpora = {c.name: c for c in (D.read_corpus_dir(cfg.corpus_dir) if cfg.corpus_dir
                                   else D.synth_multidomain(cfg.synth))}
    corpus = corpora[args.domain]
    index = {d: i for i, d in enumerate(roster)}
    student = Encoder(EncoderConfig(vocab_size=len(vocab), max_seq_len=meta["max_seq_len"],
                                    num_classes=teacher.config.num_classes, num_domains=len(roster),
                                    dtype=cfg.dtype, **cfg.student_model),
                      seed=derive_seed(args.seed, "student", args.domain))
    plan = (DistillPlan.load(args.plan) if args.plan
            else DistillPlan.for_models(teacher, student, gamma2=cfg.gamma2, temperature=cfg.temperature))
    dcfg = replace(cfg.distill, seed=derive_seed(args.seed, "distill", args.domain))
    with D.guard(forbid_splits=("test",)):
        train = D.Dataset(corpus.get("train"), vocab, index, meta["max_seq_len"])
        dev = D.Dataset(corpus.get("dev"), vocab, index, meta["max_seq_len"])
        if ensemble:
            result = mtn_kd_distill(ensemble, teacher, student, train, plan, dcfg, dev)
        else:
            weights = None
            if plan.use_expertise:
                table = PrototypeTable.load(sidecar(args.teacher)) if sidecar(args.teacher).exists() else None
                weights = dataset_expertise_weights(teacher, train, table, plan.err_mode)
            result = distill(teacher, student, train, plan, dcfg, weights, dev)
    result.student.save(args.out, {"kind": "student", "teacher": str(args.teacher), "domain": args.domain,
                                   "roster": roster, "vocab": meta["vocab"], "max_seq_len": meta["max_seq_len"],
                                   "plan": plan.to_json(), "seed": args.seed})
    test = D.Dataset(corpus.get("test"), vocab, index, meta["max_seq_len"])
    print(f"{args.domain}\tstudent test accuracy {accuracy(result.student, test):.4f}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    cfg = replace(cfg, protocol=args.protocol, **({"seeds": args.seeds} if args.seeds else {}))
    ExperimentConfig.from_dict(cfg.to_dict())          # re-validate after overrides
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    try:
        store = run(cfg)
    except HarnessError as e:
        log.error("%s", e)
        if e.records:
            emit_report(e.records, out)
        return 1
    for path in emit_report(store, out):
        print(path)
    return 0


def cmd_report(args) -> int:
    store = RecordStore.from_csv(Path(args.records_dir) / "records.csv")
    for path in emit_report(store, args.out or args.records_dir):
        print(path)
    return 0


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meta-kd", description="Meta-knowledge distillation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multi-domain corpus directory")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="experiment config JSON; its synth block is used")
    g.add_argument("--seed", type=int)
    g.add_argument("--domains", type=int, help="number of domains")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="train a meta, single-domain or mixed-domain teacher")
    t.add_argument("--mode", choices=("meta", "single", "mix"), required=True)
    t.add_argument("--config")
    t.add_argument("--domains", help="comma-separated domain names (default: whole roster)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path; prototype table goes next to it")
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="distill a student for one domain")
    d.add_argument("--teacher", required=True, help="teacher checkpoint (in-domain teacher for MTN-KD)")
    d.add_argument("--teachers", help="comma-separated checkpoints; selects MTN-KD")
    d.add_argument("--domain", required=True)
    d.add_argument("--plan", help="plan JSON (default: uniform layer map, config gamma2)")
    d.add_argument("--config")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    r = sub.add_parser("run", help="run a whole protocol and write records plus a report")
    r.add_argument("--protocol", choices=PROTOCOLS, required=True)
    r.add_argument("--config")
    r.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")])
    r.add_argument("--out", default="results")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="rebuild the report from a records directory")
    rep.add_argument("records_dir")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as e:
        print(f"meta-kd: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
