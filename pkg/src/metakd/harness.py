"""Experiment protocols at desk scale: main comparison, few-shot, zero-shot, gamma2 sweep.

Every protocol emits :class:`ResultRecord` rows into an append-only
:class:`RecordStore`. Training happens inside a data guard that forbids test
reads (and, for zero-shot runs, label reads of the held-out domain); test
accuracy is measured only after the guarded block closes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import data as D
from .distill import (DistillConfig, DistillPlan, dataset_expertise_weights, distill, map_layers,
                      mtn_kd_distill, softened)
from .encoder import Encoder, EncoderConfig
from .teacher import (PrototypeTable, TeacherConfig, accuracy, predict_logits, train_baseline_teacher,
                      train_meta_teacher)

log = logging.getLogger(__name__)

PROTOCOLS = ("main", "fewshot", "zeroshot", "ablation-g2")

# condition labels; one per row of the comparison tables
T_SINGLE = "teacher-single"
T_MIX = "teacher-mix"
T_META = "meta-teacher"
T_MULTI = "multi-teachers"
S_SINGLE = "teacher-single->TinyBERT-KD"
S_MIX = "teacher-mix->TinyBERT-KD"
S_MULTI = "multi-teachers->MTN-KD"
S_META_KD = "meta-teacher->TinyBERT-KD"
S_META = "meta-teacher->meta-distillation"
MAIN_CONDITIONS = (T_SINGLE, T_MIX, T_META, T_MULTI, S_SINGLE, S_MIX, S_MULTI, S_META_KD, S_META)


class HarnessError(RuntimeError):
    def __init__(self, message: str, records: list["ResultRecord"]):
        super().__init__(message)
        self.records = records


# ----------------------------------------------------------------------- config
@dataclass
class ExperimentConfig:
    protocol: str = "main"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    synth: D.SynthSpec = field(default_factory=D.SynthSpec)
    corpus_dir: str | None = None
    domains: list[str] | None = None
    teacher_model: dict = field(default_factory=lambda: {"num_layers": 4, "hidden_dim": 64, "num_heads": 4,
                                                         "ffn_dim": 128})
    student_model: dict = field(default_factory=lambda: {"num_layers": 2, "hidden_dim": 32, "num_heads": 4,
                                                         "ffn_dim": 64})
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    temperature: float = 1.0
    gamma2: float = 0.3
    err_mode: str = "indicator"          # or "squared"
    rates: list[float] = field(default_factory=lambda: [0.05, 0.5])
    fewshot_teacher_data: str = "full"   # "full" | "subsample-in-domain"
    held_out: str | None = None
    zeroshot_gold_labels: bool = False
    gamma2_grid: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    vocab_budget: int = 10000
    max_seq_len: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.protocol == "fewshot" and (not self.rates or any(not 0 < r <= 1 for r in self.rates)):
            raise ValueError("few-shot rates must lie in (0, 1]")
        if self.protocol == "ablation-g2" and not self.gamma2_grid:
            raise ValueError("gamma2 grid must be non-empty")
        if self.err_mode not in ("indicator", "squared"):
            raise ValueError(f"unknown err_mode {self.err_mode!r}")
        if self.fewshot_teacher_data not in ("full", "subsample-in-domain"):
            raise ValueError(f"unknown fewshot_teacher_data {self.fewshot_teacher_data!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"]["length"] = list(d["synth"]["length"])
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        if "synth" in obj:
            s = dict(obj["synth"])
            if "length" in s:
                s["length"] = tuple(s["length"])
            obj["synth"] = D.SynthSpec(**s)
        if "teacher" in obj:
            obj["teacher"] = TeacherConfig(**obj["teacher"])
        if "distill" in obj:
            obj["distill"] = DistillConfig(**obj["distill"])
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        """Hash of everything except the protocol and the seed roster."""
        d = self.to_dict()
        d.pop("seeds")
        d.pop("protocol")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------- records
@dataclass
class ResultRecord:
    protocol: str
    condition: str
    domain: str
    seed: int
    metric: float
    wall_time: float
    config_hash: str
    rate: float | None = None
    gamma2: float | None = None

    def key(self) -> tuple:
        return (self.protocol, self.condition, self.domain, self.seed, self.rate, self.gamma2)


class RecordStore:
    """Append-only; a second record under an existing key is an error."""

    def __init__(self, records: Iterable[ResultRecord] = ()):
        self.records: list[ResultRecord] = []
        self._keys: set[tuple] = set()
        for r in records:
            self.add(r)

    def add(self, record: ResultRecord) -> None:
        if not 0.0 <= record.metric <= 1.0:
            raise ValueError(f"accuracy {record.metric} outside [0, 1]")
        k = record.key()
        if k in self._keys:
            raise KeyError(f"duplicate record {k}")
        self._keys.add(k)
        self.records.append(record)

    def extend(self, records: Iterable[ResultRecord]) -> None:
        for r in records:
            self.add(r)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def select(self, **match) -> list[ResultRecord]:
        return [r for r in self.records if all(getattr(r, k) == v for k, v in match.items())]

    def to_csv(self, path) -> None:
        names = [f.name for f in fields(ResultRecord)]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for r in self.records:
                w.writerow(asdict(r))

    @classmethod
    def from_csv(cls, path) -> "RecordStore":
        out = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(ResultRecord(
                    protocol=row["protocol"], condition=row["condition"], domain=row["domain"],
                    seed=int(row["seed"]), metric=float(row["metric"]), wall_time=float(row["wall_time"]),
                    config_hash=row["config_hash"],
                    rate=float(row["rate"]) if row["rate"] else None,
                    gamma2=float(row["gamma2"]) if row["gamma2"] else None))
        return cls(out)


def derive_seed(seed: int, *parts) -> int:
    tag = zlib.crc32("/".join(map(str, parts)).encode())
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


# ------------------------------------------------------------------- experiment
class Experiment:
    """Holds corpora, vocabulary and a per-seed teacher cache shared by all protocols."""

    def __init__(self, config: ExperimentConfig, corpora: list[D.DomainCorpus] | None = None):
        self.config = config
        if corpora is None:
            corpora = (D.read_corpus_dir(config.corpus_dir) if config.corpus_dir
                       else D.synth_multidomain(config.synth))
        roster = config.domains or [c.name for c in corpora]
        by_name = {c.name: c for c in corpora}
        missing = [d for d in roster if d not in by_name]
        if missing:
            raise ValueError(f"domains not in corpus: {missing}")
        self.corpora = {d: by_name[d] for d in roster}
        self.roster = list(roster)
        self.domain_index = {d: i for i, d in enumerate(self.roster)}
        texts = [ex.text for c in self.corpora.values() for ex in c.get("train", labels=False)]
        self.vocab = D.Vocab.build(texts, config.vocab_budget)
        classes = {tuple(c.classes()) for c in self.corpora.values()}
        if len(classes) != 1:
            raise ValueError("every domain must share the same label set")
        self.num_classes = len(classes.pop())
        self.hash = config.config_hash()
        self._teachers: dict[tuple, tuple[dict, PrototypeTable | None]] = {}
        self._test: dict[str, D.Dataset] = {}

    # ------------------------------------------------------------ plumbing
    def encoder_config(self, which: str) -> EncoderConfig:
        spec = self.config.teacher_model if which == "teacher" else self.config.student_model
        return EncoderConfig(vocab_size=len(self.vocab), max_seq_len=self.config.max_seq_len,
                             num_classes=self.num_classes, num_domains=len(self.roster),
                             dtype=self.config.dtype, **spec)

    def dataset(self, domains, split: str, labels: bool = True, corpora=None) -> D.Dataset:
        corpora = corpora or self.corpora
        examples = [ex for d in domains for ex in corpora[d].get(split, labels=labels)]
        return D.Dataset(examples, self.vocab, self.domain_index, self.config.max_seq_len)

    def test_set(self, domain: str) -> D.Dataset:
        if domain not in self._test:
            self._test[domain] = self.dataset([domain], "test")
        return self._test[domain]

    def training_guard(self, hide_labels_of: str | None = None):
        labels = [(hide_labels_of, "train"), (hide_labels_of, "dev")] if hide_labels_of else []
        return D.guard(forbid_splits=("test",), forbid_labels=labels)

    def record(self, protocol, condition, domain, seed, metric, started, **extra) -> ResultRecord:
        return ResultRecord(protocol, condition, domain, seed, float(metric), time.perf_counter() - started,
                            self.hash, **extra)

    # ------------------------------------------------------------ teachers
    def teacher(self, kind: str, domains: tuple[str, ...], seed: int, corpora=None,
                tag: str = "") -> tuple[Encoder, PrototypeTable | None]:
        """Train (or fetch from cache) a single/mix/meta teacher on ``domains``."""
        key = (kind, domains, seed, tag)
        if key not in self._teachers:
            cfg = replace(self.config.teacher, seed=derive_seed(seed, "teacher", kind, *domains, tag))
            with self.training_guard():
                train = self.dataset(domains, "train", corpora=corpora)
                dev = {d: self.dataset([d], "dev") for d in domains}
                if kind == "meta":
                    res = train_meta_teacher(train, self.encoder_config("teacher"), cfg, dev,
                                             source=f"meta:{'+'.join(domains)}:{seed}")
                else:
                    res = train_baseline_teacher(train, self.encoder_config("teacher"), cfg, dev)
            self._teachers[key] = (res.model.state_dict(), res.table)
        state, table = self._teachers[key]
        model = Encoder(self.encoder_config("teacher"))
        model.load_state_dict(state)
        model.eval()
        return model, table

    def student_init(self, seed: int, domain: str) -> Encoder:
        return Encoder(self.encoder_config("student"), seed=derive_seed(seed, "student", domain))

    def plan(self, teacher: Encoder, student: Encoder, meta: bool, gamma2: float | None = None) -> DistillPlan:
        return DistillPlan(map_layers(teacher.config.num_layers, student.config.num_layers),
                           temperature=self.config.temperature,
                           gamma2=(self.config.gamma2 if gamma2 is None else gamma2) if meta else 0.0,
                           use_transfer=meta, use_expertise=meta, err_mode=self.config.err_mode)

    def distill_student(self, teacher, table, domain, seed, train, meta: bool, dev=None,
                        gamma2: float | None = None, ensemble=None) -> Encoder:
        student = self.student_init(seed, domain)
        plan = self.plan(teacher, student, meta, gamma2)
        cfg = replace(self.config.distill, seed=derive_seed(seed, "distill", domain))
        if ensemble is not None:
            return mtn_kd_distill(ensemble, teacher, student, train, plan, cfg, dev).student
        weights = dataset_expertise_weights(teacher, train, table, plan.err_mode) if meta else None
        return distill(teacher, student, train, plan, cfg, weights, dev).student

    # ------------------------------------------------------------ protocols
    def run_main(self, seed: int) -> list[ResultRecord]:
        P, out = "main", []
        started = time.perf_counter()
        singles = {d: self.teacher("single", (d,), seed)[0] for d in self.roster}
        mix, _ = self.teacher("mix", tuple(self.roster), seed)
        meta, table = self.teacher("meta", tuple(self.roster), seed)
        for d in self.roster:
            test = self.test_set(d)
            out.append(self.record(P, T_SINGLE, d, seed, accuracy(singles[d], test), started))
            out.append(self.record(P, T_MIX, d, seed, accuracy(mix, test), started))
            out.append(self.record(P, T_META, d, seed, accuracy(meta, test), started))
            probs = np.mean([softened(predict_logits(t, test), 1.0) for t in singles.values()], axis=0)
            out.append(self.record(P, T_MULTI, d, seed, float((probs.argmax(-1) == test.labels).mean()), started))
        for d in self.roster:
            conditions = [(S_SINGLE, singles[d], None, False, None), (S_MIX, mix, None, False, None),
                          (S_MULTI, singles[d], None, False, list(singles.values())),
                          (S_META_KD, meta, table, False, None), (S_META, meta, table, True, None)]
            for label, teacher, tab, is_meta, ensemble in conditions:
                t0 = time.perf_counter()
                with self.training_guard():
                    train = self.dataset([d], "train")
                    dev = self.dataset([d], "dev")
                    student = self.distill_student(teacher, tab, d, seed, train, is_meta, dev, ensemble=ensemble)
                out.append(self.record(P, label, d, seed, accuracy(student, self.test_set(d)), t0))
        return out

    def run_fewshot(self, seed: int) -> list[ResultRecord]:
        P, out = "fewshot", []
        meta, table = self.teacher("meta", tuple(self.roster), seed)
        for rate in self.config.rates:
            try:
                subs = {d: D.subsample(self.corpora[d], rate, derive_seed(seed, "subsample", d, rate))
                        for d in self.roster}
            except D.DataError as e:
                log.warning("skipping rate %s for seed %s: %s", rate, seed, e)
                continue
            for d in self.roster:
                t0 = time.perf_counter()
                with self.training_guard():
                    sub = subs[d]
                    corpora = {**self.corpora, d: sub}
                    if self.config.fewshot_teacher_data == "subsample-in-domain" and rate < 1.0:
                        single, _ = self.teacher("single", (d,), seed, corpora=corpora, tag=f"rate={rate}")
                    else:
                        single, _ = self.teacher("single", (d,), seed)
                    train = self.dataset([d], "train", corpora=corpora)
                    dev = self.dataset([d], "dev")
                    a = self.distill_student(single, None, d, seed, train, False, dev)
                    b = self.distill_student(meta, table, d, seed, train, True, dev)
                test = self.test_set(d)
                out.append(self.record(P, "fewshot:" + S_SINGLE, d, seed, accuracy(a, test), t0, rate=rate))
                out.append(self.record(P, "fewshot:" + S_META, d, seed, accuracy(b, test), t0, rate=rate))
        return out

    def run_zeroshot(self, seed: int) -> list[ResultRecord]:
        P, out = "zeroshot", []
        if len(self.roster) < 3:
            raise ValueError("zero-shot needs at least three domains")
        h = self.config.held_out or self.roster[0]
        seen = tuple(d for d in self.roster if d != h)
        hide = None if self.config.zeroshot_gold_labels else h
        t0 = time.perf_counter()
        meta, table = self.teacher("meta", seen, seed)
        singles = {d: self.teacher("single", (d,), seed)[0] for d in seen}
        skyline, _ = self.teacher("single", (h,), seed)
        test = self.test_set(h)
        out.append(self.record(P, f"meta-teacher(w/o {h})", h, seed, accuracy(meta, test), t0))
        out.append(self.record(P, f"teacher-single({h})", h, seed, accuracy(skyline, test), t0))
        for d, teacher in singles.items():
            out.append(self.record(P, f"teacher-single({d})", h, seed, accuracy(teacher, test), t0))
        for d, teacher in singles.items():
            t0 = time.perf_counter()
            with self.training_guard(hide_labels_of=hide):
                train = self.dataset([h], "train", labels=not hide)
                student = self.distill_student(teacher, None, h, seed, train, False)
            out.append(self.record(P, f"teacher-single({d})->TinyBERT-KD", h, seed, accuracy(student, test), t0))
        t0 = time.perf_counter()
        with self.training_guard(hide_labels_of=hide):
            train = self.dataset([h], "train", labels=not hide)
            student = self.distill_student(meta, table, h, seed, train, True)
        out.append(self.record(P, f"meta-teacher(w/o {h})->meta-distillation", h, seed,
                               accuracy(student, test), t0))
        t0 = time.perf_counter()
        with self.training_guard():
            train = self.dataset([h], "train")
            student = self.distill_student(skyline, None, h, seed, train, False)
        out.append(self.record(P, f"teacher-single({h})->TinyBERT-KD", h, seed, accuracy(student, test), t0))
        return out

    def run_ablation_gamma2(self, seed: int) -> list[ResultRecord]:
        P, out = "ablation-g2", []
        meta, table = self.teacher("meta", tuple(self.roster), seed)
        for g in self.config.gamma2_grid:
            for d in self.roster:
                t0 = time.perf_counter()
                with self.training_guard():
                    train = self.dataset([d], "train")
                    dev = self.dataset([d], "dev")
                    student = self.distill_student(meta, table, d, seed, train, True, dev, gamma2=g)
                out.append(self.record(P, S_META, d, seed, accuracy(student, self.test_set(d)), t0, gamma2=g))
        return out

    def run_seed(self, protocol: str, seed: int) -> list[ResultRecord]:
        runner = {"main": self.run_main, "fewshot": self.run_fewshot, "zeroshot": self.run_zeroshot,
                  "ablation-g2": self.run_ablation_gamma2}[protocol]
        return runner(seed)


def _seed_worker(config_dict: dict, protocol: str, seed: int) -> list[dict]:
    exp = Experiment(ExperimentConfig.from_dict(config_dict))
    return [asdict(r) for r in exp.run_seed(protocol, seed)]


def run(config: ExperimentConfig, store: RecordStore | None = None,
        experiment: Experiment | None = None, workers: int | None = None) -> RecordStore:
    """Run ``config.protocol`` for every seed; partial results survive a failure."""
    store = store if store is not None else RecordStore()
    workers = workers or int(os.environ.get("MKD_THREADS", "1"))
    try:
        if workers > 1 and len(config.seeds) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_seed_worker, config.to_dict(), config.protocol, s) for s in config.seeds]
                for f in futures:
                    store.extend(ResultRecord(**r) for r in f.result())
        else:
            exp = experiment or Experiment(config)
            for s in config.seeds:
                store.extend(exp.run_seed(config.protocol, s))
    except Exception as e:
        raise HarnessError(f"{config.protocol} run failed: {e}", list(store)) from e
    return store


def run_main(config: ExperimentConfig, **kw) -> RecordStore:
    return run(replace(config, protocol="main"), **kw)


def run_fewshot(config: ExperimentConfig, **kw) -> RecordStore:
    return run(replace(config, protocol="fewshot"), **kw)


def run_zeroshot(config: ExperimentConfig, held_out: str | None = None, **kw) -> RecordStore:
    return run(replace(config, protocol="zeroshot", held_out=held_out or config.held_out), **kw)


def run_ablation_gamma2(config: ExperimentConfig, grid=None, **kw) -> RecordStore:
    return run(replace(config, protocol="ablation-g2", gamma2_grid=list(grid or config.gamma2_grid)), **kw)


# ------------------------------------------------------------------ summaries
def mean_by_seed(records: Iterable[ResultRecord], condition: str) -> dict[int, float]:
    """Average accuracy over domains for each seed."""
    acc: dict[int, list[float]] = {}
    for r in records:
        if r.condition == condition:
            acc.setdefault(r.seed, []).append(r.metric)
    return {s: float(np.mean(v)) for s, v in sorted(acc.items())}


def improvement_curve(records: Iterable[ResultRecord]) -> list[dict]:
    """Per (rate, domain, seed): meta vs in-domain student accuracy and relative improvement."""
    rows: dict[tuple, dict] = {}
    for r in records:
        if r.protocol != "fewshot":
            continue
        row = rows.setdefault((r.rate, r.domain, r.seed), {"rate": r.rate, "domain": r.domain, "seed": r.seed})
        row["single" if r.condition.endswith(S_SINGLE) else "meta"] = r.metric
    out = []
    for key in sorted(rows):
        row = rows[key]
        if "single" in row and "meta" in row:
            row["improvement"] = (row["meta"] - row["single"]) / row["single"]
            out.append(row)
    return out


def mean_improvement(records: Iterable[ResultRecord]) -> dict[float, float]:
    by_rate: dict[float, list[float]] = {}
    for row in improvement_curve(records):
        by_rate.setdefault(row["rate"], []).append(row["improvement"])
    return {r: float(np.mean(v)) for r, v in sorted(by_rate.items())}


# --------------------------------------------------------------------- report
def _row_label(r: ResultRecord) -> str:
    if r.rate is not None:
        return f"{r.condition} @ rate={r.rate:g}"
    if r.gamma2 is not None:
        return f"{r.condition} @ gamma2={r.gamma2:g}"
    return r.condition


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def summary_table(records: list[ResultRecord]) -> tuple[list[str], list[str], dict]:
    """Rows, domain columns and {(row, column): (mean, std, n)}; column "avg" holds per-seed domain means."""
    rows, domains = [], []
    cells: dict[tuple, list[float]] = {}
    per_seed: dict[tuple, dict[int, list[float]]] = {}
    for r in records:
        row = _row_label(r)
        if row not in rows:
            rows.append(row)
        if r.domain not in domains:
            domains.append(r.domain)
        cells.setdefault((row, r.domain), []).append(r.metric)
        per_seed.setdefault(row, {}).setdefault(r.seed, []).append(r.metric)
    out = {k: (*mean_std(v), len(v)) for k, v in cells.items()}
    for row, seeds in per_seed.items():
        avgs = [np.mean(v) for _, v in sorted(seeds.items())]
        out[(row, "avg")] = (*mean_std(avgs), len(avgs))
    return rows, domains, out


def emit_report(records: Iterable[ResultRecord], out_dir) -> list[Path]:
    """Write report.md, records.csv and, when present, fewshot_curve.csv and ablation_g2.csv."""
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "records.csv", out_dir / "report.md"]
    RecordStore(records).to_csv(written[0])

    hashes = sorted({r.config_hash for r in records})
    seeds = sorted({r.seed for r in records})
    lines = ["# Results", "", f"config hash: {', '.join(hashes)}", f"seeds: {seeds}", "",
             "Test accuracy, mean ± sample std over seeds. The avg column averages domains within a seed first.", ""]
    for protocol in [p for p in PROTOCOLS if any(r.protocol == p for r in records)]:
        rows, domains, cells = summary_table([r for r in records if r.protocol == protocol])
        cols = domains + ["avg"]
        lines += [f"## {protocol}", "", "| condition | " + " | ".join(cols) + " |",
                  "|---" * (len(cols) + 1) + "|"]
        for row in rows:
            fmt = [f"{cells[row, c][0]:.4f} ± {cells[row, c][1]:.4f}" if (row, c) in cells else "" for c in cols]
            lines.append(f"| {row} | " + " | ".join(fmt) + " |")
        lines.append("")
    written[1].write_text("\n".join(lines))

    curve = improvement_curve(records)
    if curve:
        path = out_dir / "fewshot_curve.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["rate", "domain", "seed", "single", "meta", "improvement"])
            w.writeheader()
            w.writerows(curve)
        written.append(path)

    ablation = [r for r in records if r.protocol == "ablation-g2"]
    if ablation:
        path = out_dir / "ablation_g2.csv"
        groups: dict[tuple, list[float]] = {}
        for r in ablation:
            groups.setdefault((r.domain, r.gamma2), []).append(r.metric)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["domain", "gamma2", "mean", "std", "n"])
            for (d, g), v in sorted(groups.items()):
                w.writerow([d, g, *mean_std(v), len(v)])
        written.append(path)
    return written
