"""Multi-domain labelled text: files, a synthetic generator, tokenization and batching.

Split access goes through :meth:`DomainCorpus.get`, which records every read and
consults the active :func:`guard` so that training code can be proven never to
touch test splits (or, for zero-shot runs, a held-out domain's labels).
"""
from __future__ import annotations

import contextlib
import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SPLITS = ("train", "dev", "test")
PAD, CLS, SEP, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")


class DataError(ValueError):
    pass


class HygieneError(RuntimeError):
    """Raised when a guarded code path reads a forbidden split or label set."""


@dataclass(frozen=True)
class Example:
    id: str
    text: str
    label: int | None
    domain: str
    text2: str | None = None


# ---------------------------------------------------------------- read guard
_guards: list[dict] = []


@contextlib.contextmanager
def guard(forbid_splits: Sequence[str] = (), forbid_labels: Sequence[tuple[str, str]] = ()):
    """Forbid reads of whole splits, or of labels for (domain, split) pairs."""
    entry = {"splits": set(forbid_splits), "labels": set(forbid_labels)}
    _guards.append(entry)
    try:
        yield
    finally:
        _guards.remove(entry)


@contextlib.contextmanager
def unguarded():
    """Evaluation scope: suspend the guards of enclosing training code."""
    saved = list(_guards)
    _guards.clear()
    try:
        yield
    finally:
        _guards.extend(saved)


@dataclass
class DomainCorpus:
    name: str
    splits: dict[str, list[Example]]
    access_log: list[tuple[str, str, bool]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        for split in SPLITS:
            self.splits.setdefault(split, [])
        seen: dict[str, str] = {}
        for split, examples in self.splits.items():
            for ex in examples:
                if ex.id in seen:
                    raise DataError(f"{self.name}: id {ex.id!r} appears in both {seen[ex.id]} and {split}")
                seen[ex.id] = split

    def get(self, split: str, labels: bool = True) -> list[Example]:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}")
        for g in _guards:
            if split in g["splits"]:
                raise HygieneError(f"read of {self.name}/{split} inside a guarded region")
            if labels and (self.name, split) in g["labels"]:
                raise HygieneError(f"label read of {self.name}/{split} inside a guarded region")
        self.access_log.append((split, "labels" if labels else "inputs", len(_guards) > 0))
        examples = self.splits[split]
        return examples if labels else [replace(ex, label=None) for ex in examples]

    def classes(self) -> list[int]:
        return sorted({ex.label for ex in self.splits["train"]})

    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}


# ------------------------------------------------------------------- file io
COLUMNS = ("id", "text", "text2", "label", "domain")


def _parse_row(row: dict, where: str, num_classes: int | None) -> Example:
    for col in ("id", "text", "label", "domain"):
        if col not in row or row[col] in (None, ""):
            raise DataError(f"{where}: missing column {col!r}")
    try:
        label = int(row["label"])
    except (TypeError, ValueError):
        raise DataError(f"{where}: bad label {row['label']!r}") from None
    if label < 0 or (num_classes is not None and label >= num_classes):
        raise DataError(f"{where}: label {label} out of range")
    text = str(row["text"])
    if not text.strip():
        raise DataError(f"{where}: empty text")
    text2 = row.get("text2") or None
    return Example(id=str(row["id"]), text=text, text2=text2, label=label, domain=str(row["domain"]))


def read_examples(path, fmt: str | None = None, num_classes: int | None = None) -> list[Example]:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    examples = []
    if fmt == "jsonl":
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(f"{path}, line {lineno}: invalid JSON ({e})") from None
                examples.append(_parse_row(row, f"{path}, line {lineno}", num_classes))
    elif fmt == "tsv":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh, delimiter="\t")
            if reader.fieldnames is None or list(reader.fieldnames) != list(COLUMNS):
                raise DataError(f"{path}, line 1: header must be {' '.join(COLUMNS)}")
            for lineno, row in enumerate(reader, 2):
                examples.append(_parse_row(row, f"{path}, line {lineno}", num_classes))
    else:
        raise DataError(f"unknown format {fmt!r}")
    ids = Counter(ex.id for ex in examples)
    dupes = sorted(i for i, c in ids.items() if c > 1)
    if dupes:
        raise DataError(f"{path}: duplicate id {dupes[0]!r}")
    return sorted(examples, key=lambda ex: ex.id)


def ingest(path, fmt: str | None = None, split: str = "train",
           num_classes: int | None = None) -> DomainCorpus:
    """Load one split file, or a directory holding ``{train,dev,test}.<fmt>``."""
    path = Path(path)
    if path.is_dir():
        splits = {}
        for s in SPLITS:
            candidates = [path / f"{s}.{f}" for f in ((fmt,) if fmt else ("jsonl", "tsv"))]
            found = [c for c in candidates if c.exists()]
            splits[s] = read_examples(found[0], num_classes=num_classes) if found else []
    else:
        if not path.exists():
            raise FileNotFoundError(path)
        splits = {split: read_examples(path, fmt, num_classes)}
    names = {ex.domain for exs in splits.values() for ex in exs}
    if len(names) != 1:
        raise DataError(f"{path}: expected exactly one domain, found {sorted(names)}")
    return DomainCorpus(name=names.pop(), splits=splits)


def export(corpus: DomainCorpus, directory, fmt: str = "jsonl") -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for split, examples in corpus.splits.items():
        if not examples:
            continue
        target = out / f"{split}.{fmt}"
        rows = [{"id": ex.id, "text": ex.text, "text2": ex.text2, "label": ex.label, "domain": ex.domain}
                for ex in examples]
        if fmt == "jsonl":
            with open(target, "w") as fh:
                for row in rows:
                    if row["text2"] is None:
                        del row["text2"]
                    fh.write(json.dumps(row) + "\n")
        elif fmt == "tsv":
            with open(target, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=COLUMNS, delimiter="\t")
                w.writeheader()
                for row in rows:
                    w.writerow({k: "" if v is None else v for k, v in row.items()})
        else:
            raise DataError(f"unknown format {fmt!r}")
    return out


# ------------------------------------------------------------------ synthetic
@dataclass
class SynthSpec:
    num_domains: int = 3
    num_classes: int = 2
    train_size: int = 600
    dev_size: int = 100
    test_size: int = 100
    shared_strength: float = 0.8
    domain_noise: float = 0.5
    signal_tokens: int = 2
    class_vocab: int = 60
    noise_vocab: int = 60
    length: tuple[int, int] = (8, 14)
    zipf: float = 1.0
    label_noise: float = 0.1
    seed: int = 0
    domain_names: list[str] | None = None

    def names(self) -> list[str]:
        return list(self.domain_names or [f"domain{k}" for k in range(self.num_domains)])


def _zipf_probs(n: int, a: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    return w / w.sum()


def synth_multidomain(spec: SynthSpec | None = None, **overrides) -> list[DomainCorpus]:
    """Generate K domains whose class-indicative tokens are shared with probability s.

    Each example carries ``signal_tokens`` class tokens; each one comes from the
    class's cross-domain region with probability ``shared_strength`` and from the
    domain's private region otherwise. Filler comes from a domain-private noise
    region with probability ``domain_noise``, else from a common one. Training
    labels are flipped with probability ``label_noise``; dev/test labels are clean.
    """
    spec = replace(spec or SynthSpec(), **overrides)
    K, M = spec.num_domains, spec.num_classes
    per_domain = spec.train_size + spec.dev_size + spec.test_size
    if K < 1 or M < 2:
        raise DataError("need at least one domain and two classes")
    if min(spec.train_size, spec.dev_size, spec.test_size) < M * 5:
        raise DataError(f"every split needs at least {M * 5} examples")
    if not 0.0 <= spec.shared_strength <= 1.0 or not 0.0 <= spec.domain_noise <= 1.0:
        raise DataError("shared_strength and domain_noise must lie in [0, 1]")
    lo, hi = spec.length
    if lo < spec.signal_tokens or hi < lo:
        raise DataError(f"bad length range {spec.length}")
    names = spec.names()
    if len(names) != K:
        raise DataError("domain_names must have one entry per domain")

    rng = np.random.default_rng(spec.seed)
    class_p = _zipf_probs(spec.class_vocab, spec.zipf)
    noise_p = _zipf_probs(spec.noise_vocab, spec.zipf)
    corpora = []
    for k, name in enumerate(names):
        # balance classes within each split, not just over the whole domain
        labels = np.concatenate([rng.permutation(np.arange(n) % M)
                                 for n in (spec.train_size, spec.dev_size, spec.test_size)])
        rows = []
        for i, y in enumerate(labels):
            n = int(rng.integers(lo, hi + 1))
            toks = []
            for _ in range(spec.signal_tokens):
                j = int(rng.choice(spec.class_vocab, p=class_p))
                toks.append(f"c{y}w{j}" if rng.random() < spec.shared_strength else f"d{k}c{y}w{j}")
            for _ in range(n - spec.signal_tokens):
                j = int(rng.choice(spec.noise_vocab, p=noise_p))
                toks.append(f"d{k}n{j}" if rng.random() < spec.domain_noise else f"n{j}")
            rng.shuffle(toks)
            rows.append((f"{name}-{i:05d}", " ".join(toks), int(y)))
        splits = {}
        bounds = {"train": (0, spec.train_size),
                  "dev": (spec.train_size, spec.train_size + spec.dev_size),
                  "test": (spec.train_size + spec.dev_size, per_domain)}
        for split, (a, b) in bounds.items():
            exs = []
            for rid, text, y in rows[a:b]:
                if split == "train" and rng.random() < spec.label_noise:
                    y = int((y + rng.integers(1, M)) % M)
                exs.append(Example(id=rid, text=text, label=y, domain=name))
            splits[split] = exs
        corpora.append(DomainCorpus(name=name, splits=splits))
    return corpora


def write_corpus_dir(corpora: Sequence[DomainCorpus], directory, spec: SynthSpec | None = None,
                     fmt: str = "jsonl") -> Path:
    """One sub-directory per domain plus ``manifest.json`` describing the generation."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for c in corpora:
        export(c, out / c.name, fmt)
    manifest = {"domains": [c.name for c in corpora], "format": fmt,
                "sizes": {c.name: c.sizes() for c in corpora}}
    if spec is not None:
        manifest["spec"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(spec).items()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_corpus_dir(directory) -> list[DomainCorpus]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [ingest(directory / name, manifest.get("format")) for name in manifest["domains"]]


# ---------------------------------------------------------------- tokenizing
@dataclass
class Vocab:
    token_to_id: dict[str, int]

    @classmethod
    def build(cls, texts: Sequence[str], budget: int) -> "Vocab":
        if budget < len(RESERVED):
            raise DataError(f"vocab budget {budget} smaller than the reserved set")
        counts = Counter(tok for t in texts for tok in t.split())
        ranked = sorted(counts, key=lambda tok: (-counts[tok], tok))[: budget - len(RESERVED)]
        mapping = {tok: i for i, tok in enumerate(RESERVED)}
        for tok in ranked:
            mapping.setdefault(tok, len(mapping))
        return cls(mapping)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def ids(self, text: str) -> list[int]:
        return [self.token_to_id.get(tok, UNK) for tok in text.split()]

    def encode(self, text: str, text2: str | None = None, max_len: int = 128) -> list[int]:
        a = self.ids(text)
        if text2 is None:
            return [CLS] + a[: max_len - 2] + [SEP]
        b = self.ids(text2)
        room = max_len - 3
        while len(a) + len(b) > room:
            if len(a) >= len(b):
                a.pop()
            else:
                b.pop()
        return [CLS] + a + [SEP] + b + [SEP]


def tokenize(examples: Sequence[Example], vocab_budget: int, max_len: int = 128):
    """Whitespace vocab over ``examples``; returns (vocab, list of id lists)."""
    texts = [ex.text for ex in examples] + [ex.text2 for ex in examples if ex.text2]
    vocab = Vocab.build(texts, vocab_budget)
    return vocab, [vocab.encode(ex.text, ex.text2, max_len) for ex in examples]


# ------------------------------------------------------------------ batching
@dataclass
class Batch:
    token_ids: np.ndarray
    mask: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray
    corrupted_domain_labels: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def corrupt_domains(domains: np.ndarray, rng: np.random.Generator, tries: int = 10) -> np.ndarray:
    """In-batch shuffle of domain labels that avoids z_i == d_i whenever possible."""
    d = np.asarray(domains)
    n = len(d)
    if n < 2 or len(np.unique(d)) < 2:
        return d.copy()
    for _ in range(tries):
        z = d[rng.permutation(n)]
        if not np.any(z == d):
            return z
    # a label derangement exists iff no domain fills more than half the batch;
    # shifting the label-sorted order by the largest count reaches the minimum of fixed points
    order = rng.permutation(n)
    order = order[np.argsort(d[order], kind="stable")]
    shift = int(np.bincount(d).max())
    z = np.empty_like(d)
    z[order] = d[np.roll(order, -shift)]
    return z


class Dataset:
    """Examples encoded once, with arrays for labels and domain indices."""

    def __init__(self, examples: Sequence[Example], vocab: Vocab, domain_index: dict[str, int],
                 max_len: int):
        self.examples = list(examples)
        self.vocab = vocab
        self.domain_index = dict(domain_index)
        self.max_len = max_len
        self.encoded = [np.asarray(vocab.encode(ex.text, ex.text2, max_len), dtype=np.int64)
                        for ex in self.examples]
        self.labels = np.array([-1 if ex.label is None else ex.label for ex in self.examples], dtype=np.int64)
        self.domains = np.array([domain_index[ex.domain] for ex in self.examples], dtype=np.int64)
        self.ids = [ex.id for ex in self.examples]

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def has_labels(self) -> bool:
        return bool(len(self) and self.labels.min() >= 0)

    def subset(self, indices) -> "Dataset":
        twin = object.__new__(Dataset)
        idx = list(indices)
        twin.examples = [self.examples[i] for i in idx]
        twin.vocab, twin.domain_index, twin.max_len = self.vocab, self.domain_index, self.max_len
        twin.encoded = [self.encoded[i] for i in idx]
        twin.labels = self.labels[idx]
        twin.domains = self.domains[idx]
        twin.ids = [self.ids[i] for i in idx]
        return twin

    def collate(self, idx, rng: np.random.Generator | None = None, corrupt: bool = False) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        if len(idx) == 0:
            raise DataError("empty batch")
        width = max(len(self.encoded[i]) for i in idx)
        token_ids = np.full((len(idx), width), PAD, dtype=np.int64)
        mask = np.zeros((len(idx), width))
        for r, i in enumerate(idx):
            seq = self.encoded[i]
            token_ids[r, : len(seq)] = seq
            mask[r, : len(seq)] = 1.0
        d = self.domains[idx]
        z = corrupt_domains(d, rng) if corrupt and rng is not None else d.copy()
        return Batch(token_ids, mask, self.labels[idx], d, z, [self.ids[i] for i in idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None,
                mix: str = "mixed", corrupt: bool = False) -> Iterator[Batch]:
        """One epoch. ``rng=None`` keeps the stored order (evaluation)."""
        if corrupt and batch_size < 2:
            raise DataError("label corruption needs batch_size >= 2")
        n = len(self)
        if mix == "mixed":
            order = rng.permutation(n) if rng is not None else np.arange(n)
            chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        elif mix == "single-domain":
            chunks = []
            for dom in np.unique(self.domains):
                members = np.flatnonzero(self.domains == dom)
                if rng is not None:
                    members = rng.permutation(members)
                chunks += [members[i:i + batch_size] for i in range(0, len(members), batch_size)]
            if rng is not None:
                chunks = [chunks[i] for i in rng.permutation(len(chunks))]
        else:
            raise DataError(f"unknown mix mode {mix!r}")
        for chunk in chunks:
            yield self.collate(chunk, rng, corrupt)


def make_batches(dataset: Dataset, batch_size: int, seed: int, mix: str = "mixed",
                 corrupt: bool = True) -> Iterator[Batch]:
    return dataset.batches(batch_size, np.random.default_rng(seed), mix, corrupt)


def subsample(corpus: DomainCorpus, rate: float, seed: int) -> DomainCorpus:
    """Class-stratified sample of ceil(rate * |train|) training examples; dev/test untouched."""
    if not 0.0 < rate <= 1.0:
        raise DataError(f"rate must lie in (0, 1], got {rate}")
    train = corpus.get("train")
    if rate == 1.0:
        return DomainCorpus(corpus.name, {**corpus.splits})
    total = math.ceil(rate * len(train))
    by_class: dict[int, list[Example]] = {}
    for ex in train:
        by_class.setdefault(ex.label, []).append(ex)
    classes = sorted(by_class)
    quotas = {c: total * len(by_class[c]) / len(train) for c in classes}
    alloc = {c: int(math.floor(q)) for c, q in quotas.items()}
    leftover = total - sum(alloc.values())
    for c in sorted(classes, key=lambda c: (-(quotas[c] - alloc[c]), c))[:leftover]:
        alloc[c] += 1
    empty = [c for c in classes if alloc[c] == 0]
    if empty:
        raise DataError(f"rate {rate} leaves class {empty[0]} with no examples")
    rng = np.random.default_rng(seed)
    picked = []
    for c in classes:
        pool = by_class[c]
        picked += [pool[i] for i in sorted(rng.choice(len(pool), size=alloc[c], replace=False))]
    picked.sort(key=lambda ex: ex.id)
    return DomainCorpus(corpus.name, {**corpus.splits, "train": picked})
