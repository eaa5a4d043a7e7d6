"""Meta-teacher learning: class prototypes, prototype scores, domain corruption.

The teacher sees the union of all domains. Each training example's classification
loss is weighted by how close its pooled representation sits to its class
prototype in its own domain and in every other domain, and a domain-corruption
term pushes the domain sub-network toward predicting a *wrong* domain label.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .encoder import Encoder, EncoderConfig, ForwardTrace
from .nn import named_optimizer
from .tensor import Tensor, cross_entropy_per_sample, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TeacherConfig:
    alpha: float = 0.5
    gamma1: float = 0.2
    epochs: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    clamp_floor: float = 0.05
    mix: str = "mixed"
    refresh_prototypes_every_epoch: bool = False
    select_on_dev: bool = True
    min_steps: int = 50

    def __post_init__(self):
        if self.gamma1 < 0:
            raise ValueError("gamma1 must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class PrototypeTable:
    """Per-(domain, class) mean pooled vectors plus one score per training example."""

    prototypes: dict[int, dict[int, np.ndarray]]
    alpha: float
    clamp_floor: float = 0.05
    scores: dict[str, float] = field(default_factory=dict)
    source: str = ""

    def vector(self, domain: int, cls: int) -> np.ndarray:
        try:
            return self.prototypes[domain][cls]
        except KeyError:
            raise KeyError(f"no prototype for (domain {domain}, class {cls})") from None

    def score_of(self, example_id: str) -> float:
        try:
            return self.scores[example_id]
        except KeyError:
            raise KeyError(f"no prototype score for example {example_id!r}") from None

    def mean_score(self) -> float:
        return float(np.mean(list(self.scores.values())))

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "clamp_floor": self.clamp_floor, "source": self.source,
                "prototypes": {str(k): {str(m): v.tolist() for m, v in row.items()}
                               for k, row in self.prototypes.items()},
                "scores": self.scores}

    @classmethod
    def from_json(cls, obj: dict) -> "PrototypeTable":
        protos = {int(k): {int(m): np.asarray(v, dtype=np.float64) for m, v in row.items()}
                  for k, row in obj["prototypes"].items()}
        return cls(protos, obj["alpha"], obj.get("clamp_floor", 0.05),
                   {k: float(v) for k, v in obj["scores"].items()}, obj.get("source", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PrototypeTable":
        return cls.from_json(json.loads(Path(path).read_text()))


def pooled_vectors(model: Encoder, dataset: Dataset, batch_size: int = 128) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for batch in dataset.batches(batch_size):
            out.append(model.encode(batch).pooled.data)
    model.train(was_training)
    return np.concatenate(out).astype(np.float64)


def prototypes_from_vectors(pooled: np.ndarray, domains, labels) -> dict[int, dict[int, np.ndarray]]:
    domains, labels = np.asarray(domains), np.asarray(labels)
    all_classes = sorted(set(labels.tolist()))
    table = {}
    for k in sorted(set(domains.tolist())):
        row = {}
        for m in all_classes:
            members = (domains == k) & (labels == m)
            if not members.any():
                raise ValueError(f"empty prototype cell (domain {k}, class {m})")
            row[m] = pooled[members].mean(axis=0)
        table[k] = row
    return table


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine; zero rows give 0."""
    num = (a * b).sum(-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return np.clip(np.divide(num, den, out=np.zeros_like(num), where=den > 0), -1.0, 1.0)


def prototype_score(pooled: np.ndarray, domain: int, cls: int, table: PrototypeTable,
                    clamp: bool = True) -> float:
    """alpha * in-domain cosine + (1 - alpha) * mean out-of-domain cosine, clamped.

    With a single domain there is no out-of-domain term and the in-domain cosine is used.
    """
    h = np.asarray(pooled, dtype=np.float64)
    others = [k for k in table.prototypes if k != domain]
    own = float(_cos(table.vector(domain, cls), h))
    if not others:
        t = own
    else:
        cross = sum(float(_cos(table.vector(k, cls), h)) for k in others)
        t = table.alpha * own + (1.0 - table.alpha) / len(others) * cross
    return float(np.clip(t, table.clamp_floor, 1.0)) if clamp else t


def score_dataset(table: PrototypeTable, pooled: np.ndarray, dataset: Dataset) -> dict[str, float]:
    """Vectorized prototype scores for every example of ``dataset``."""
    domains = sorted(table.prototypes)
    classes = sorted(table.prototypes[domains[0]])
    P = np.stack([[table.prototypes[k][m] for m in classes] for k in domains])  # [K, M, H]
    dpos = {k: i for i, k in enumerate(domains)}
    cpos = {m: i for i, m in enumerate(classes)}
    di = np.array([dpos[d] for d in dataset.domains])
    ci = np.array([cpos[c] for c in dataset.labels])
    cos = _cos(P[:, ci, :], pooled[None, :, :])  # [K, n]
    own = cos[di, np.arange(len(di))]
    K = len(domains)
    if K == 1:
        t = own
    else:
        t = table.alpha * own + (1.0 - table.alpha) / (K - 1) * (cos.sum(0) - own)
    t = np.clip(t, table.clamp_floor, 1.0)
    return {i: float(v) for i, v in zip(dataset.ids, t)}


def build_prototypes(dataset: Dataset, encoder: Encoder, alpha: float, clamp_floor: float = 0.05,
                     source: str = "", score: bool = True) -> PrototypeTable:
    """Class prototypes per domain from the encoder's pooled vectors (eval mode)."""
    pooled = pooled_vectors(encoder, dataset)
    table = PrototypeTable(prototypes_from_vectors(pooled, dataset.domains, dataset.labels),
                           alpha, clamp_floor, source=source)
    if score:
        table.scores = score_dataset(table, pooled, dataset)
    return table


# ---------------------------------------------------------------------- losses
def domain_corruption_per_sample(domain_logits: Tensor, corrupted, true_domains=None) -> tuple[Tensor, np.ndarray]:
    """Cross-entropy toward the false label z per row, and the mask of rows where z != d."""
    z = np.asarray(corrupted, dtype=np.int64)
    valid = np.ones(len(z), dtype=bool) if true_domains is None else z != np.asarray(true_domains)
    return cross_entropy_per_sample(domain_logits, z), valid


def domain_corruption_loss(trace_or_logits, corrupted, true_domains=None) -> tuple[Tensor, bool]:
    """Mean corruption loss over rows with z != d; ``(0, False)`` when no row qualifies."""
    logits = trace_or_logits.domain_logits if isinstance(trace_or_logits, ForwardTrace) else trace_or_logits
    per, valid = domain_corruption_per_sample(logits, corrupted, true_domains)
    if not valid.any():
        return Tensor(0.0), False
    w = valid.astype(per.dtype) / valid.sum()
    return (per * w).sum(), True


def teacher_loss(batch, trace: ForwardTrace, scores, gamma1: float) -> Tensor:
    """Batch mean of t_i * CE_i + gamma1 * DC_i; rows with z == d carry no DC term.

    ``scores`` is a PrototypeTable, a mapping id -> t, or an array aligned with the batch.
    """
    if isinstance(scores, PrototypeTable):
        t = np.array([scores.score_of(i) for i in batch.ids])
    elif isinstance(scores, dict):
        missing = [i for i in batch.ids if i not in scores]
        if missing:
            raise KeyError(f"no prototype score for example {missing[0]!r}")
        t = np.array([scores[i] for i in batch.ids])
    else:
        t = np.asarray(scores, dtype=np.float64)
    dtype = trace.class_logits.dtype
    ce = cross_entropy_per_sample(trace.class_logits, batch.class_labels)
    per = ce * t.astype(dtype)
    if gamma1 > 0:
        dc, valid = domain_corruption_per_sample(trace.domain_logits, batch.corrupted_domain_labels,
                                                 batch.domain_labels)
        if not valid.any():
            log.debug("batch without corruptible rows; domain-corruption term skipped")
        per = per + dc * (gamma1 * valid).astype(dtype)
    return per.mean()


# -------------------------------------------------------------------- training
@dataclass
class TrainResult:
    model: Encoder
    table: PrototypeTable | None
    history: list[dict]
    best_epoch: int


def predict_logits(model: Encoder, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for batch in dataset.batches(batch_size):
            out.append(model.encode(batch).class_logits.data)
    model.train(was_training)
    return np.concatenate(out)


def accuracy(model: Encoder, dataset: Dataset) -> float:
    if not dataset.has_labels:
        raise ValueError("accuracy needs a labelled dataset")
    return float((predict_logits(model, dataset).argmax(-1) == dataset.labels).mean())


def domain_accuracy(model: Encoder, dataset: Dataset, batch_size: int = 256) -> float:
    """How often the domain classifier recovers the TRUE domain label."""
    model.eval()
    hits = 0
    with no_grad():
        for batch in dataset.batches(batch_size):
            hits += int((model.encode(batch).domain_logits.data.argmax(-1) == batch.domain_labels).sum())
    return hits / len(dataset)


def check_finite(model: Encoder) -> None:
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise TrainingError(f"non-finite values in parameter {name}")


def epochs_for(n: int, batch_size: int, epochs: int, min_steps: int) -> int:
    """Stretch the epoch count so tiny training sets still get ``min_steps`` updates."""
    per_epoch = max(1, math.ceil(n / batch_size))
    return max(epochs, math.ceil(min_steps / per_epoch))


def _dev_metrics(model, dev: dict[str, Dataset] | None) -> dict[str, float]:
    return {name: accuracy(model, ds) for name, ds in (dev or {}).items()}


def _fit(model: Encoder, train: Dataset, config: TeacherConfig, dev, loss_fn, table_fn=None) -> TrainResult:
    opt = named_optimizer(model, config.learning_rate)
    rng = np.random.default_rng([config.seed, 2])
    corrupt = config.gamma1 > 0
    table = table_fn(model) if table_fn else None
    history, best, best_state, best_epoch = [], -math.inf, None, 0
    for epoch in range(1, epochs_for(len(train), config.batch_size, config.epochs, config.min_steps) + 1):
        model.train()
        total, steps = 0.0, 0
        for batch in train.batches(config.batch_size, rng, config.mix, corrupt):
            trace = model.encode(batch)
            loss = loss_fn(batch, trace, table)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} step {steps} "
                                    f"(batch ids {batch.ids[:3]}...)")
            loss.backward()
            opt.step()
            total += value
            steps += 1
        check_finite(model)
        metrics = _dev_metrics(model, dev)
        entry = {"epoch": epoch, "loss": total / max(steps, 1), "dev": metrics}
        history.append(entry)
        log.info("epoch %d loss %.4f dev %s", epoch, entry["loss"], metrics)
        score = float(np.mean(list(metrics.values()))) if metrics else float(epoch)
        if not config.select_on_dev or score > best:
            best, best_state, best_epoch = score, model.state_dict(), epoch
        if table_fn and config.refresh_prototypes_every_epoch:
            table = table_fn(model)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, table, history, best_epoch)


def train_meta_teacher(train: Dataset, encoder_config: EncoderConfig, config: TeacherConfig,
                       dev: dict[str, Dataset] | None = None, source: str = "") -> TrainResult:
    """Fit the meta-teacher on mixed-domain ``train`` by the prototype-weighted loss."""
    if len(np.unique(train.domains)) < 2:
        raise ValueError("the meta-teacher needs at least two domains")
    model = Encoder(encoder_config, seed=config.seed)

    def make_table(m):
        return build_prototypes(train, m, config.alpha, config.clamp_floor, source=source)

    return _fit(model, train, config, dev,
                lambda b, tr, table: teacher_loss(b, tr, table, config.gamma1), make_table)


def train_baseline_teacher(train: Dataset, encoder_config: EncoderConfig, config: TeacherConfig,
                           dev: dict[str, Dataset] | None = None) -> TrainResult:
    """Plain cross-entropy fine-tuning; the caller decides which domains ``train`` holds."""
    plain = TeacherConfig(**{**vars(config), "gamma1": 0.0, "refresh_prototypes_every_epoch": False})
    model = Encoder(encoder_config, seed=config.seed)
    return _fit(model, train, plain, dev,
                lambda b, tr, _: cross_entropy_per_sample(tr.class_logits, b.class_labels).mean())
