"""Teacher-to-student distillation with instance-level domain-expertise weighting.

Phase one matches embeddings, mapped hidden states and attention scores, and
(optionally) the teacher's transferable-knowledge vector through a learned
projection. Phase two matches temperature-softened class distributions. Every
per-sample term except the transferable-knowledge one can be scaled by a weight
that is high when the teacher is prototypical for the sample and predicts it
correctly.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Batch, Dataset
from .encoder import Encoder, ForwardTrace
from .nn import Module, Parameter, named_optimizer, normal_init
from .teacher import PrototypeTable, TrainingError, accuracy, check_finite, epochs_for
from .tensor import Tensor, log_softmax, no_grad

log = logging.getLogger(__name__)


def map_layers(teacher_layers: int, student_layers: int) -> list[tuple[int, int]]:
    """Uniform-stride (teacher_layer, student_layer) pairs, 1-indexed."""
    if not teacher_layers >= student_layers >= 1:
        raise ValueError(f"need teacher_layers >= student_layers >= 1, got {teacher_layers}, {student_layers}")
    if teacher_layers % student_layers:
        valid = [d for d in range(1, teacher_layers + 1) if teacher_layers % d == 0]
        raise ValueError(f"{teacher_layers} teacher layers cannot be mapped onto {student_layers}; "
                         f"valid student depths: {valid}")
    stride = teacher_layers // student_layers
    return [(j * stride, j) for j in range(1, student_layers + 1)]


class Projections(Module):
    """Student-to-teacher width maps for embeddings and hidden states; teacher-to-student for h_d."""

    def __init__(self, student_dim: int, teacher_dim: int, n_hidden: int, rng=None,
                 identity: bool = False, dtype=np.float64):
        if identity:
            if student_dim != teacher_dim:
                raise ValueError("identity projections need equal widths")
            eye = np.eye(student_dim, dtype=dtype)
            self.embed = Parameter(eye)
            self.hidden = [Parameter(eye) for _ in range(n_hidden)]
            self.transfer = Parameter(eye)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.embed = Parameter(normal_init(rng, (student_dim, teacher_dim), dtype=dtype))
            self.hidden = [Parameter(normal_init(rng, (student_dim, teacher_dim), dtype=dtype))
                           for _ in range(n_hidden)]
            self.transfer = Parameter(normal_init(rng, (teacher_dim, student_dim), dtype=dtype))


@dataclass
class DistillPlan:
    layer_map: list[tuple[int, int]]
    temperature: float = 1.0
    gamma2: float = 0.3
    use_transfer: bool = True
    use_expertise: bool = True
    err_mode: str = "indicator"     # or "squared" for the literal (y_hat - y)^2
    projections: Projections | None = field(default=None, repr=False)

    def __post_init__(self):
        self.layer_map = [tuple(p) for p in self.layer_map]
        ts = [t for t, _ in self.layer_map]
        ss = [s for _, s in self.layer_map]
        if ts != sorted(set(ts)) or ss != sorted(set(ss)):
            raise ValueError(f"layer map must be strictly increasing on both sides: {self.layer_map}")
        if ss and ss != list(range(1, len(ss) + 1)):
            raise ValueError(f"layer map must cover every student layer once: {self.layer_map}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.gamma2 < 0:
            raise ValueError("gamma2 must be >= 0")

    @classmethod
    def for_models(cls, teacher: Encoder, student: Encoder, **kw) -> "DistillPlan":
        return cls(map_layers(teacher.config.num_layers, student.config.num_layers), **kw)

    def init_projections(self, student_dim: int, teacher_dim: int, rng=None, identity: bool = False,
                         dtype=np.float64) -> Projections:
        self.projections = Projections(student_dim, teacher_dim, len(self.layer_map), rng, identity, dtype)
        return self.projections

    def to_json(self) -> dict:
        return {"layer_map": [list(p) for p in self.layer_map], "temperature": self.temperature,
                "gamma2": self.gamma2, "use_transfer": self.use_transfer,
                "use_expertise": self.use_expertise, "err_mode": self.err_mode}

    @classmethod
    def from_json(cls, obj: dict) -> "DistillPlan":
        return cls(**{k: v for k, v in obj.items() if k != "projections"})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "DistillPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class DistillConfig:
    int_epochs: int = 10
    pred_epochs: int = 3
    lr_intermediate: float = 1e-3
    lr_prediction: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    select_on_dev: bool = True
    cache_teacher: bool = True
    min_steps: int = 50


# ------------------------------------------------------------------ teacher side
@dataclass
class TeacherView:
    """Teacher quantities for one batch, as constants."""

    embedding_out: np.ndarray
    hidden: dict[int, np.ndarray]        # teacher layer (1-indexed) -> [B, N, H]
    attention: dict[int, np.ndarray]     # teacher layer -> [B, A, N, N]
    transfer_vec: np.ndarray
    class_logits: np.ndarray

    @classmethod
    def from_trace(cls, trace: ForwardTrace, layers: Sequence[int]) -> "TeacherView":
        return cls(trace.embedding_out.data, {t: trace.hidden_states[t - 1].data for t in layers},
                   {t: trace.attention_scores[t - 1].data for t in layers},
                   trace.transfer_vec.data, trace.class_logits.data)


class TeacherCache:
    """Per-example teacher outputs, computed once in eval mode and re-padded per batch."""

    def __init__(self, teacher: Encoder, dataset: Dataset, layers: Sequence[int], batch_size: int = 128):
        self.layers = list(layers)
        self.index = {i: n for n, i in enumerate(dataset.ids)}
        self.rows: list[dict] = []
        teacher.eval()
        with no_grad():
            for batch in dataset.batches(batch_size):
                view = TeacherView.from_trace(teacher.encode(batch), self.layers)
                lengths = batch.mask.sum(1).astype(int)
                for r, n in enumerate(lengths):
                    self.rows.append({
                        "emb": view.embedding_out[r, :n],
                        "hid": {t: h[r, :n] for t, h in view.hidden.items()},
                        "att": {t: a[r, :, :n, :n] for t, a in view.attention.items()},
                        "tv": view.transfer_vec[r], "logits": view.class_logits[r]})

    def view(self, batch: Batch) -> TeacherView:
        rows = [self.rows[self.index[i]] for i in batch.ids]
        B, N = batch.token_ids.shape

        def pad(key, sub=None):
            first = rows[0][key] if sub is None else rows[0][key][sub]
            if first.ndim == 2:
                out = np.zeros((B, N, first.shape[-1]), dtype=first.dtype)
                for r, row in enumerate(rows):
                    x = row[key] if sub is None else row[key][sub]
                    out[r, : len(x)] = x
            else:
                out = np.zeros((B, first.shape[0], N, N), dtype=first.dtype)
                for r, row in enumerate(rows):
                    x = row[key][sub]
                    n = x.shape[-1]
                    out[r, :, :n, :n] = x
            return out

        return TeacherView(pad("emb"), {t: pad("hid", t) for t in self.layers},
                           {t: pad("att", t) for t in self.layers},
                           np.stack([row["tv"] for row in rows]),
                           np.stack([row["logits"] for row in rows]))


def teacher_view(teacher: Encoder, batch: Batch, layers: Sequence[int]) -> TeacherView:
    teacher.eval()
    with no_grad():
        return TeacherView.from_trace(teacher.encode(batch), layers)


# ----------------------------------------------------------------------- losses
def _masked_token_mse(student: Tensor, teacher: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-sample MSE over active token positions and features."""
    m = mask.astype(student.dtype)
    d = student - teacher.astype(student.dtype)
    denom = m.sum(1) * student.shape[-1]
    return (d * d * m[:, :, None]).sum(axis=(1, 2)) * (1.0 / denom)


def _masked_attention_mse(student: Tensor, teacher: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-sample MSE over heads and active (query, key) pairs."""
    if student.shape[1] != teacher.shape[1]:
        raise ValueError(f"attention head counts differ: student {student.shape[1]} vs teacher {teacher.shape[1]}")
    m = mask.astype(student.dtype)
    pair = m[:, None, :, None] * m[:, None, None, :]
    d = student - teacher.astype(student.dtype)
    denom = (m.sum(1) ** 2) * student.shape[1]
    return (d * d * pair).sum(axis=(1, 2, 3)) * (1.0 / denom)


def _as_view(trace_or_view, plan: DistillPlan) -> TeacherView:
    if isinstance(trace_or_view, TeacherView):
        return trace_or_view
    return TeacherView.from_trace(trace_or_view, [t for t, _ in plan.layer_map])


def intermediate_losses_per_sample(teacher, student: ForwardTrace, plan: DistillPlan):
    """Per-sample (embedding, hidden, attention) MSE vectors, each of shape [B]."""
    view = _as_view(teacher, plan)
    proj = plan.projections
    if proj is None:
        raise ValueError("plan has no projections; call init_projections first")
    mask = student.mask
    embd = _masked_token_mse(student.embedding_out @ proj.embed, view.embedding_out, mask)
    hidn = attn = None
    for (t, s), w in zip(plan.layer_map, proj.hidden):
        h = _masked_token_mse(student.hidden_states[s - 1] @ w, view.hidden[t], mask)
        a = _masked_attention_mse(student.attention_scores[s - 1], view.attention[t], mask)
        hidn = h if hidn is None else hidn + h
        attn = a if attn is None else attn + a
    return embd, hidn, attn


def intermediate_losses(teacher, student: ForwardTrace, plan: DistillPlan) -> tuple[Tensor, Tensor, Tensor]:
    embd, hidn, attn = intermediate_losses_per_sample(teacher, student, plan)
    return embd.mean(), hidn.mean(), attn.mean()


def softened(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def prediction_loss_per_sample(teacher_probs: np.ndarray, student_logits: Tensor, temperature: float) -> Tensor:
    """Soft cross-entropy between a target distribution and softmax(student / T)."""
    if teacher_probs.shape != student_logits.shape:
        raise ValueError(f"class counts differ: {teacher_probs.shape} vs {student_logits.shape}")
    logp = log_softmax(student_logits * (1.0 / temperature), axis=-1)
    return -(logp * teacher_probs.astype(student_logits.dtype)).sum(axis=-1)


def prediction_loss(teacher_logits, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits
    return prediction_loss_per_sample(softened(t, temperature), student_logits, temperature).mean()


def tk_loss(teacher_vec, student_vec: Tensor, projection) -> Tensor:
    """Batch mean of MSE(teacher_vec @ projection, student_vec)."""
    tv = teacher_vec.data if isinstance(teacher_vec, Tensor) else np.asarray(teacher_vec)
    projected = Tensor(tv.astype(student_vec.dtype)) @ projection
    if projected.shape != student_vec.shape:
        raise ValueError(f"projected teacher vector {projected.shape} does not match student {student_vec.shape}")
    d = projected - student_vec
    return (d * d).mean()


def expertise_weights(teacher_logits, labels, scores, err_mode: str = "indicator") -> np.ndarray:
    """lambda = (1 + t) / (exp(err^2) + 1), err^2 from the teacher's argmax prediction."""
    logits = teacher_logits
    if isinstance(logits, ForwardTrace):
        logits = logits.class_logits
    if isinstance(logits, Tensor):
        logits = logits.data
    pred = np.asarray(logits).argmax(-1)
    y = np.asarray(labels)
    if err_mode == "indicator":
        err2 = (pred != y).astype(np.float64)
    elif err_mode == "squared":
        err2 = (pred - y).astype(np.float64) ** 2
    else:
        raise ValueError(f"unknown err_mode {err_mode!r}")
    t = np.asarray(scores, dtype=np.float64)
    return (1.0 + t) / (np.exp(err2) + 1.0)


def dataset_expertise_weights(teacher: Encoder, dataset: Dataset, table: PrototypeTable | None,
                              err_mode: str = "indicator", batch_size: int = 256) -> dict[str, float]:
    """lambda for every example. Without gold labels (zero-shot) err^2 = 0, and examples
    missing from ``table`` take its mean score."""
    from .teacher import predict_logits

    mean_t = table.mean_score() if table is not None and table.scores else 1.0
    t = np.array([table.scores.get(i, mean_t) if table is not None else 1.0 for i in dataset.ids])
    if dataset.has_labels:
        lam = expertise_weights(predict_logits(teacher, dataset, batch_size), dataset.labels, t, err_mode)
    else:
        lam = (1.0 + t) / 2.0
    return dict(zip(dataset.ids, lam.tolist()))


def meta_distill_loss(phase: str, weights: np.ndarray, embd=None, hidn=None, attn=None,
                      pred=None, tk: Tensor | None = None, gamma2: float = 0.0) -> Tensor:
    """Weighted batch mean of the per-sample terms, plus gamma2 * tk outside the weighting."""
    w = np.asarray(weights, dtype=np.float64)
    if phase == "intermediate":
        per = embd + hidn + attn
        loss = (per * w.astype(per.dtype)).mean()
        if tk is not None and gamma2:
            loss = loss + tk * gamma2
        return loss
    if phase == "prediction":
        return (pred * w.astype(pred.dtype)).mean()
    raise ValueError(f"unknown phase {phase!r}")


# ---------------------------------------------------------------------- training
@dataclass
class DistillResult:
    student: Encoder
    plan: DistillPlan
    history: list[dict]


def _batch_weights(batch: Batch, weights: dict[str, float] | None) -> np.ndarray:
    if weights is None:
        return np.ones(len(batch))
    try:
        return np.array([weights[i] for i in batch.ids])
    except KeyError as e:
        raise KeyError(f"no expertise weight for example {e.args[0]!r}") from None


def distill(teacher: Encoder, student: Encoder, train: Dataset, plan: DistillPlan,
            config: DistillConfig, weights: dict[str, float] | None = None,
            dev: Dataset | None = None, ensemble: Sequence[Encoder] | None = None) -> DistillResult:
    """Two-phase distillation of ``teacher`` into ``student`` on ``train``.

    ``weights`` maps example id to its expertise weight (``None``: all ones).
    ``ensemble``, when given, replaces the phase-two target by the mean of the
    ensemble members' softened distributions. The teacher is never updated.
    """
    if teacher.config.num_heads != student.config.num_heads:
        raise ValueError("teacher and student need equal head counts for attention distillation")
    for t, _ in plan.layer_map:
        if t > teacher.config.num_layers:
            raise ValueError(f"layer map names teacher layer {t} of {teacher.config.num_layers}")
    dtype = np.dtype(student.config.dtype)
    if plan.projections is None:
        plan.init_projections(student.config.hidden_dim, teacher.config.hidden_dim,
                              np.random.default_rng([config.seed, 7]), dtype=dtype)
    layers = [t for t, _ in plan.layer_map]
    teacher.eval()
    cache = TeacherCache(teacher, train, layers) if config.cache_teacher else None
    members = [TeacherCache(m, train, []) for m in ensemble] if ensemble else None

    def view(batch):
        return cache.view(batch) if cache is not None else teacher_view(teacher, batch, layers)

    rng = np.random.default_rng([config.seed, 3])
    history: list[dict] = []

    def run_phase(name: str, epochs: int, lr: float):
        extra = dict(plan.projections.named_parameters("proj.")) if name == "intermediate" else None
        opt = named_optimizer(student, lr, extra)
        best, best_state = -math.inf, None
        for epoch in range(1, epochs_for(len(train), config.batch_size, epochs, config.min_steps) + 1):
            student.train()
            total, steps = 0.0, 0
            for batch in train.batches(config.batch_size, rng):
                tv = view(batch)
                st = student.encode(batch)
                w = _batch_weights(batch, weights)
                if name == "intermediate":
                    embd, hidn, attn = intermediate_losses_per_sample(tv, st, plan)
                    tk = (tk_loss(tv.transfer_vec, st.transfer_vec, plan.projections.transfer)
                          if plan.use_transfer and plan.gamma2 > 0 else None)
                    loss = meta_distill_loss("intermediate", w, embd, hidn, attn, tk=tk, gamma2=plan.gamma2)
                else:
                    if members:
                        target = np.mean([softened(m.view(batch).class_logits, plan.temperature)
                                          for m in members], axis=0)
                    else:
                        target = softened(tv.class_logits, plan.temperature)
                    pred = prediction_loss_per_sample(target, st.class_logits, plan.temperature)
                    loss = meta_distill_loss("prediction", w, pred=pred)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite {name} loss at epoch {epoch}")
                loss.backward()
                opt.step()
                total += value
                steps += 1
            check_finite(student)
            entry = {"phase": name, "epoch": epoch, "loss": total / max(steps, 1)}
            if dev is not None and name == "prediction":
                entry["dev"] = accuracy(student, dev)
                if not config.select_on_dev or entry["dev"] > best:
                    best, best_state = entry["dev"], student.state_dict()
            history.append(entry)
            log.info("%s epoch %d loss %.5f", name, epoch, entry["loss"])
        if best_state is not None:
            student.load_state_dict(best_state)

    run_phase("intermediate", config.int_epochs, config.lr_intermediate)
    run_phase("prediction", config.pred_epochs, config.lr_prediction)
    student.eval()
    return DistillResult(student, plan, history)


def mtn_kd_distill(teachers: Sequence[Encoder], in_domain: Encoder, student: Encoder, train: Dataset,
                   plan: DistillPlan, config: DistillConfig, dev: Dataset | None = None) -> DistillResult:
    """Intermediate layers from the in-domain teacher, predictions from the teachers' mean."""
    if len(teachers) < 2:
        raise ValueError("multi-teacher distillation needs at least two teachers")
    classes = {t.config.num_classes for t in teachers} | {student.config.num_classes}
    if len(classes) != 1:
        raise ValueError(f"teachers and student disagree on the class count: {sorted(classes)}")
    plan.use_transfer = False
    plan.use_expertise = False
    return distill(in_domain, student, train, plan, config, weights=None, dev=dev, ensemble=teachers)


def agreement_rates(teachers: Sequence[Encoder], dataset: Dataset) -> list[float]:
    """Per teacher, how often its argmax matches the ensemble's averaged prediction."""
    from .teacher import predict_logits

    probs = [softened(predict_logits(t, dataset), 1.0) for t in teachers]
    ensemble = np.mean(probs, axis=0).argmax(-1)
    return [float((p.argmax(-1) == ensemble).mean()) for p in probs]
