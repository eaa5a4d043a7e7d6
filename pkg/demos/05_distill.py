"""Distil a small student from a meta-teacher, with and without the meta-distillation terms.

Plain KD matches embeddings, hidden states, attention scores and softened predictions.
Meta-distillation weights each example by the teacher's domain expertise and adds a
term that transfers the teacher's domain sub-network output.
"""
from dataclasses import replace

from metakd import data as D
from metakd.distill import DistillConfig, DistillPlan, dataset_expertise_weights, distill
from metakd.encoder import Encoder, EncoderConfig
from metakd.teacher import TeacherConfig, accuracy, train_meta_teacher

corpora = D.synth_multidomain(num_domains=3, train_size=300, dev_size=50, test_size=100)
vocab = D.Vocab.build([ex.text for c in corpora for ex in c.get("train", labels=False)], 10_000)
index = {c.name: k for k, c in enumerate(corpora)}


def ds(split, names):
    return D.Dataset([ex for c in corpora if c.name in names for ex in c.get(split)], vocab, index, 32)


base = dict(vocab_size=len(vocab), num_heads=4, num_domains=3, dtype="float32")
t_cfg = EncoderConfig(num_layers=4, hidden_dim=32, ffn_dim=64, **base)
s_cfg = EncoderConfig(num_layers=2, hidden_dim=16, ffn_dim=32, **base)
names = list(index)
meta = train_meta_teacher(ds("train", names), t_cfg, TeacherConfig(epochs=4),
                          {n: ds("dev", [n]) for n in names})

target = names[0]
train, dev, test = ds("train", [target]), ds("dev", [target]), ds("test", [target])
cfg = DistillConfig(int_epochs=6, pred_epochs=3)
print(f"teacher on {target}: {accuracy(meta.model, test):.3f}")
for label, use_meta in (("plain KD", False), ("meta-distillation", True)):
    student = Encoder(s_cfg, seed=1)
    plan = DistillPlan.for_models(meta.model, student, gamma2=0.3 if use_meta else 0.0,
                                  use_transfer=use_meta, use_expertise=use_meta)
    weights = dataset_expertise_weights(meta.model, train, meta.table) if use_meta else None
    res = distill(meta.model, student, train, plan, replace(cfg, seed=2), weights, dev)
    print(f"{label:18s} student: {accuracy(res.student, test):.3f}  layer map {plan.layer_map}")
if weights:
    w = sorted(weights.values())
    print(f"expertise weights range {w[0]:.3f} .. {w[-1]:.3f}")
