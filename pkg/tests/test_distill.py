import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metakd.data import Dataset, Vocab, synth_multidomain
from metakd.distill import (DistillConfig, DistillPlan, TeacherCache, agreement_rates, dataset_expertise_weights,
                            distill, expertise_weights, intermediate_losses, intermediate_losses_per_sample,
                            map_layers, meta_distill_loss, mtn_kd_distill, prediction_loss, softened, teacher_view,
                            tk_loss)
from metakd.encoder import Encoder, EncoderConfig
from metakd.tensor import Tensor


@pytest.fixture(scope="module")
def world():
    corpora = synth_multidomain(num_domains=2, train_size=40, dev_size=20, test_size=20, seed=2)
    vocab = Vocab.build([ex.text for c in corpora for ex in c.get("train", labels=False)], 10_000)
    index = {c.name: k for k, c in enumerate(corpora)}
    train = Dataset(corpora[0].get("train"), vocab, index, 32)
    dev = Dataset(corpora[0].get("dev"), vocab, index, 32)
    t_cfg = EncoderConfig(vocab_size=len(vocab), num_layers=4, hidden_dim=16, num_heads=2, ffn_dim=32,
                          num_domains=2, dropout_rate=0.0)
    s_cfg = EncoderConfig(vocab_size=len(vocab), num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=16,
                          num_domains=2, dropout_rate=0.0)
    return train, dev, t_cfg, s_cfg


def param_bytes(model):
    return {n: p.data.tobytes() for n, p in model.named_parameters()}


@pytest.mark.parametrize("lt,ls,expected", [(12, 4, [(3, 1), (6, 2), (9, 3), (12, 4)]),
                                            (4, 2, [(2, 1), (4, 2)]),
                                            (4, 4, [(1, 1), (2, 2), (3, 3), (4, 4)])])
def test_map_layers(lt, ls, expected):
    assert map_layers(lt, ls) == expected


def test_map_layers_errors_suggest_depths():
    with pytest.raises(ValueError, match=r"\[1, 2, 3, 6\]"):
        map_layers(6, 4)
    with pytest.raises(ValueError):
        map_layers(2, 4)


def test_plan_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        DistillPlan([(2, 2), (4, 1)])
    with pytest.raises(ValueError):
        DistillPlan([(2, 1)], temperature=0)
    plan = DistillPlan([(2, 1), (4, 2)], temperature=2.0, gamma2=0.1)
    plan.save(tmp_path / "plan.json")
    back = DistillPlan.load(tmp_path / "plan.json")
    assert back.layer_map == plan.layer_map and back.temperature == 2.0 and back.projections is None


def test_self_distillation_is_exactly_zero(world):
    train, _, t_cfg, _ = world
    teacher = Encoder(t_cfg, seed=0).eval()
    student = teacher.clone().eval()
    plan = DistillPlan(map_layers(4, 4))
    plan.init_projections(16, 16, identity=True)
    batch = next(train.batches(8))
    tt, st_ = teacher.encode(batch), student.encode(batch)
    embd, hidn, attn = intermediate_losses(tt, st_, plan)
    assert embd.item() == 0.0 and hidn.item() == 0.0 and attn.item() == 0.0
    p = softened(tt.class_logits.data, 1.0)
    entropy = -(p * np.log(p)).sum(-1).mean()
    assert prediction_loss(tt.class_logits, st_.class_logits).item() == pytest.approx(entropy, abs=1e-12)


def test_hidden_perturbation_moves_only_hidden_loss(world):
    train, _, t_cfg, _ = world
    teacher = Encoder(t_cfg, seed=0).eval()
    plan = DistillPlan(map_layers(4, 4))
    plan.init_projections(16, 16, identity=True)
    batch = next(train.batches(4))
    tt = teacher.encode(batch)
    view = teacher_view(teacher, batch, [1, 2, 3, 4])
    st_ = teacher.encode(batch)
    eps = 1e-3
    target = st_.hidden_states[1].data.copy()
    st_.hidden_states[1] = Tensor(target + eps)
    embd, hidn, attn = intermediate_losses(view, st_, plan)
    assert embd.item() == 0.0 and attn.item() == 0.0
    assert hidn.item() == pytest.approx(eps ** 2, rel=1e-6)


def test_unmapped_teacher_layers_are_ignored(world):
    train, _, t_cfg, s_cfg = world
    teacher, student = Encoder(t_cfg, seed=0).eval(), Encoder(s_cfg, seed=1).eval()
    plan = DistillPlan(map_layers(4, 2))
    plan.init_projections(8, 16, np.random.default_rng(0))
    batch = next(train.batches(4))
    view = teacher_view(teacher, batch, [2, 4])
    before = [x.item() for x in intermediate_losses(view, student.encode(batch), plan)]
    view.hidden[1] = np.full_like(view.hidden[2], 99.0)   # not referenced by the map
    after = [x.item() for x in intermediate_losses(view, student.encode(batch), plan)]
    assert before == after


def test_attention_head_mismatch_errors(world):
    train, _, t_cfg, s_cfg = world
    from dataclasses import replace
    teacher = Encoder(t_cfg, seed=0)
    student = Encoder(replace(s_cfg, num_heads=4), seed=0)
    plan = DistillPlan(map_layers(4, 2))
    plan.init_projections(8, 16)
    batch = next(train.batches(4))
    with pytest.raises(ValueError, match="head"):
        intermediate_losses(teacher.encode(batch), student.encode(batch), plan)


def test_prediction_loss_limits():
    z = np.array([[2.0, -1.0, 0.5]])
    big_t = prediction_loss(z, Tensor(-z), temperature=1e6).item()
    assert big_t == pytest.approx(math.log(3), abs=1e-6)
    one_hot = prediction_loss(np.array([[80.0, 0.0, 0.0]]), Tensor(np.zeros((1, 3)))).item()
    assert one_hot == pytest.approx(math.log(3), abs=1e-9)


@given(st.floats(-50, 50), st.floats(0.5, 5.0))
def test_prediction_loss_shift_invariant(c, T):
    z = np.array([[1.0, -2.0, 0.3], [0.0, 0.4, 0.1]])
    s = Tensor(np.array([[0.2, 0.1, -0.5], [1.0, 0.0, 0.0]]))
    assert prediction_loss(z + c, s, T).item() == pytest.approx(prediction_loss(z, s, T).item(), abs=1e-9)


def test_tk_loss_oracles():
    assert tk_loss(np.array([[1.0, 0.0]]), Tensor([[0.5]]), Tensor([[1.0], [0.0]])).item() == pytest.approx(0.25)
    rng = np.random.default_rng(0)
    tv, W = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert tk_loss(tv, Tensor(tv @ W), Tensor(W)).item() == pytest.approx(0.0, abs=1e-15)
    assert tk_loss(tv, Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2)))).item() == 0.0
    with pytest.raises(ValueError):
        tk_loss(tv, Tensor(np.zeros((3, 3))), Tensor(W))


def test_expertise_weight_values():
    logits = np.array([[2.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    lam = expertise_weights(logits, [0, 1, 1], [1.0, 1.0, 0.0])
    assert abs(lam[0] - 1.0) <= 1e-12
    assert abs(lam[1] - 2 / (math.e + 1)) <= 1e-12
    assert lam[2] == 0.5


@given(st.floats(0.05, 1.0))
def test_expertise_weight_bounds(t):
    right, wrong = expertise_weights(np.array([[1.0, 0.0], [1.0, 0.0]]), [0, 1], [t, t])
    lo = (1 + 0.05) / (math.e + 1)
    assert lo - 1e-12 <= wrong < right <= 1.0 + 1e-12


def test_expertise_squared_mode_uses_label_distance():
    lam = expertise_weights(np.array([[0.0, 0.0, 5.0]]), [0], [1.0], err_mode="squared")
    assert lam[0] == pytest.approx(2 / (math.exp(4) + 1))


def test_meta_distill_arithmetic():
    a, b, c = 0.7, 1.3, 0.05
    embd, hidn, attn = Tensor([0.2, 0.3]), Tensor([0.4, 0.6]), Tensor([0.1, 0.4])
    got = meta_distill_loss("intermediate", [1.0, 0.5], embd, hidn, attn, tk=Tensor(c / 0.3), gamma2=0.3).item()
    assert got == pytest.approx((a + 0.5 * b) / 2 + c)
    naive = meta_distill_loss("intermediate", [1.0, 1.0], embd, hidn, attn, tk=Tensor(5.0), gamma2=0.0).item()
    assert naive == pytest.approx((a + b) / 2)
    tk_only = meta_distill_loss("intermediate", [0.0, 0.0], embd, hidn, attn, tk=Tensor(0.8), gamma2=1.0).item()
    assert tk_only == pytest.approx(0.8)
    pred = meta_distill_loss("prediction", [1.0, 0.5], pred=Tensor([0.4, 0.2])).item()
    assert pred == pytest.approx((0.4 + 0.1) / 2)


@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_phase_one_loss_affine_in_gamma2(g1, g2):
    embd, hidn, attn, tk = Tensor([0.2]), Tensor([0.4]), Tensor([0.1]), Tensor(0.9)

    def loss(g):
        return meta_distill_loss("intermediate", [0.8], embd, hidn, attn, tk=tk, gamma2=g).item()
    assert loss(g2) - loss(g1) == pytest.approx((g2 - g1) * 0.9, abs=1e-12)


def test_gradients_never_reach_teacher(world):
    train, _, t_cfg, s_cfg = world
    teacher, student = Encoder(t_cfg, seed=0), Encoder(s_cfg, seed=1)
    plan = DistillPlan(map_layers(4, 2))
    plan.init_projections(8, 16, np.random.default_rng(0))
    batch = next(train.batches(6))
    tt, st_ = teacher.encode(batch), student.encode(batch)
    embd, hidn, attn = intermediate_losses_per_sample(tt, st_, plan)
    tk = tk_loss(tt.transfer_vec, st_.transfer_vec, plan.projections.transfer)
    loss = meta_distill_loss("intermediate", np.ones(6), embd, hidn, attn, tk=tk, gamma2=0.3)
    loss = loss + prediction_loss(tt.class_logits, st_.class_logits)
    loss.backward()
    assert all(p.grad is None for p in teacher.parameters())
    # the student's domain classifier plays no part in distillation
    assert all(p.grad is not None for n, p in student.named_parameters() if not n.startswith("subnet.classifier"))


def test_teacher_cache_matches_live_forward(world):
    train, _, t_cfg, _ = world
    teacher = Encoder(t_cfg, seed=0)
    cache = TeacherCache(teacher, train, [2, 4], batch_size=7)
    for batch in train.batches(5, np.random.default_rng(0)):
        live, cached = teacher_view(teacher, batch, [2, 4]), cache.view(batch)
        valid = batch.mask.astype(bool)
        assert np.allclose(live.class_logits, cached.class_logits, atol=1e-10)
        assert np.allclose(live.hidden[4][valid], cached.hidden[4][valid], atol=1e-10)
        pair = valid[:, None, :, None] & valid[:, None, None, :]
        pair = np.broadcast_to(pair, live.attention[2].shape)
        assert np.allclose(live.attention[2][pair], cached.attention[2][pair], atol=1e-10)


def test_dataset_weights_without_labels(world):
    train, _, t_cfg, _ = world
    from metakd.teacher import PrototypeTable
    table = PrototypeTable({}, 0.5, scores={train.ids[0]: 0.6, "other": 0.2})
    unlabeled = Dataset([ex.__class__(ex.id, ex.text, None, ex.domain) for ex in train.examples],
                        train.vocab, train.domain_index, 32)
    lam = dataset_expertise_weights(Encoder(t_cfg), unlabeled, table)
    assert lam[train.ids[0]] == pytest.approx(0.8)
    assert lam[train.ids[1]] == pytest.approx((1 + 0.4) / 2)


def test_distill_freezes_teacher_and_learns(world):
    train, dev, t_cfg, s_cfg = world
    teacher, student = Encoder(t_cfg, seed=0), Encoder(s_cfg, seed=1)
    before = param_bytes(teacher)
    plan = DistillPlan.for_models(teacher, student)
    res = distill(teacher, student, train, plan, DistillConfig(int_epochs=3, pred_epochs=2, min_steps=0), dev=dev)
    assert param_bytes(teacher) == before
    phases = [h["phase"] for h in res.history]
    assert phases == ["intermediate"] * 3 + ["prediction"] * 2
    first, last = res.history[0]["loss"], res.history[2]["loss"]
    assert last < first


def test_self_distillation_run_stays_near_fixed_point(world):
    train, _, t_cfg, _ = world
    teacher = Encoder(t_cfg, seed=0)
    student = teacher.clone()
    plan = DistillPlan(map_layers(4, 4), gamma2=0.3)
    proj = plan.init_projections(16, 16, identity=True)
    batch = next(train.batches(len(train)))
    tt, st_ = teacher.eval().encode(batch), student.eval().encode(batch)
    start = tk_loss(tt.transfer_vec, st_.transfer_vec, proj.transfer).item() * 0.3
    res = distill(teacher, student, train, plan, DistillConfig(int_epochs=2, pred_epochs=1, min_steps=0))
    assert res.history[0]["loss"] == pytest.approx(start, abs=1e-6)
    assert all(math.isfinite(h["loss"]) and h["loss"] < 1.0 for h in res.history)


def test_distill_is_deterministic(world):
    train, _, t_cfg, s_cfg = world
    teacher = Encoder(t_cfg, seed=0)
    runs = []
    for _ in range(2):
        student = Encoder(s_cfg, seed=1)
        distill(teacher, student, train, DistillPlan(map_layers(4, 2)), DistillConfig(int_epochs=1, pred_epochs=1))
        runs.append(param_bytes(student))
    assert runs[0] == runs[1]


def test_mtn_kd_with_identical_teachers_equals_single(world):
    train, _, t_cfg, s_cfg = world
    teacher = Encoder(t_cfg, seed=0)
    cfg = DistillConfig(int_epochs=1, pred_epochs=2, min_steps=0)
    single = distill(teacher, Encoder(s_cfg, seed=1), train,
                     DistillPlan(map_layers(4, 2), use_transfer=False), cfg).student
    multi = mtn_kd_distill([teacher, teacher.clone()], teacher, Encoder(s_cfg, seed=1), train,
                           DistillPlan(map_layers(4, 2)), cfg).student
    for (_, a), (_, b) in zip(single.named_parameters(), multi.named_parameters()):
        assert np.allclose(a.data, b.data, atol=1e-12)


def test_ensemble_target_is_mean_distribution():
    p = softened(np.array([[2.0, 0.0]]), 1.0)
    q = softened(np.array([[-1.0, 1.0]]), 1.0)
    target = np.mean([p, q], axis=0)
    assert np.allclose(target, (p + q) / 2) and np.allclose(target.sum(-1), 1.0)


def test_mtn_kd_errors_and_agreement(world):
    train, _, t_cfg, s_cfg = world
    from dataclasses import replace
    a, b = Encoder(t_cfg, seed=0), Encoder(t_cfg, seed=5)
    with pytest.raises(ValueError):
        mtn_kd_distill([a], a, Encoder(s_cfg), train, DistillPlan(map_layers(4, 2)), DistillConfig())
    odd = Encoder(replace(t_cfg, num_classes=3), seed=0)
    with pytest.raises(ValueError, match="class count"):
        mtn_kd_distill([a, odd], a, Encoder(s_cfg), train, DistillPlan(map_layers(4, 2)), DistillConfig())
    rates = agreement_rates([a, b], train)
    assert len(rates) == 2 and all(0.0 <= r <= 1.0 for r in rates)
