"""Adversarial, virtual adversarial and distillation losses."""

import math

import numpy as np
import pytest

from convqa import tensor as T
from convqa.errors import ContractError
from convqa.qa_model import supervised_loss
from convqa.regularizers import (
    STUDENT,
    LossWeights,
    PerturbationConfig,
    Perturbations,
    TeacherLabel,
    TeacherLabelSet,
    at_perturb,
    kd_loss,
    normalize_rows,
    teacher_label,
    total_loss,
    vat_direction,
    vat_perturb,
)
from convqa.tensor import Tensor

from conftest import tiny_model
from gradutil import sampled_gradcheck


def pick(examples, rng, n=2):
    return [examples[i] for i in rng.choice(len(examples), n, replace=False)]


class TestNormalizeRows:
    def test_norms(self, rng):
        g = rng.normal(size=(7, 5))
        g[3] = 0.0
        r = normalize_rows(g, 0.25)
        norms = np.linalg.norm(r, axis=1)
        assert np.all(np.abs(np.delete(norms, 3) - 0.25) < 1e-12)
        assert norms[3] == 0.0

    def test_direction_preserved(self, rng):
        g = rng.normal(size=(3, 4))
        r = at_perturb(g, 2.0)
        cos = (r * g).sum(1) / (np.linalg.norm(r, axis=1) * np.linalg.norm(g, axis=1))
        np.testing.assert_allclose(cos, 1.0)

    def test_tiny_gradient_still_normalised(self):
        r = at_perturb(np.array([[1e-200, 0.0]]), 1.0)
        assert np.linalg.norm(r) == pytest.approx(1.0, abs=1e-12)

    def test_negative_epsilon(self):
        with pytest.raises(ContractError):
            PerturbationConfig(epsilon=-1.0)


class TestVatDirection:
    def test_toy_model_norm_and_determinism(self, rng):
        w = rng.normal(size=(3, 4))
        v = rng.normal(size=(2, 3))

        def forward(e):
            return [T.softmax(T.tsum(T.matmul(e, Tensor(w)), axis=0))]

        clean = [T.softmax(Tensor((v @ w).sum(0))).data]
        d1 = vat_direction(forward, v, clean, 1e-3, 0.5, np.random.default_rng(7))
        d2 = vat_direction(forward, v, clean, 1e-3, 0.5, np.random.default_rng(7))
        np.testing.assert_array_equal(d1, d2)
        np.testing.assert_allclose(np.linalg.norm(d1, axis=1), 0.5, atol=1e-9)

    def test_direction_follows_kl_gradient(self, rng):
        # one-token softmax with logits = v @ w; the KL gradient at the noisy
        # point equals (q - p) @ w^T, which the direction must be parallel to
        w = rng.normal(size=(3, 4))
        v = rng.normal(size=(1, 3))
        p = T.softmax(Tensor(v[0] @ w)).data

        def forward(e):
            return [T.softmax(T.reshape(T.matmul(e, Tensor(w)), (4,)))]

        noise = np.random.default_rng(3).standard_normal(v.shape)
        q = T.softmax(Tensor((v + 1e-3 * noise)[0] @ w)).data
        expected = (q - p) @ w.T
        d = vat_direction(forward, v, [p], 1e-3, 1.0, np.random.default_rng(3))
        np.testing.assert_allclose(d[0], expected / np.linalg.norm(expected), atol=1e-8)

    def test_model_perturbation_norm(self, small_examples, small_tokenizer):
        model = tiny_model(len(small_tokenizer))
        ex = small_examples[0]
        r = vat_perturb(ex, model, 1e-3, 0.7, seed=5)
        assert r.shape == (ex.length, model.config.hidden_dim)
        np.testing.assert_allclose(np.linalg.norm(r, axis=1), 0.7, atol=1e-9)


class TestTotalLoss:
    def test_perturbation_norms(self, small_examples, small_tokenizer):
        for trial in range(5):
            rng = np.random.default_rng(trial)
            model = tiny_model(len(small_tokenizer), seed=trial)
            eps = float(rng.uniform(0.01, 2.0))
            _, used = total_loss(pick(small_examples, rng, 3), model, LossWeights(), perturbation=PerturbationConfig(eps),
                                 seed=trial)
            for r in used.at + used.vat:
                assert np.all(np.abs(np.linalg.norm(r, axis=1) - eps) < 1e-9)

    def test_zero_epsilon_reduces_to_supervised(self, small_examples, small_tokenizer):
        model = tiny_model(len(small_tokenizer))
        batch = small_examples[:3]
        supervised = supervised_loss([model.forward(e) for e in batch], batch, 5.0).item()
        zero = PerturbationConfig(0.0)
        bd, _ = total_loss(batch, model, LossWeights(beta2=0.0), perturbation=zero)
        assert abs(bd.total.item() - supervised) < 1e-12
        assert bd.vat == 0.0
        bd, _ = total_loss(batch, model, LossWeights(), perturbation=zero)
        # with the AT term on, it evaluates the same clean loss a second time
        assert abs(bd.at - supervised) < 1e-12 and bd.vat == 0.0
        assert abs(bd.total.item() - 2 * supervised) < 1e-12

    def test_breakdown_sums(self, small_examples, small_tokenizer):
        model = tiny_model(len(small_tokenizer))
        w = LossWeights(beta1=2.0, beta2=0.5, beta3=3.0)
        bd, _ = total_loss(small_examples[:2], model, w, perturbation=PerturbationConfig(0.3))
        assert bd.total.item() == pytest.approx(bd.base + 2.0 * bd.rationale + 0.5 * bd.at + 3.0 * bd.vat, abs=1e-12)
        assert bd.vat >= 0.0 and bd.at > 0.0

    def test_seed_controls_vat(self, small_examples, small_tokenizer):
        model = tiny_model(len(small_tokenizer))
        a, ua = total_loss(small_examples[:2], model, LossWeights(), seed=1)
        b, ub = total_loss(small_examples[:2], model, LossWeights(), seed=1)
        c, uc = total_loss(small_examples[:2], model, LossWeights(), seed=2)
        assert a.total.item() == b.total.item()
        np.testing.assert_array_equal(ua.vat[0], ub.vat[0])
        assert not np.array_equal(ua.vat[0], uc.vat[0])

    @pytest.mark.parametrize("weights", [LossWeights(), LossWeights(beta1=0.0, beta3=0.0), LossWeights(beta2=0.0)])
    def test_gradient_with_fixed_perturbations(self, small_examples, small_tokenizer, weights):
        rng = np.random.default_rng(11)
        model = tiny_model(len(small_tokenizer))
        batch = pick(small_examples, rng)
        cfg = PerturbationConfig(0.1)
        _, used = total_loss(batch, model, weights, perturbation=cfg, seed=4)

        def fn():
            return total_loss(batch, model, weights, perturbation=cfg, fixed=used)[0].total

        assert sampled_gradcheck(fn, list(model.params.values()), rng) < 1e-4

    def test_bad_mode(self, small_examples, small_tokenizer):
        model = tiny_model(len(small_tokenizer))
        with pytest.raises(ContractError):
            total_loss(small_examples[:1], model, LossWeights(), mode="pupil")
        with pytest.raises(ContractError):
            total_loss(small_examples[:1], model, LossWeights(), mode=STUDENT)
        with pytest.raises(ContractError):
            total_loss([], model, LossWeights())


def labels_for(model, examples):
    return {e.example_id: TeacherLabel(model.forward(e).p_start.data, model.forward(e).p_end.data) for e in examples}


class TestDistillation:
    def test_teacher_average(self):
        a = (np.array([0.5, 0.5, 0.0]), np.array([1.0, 0.0, 0.0]))
        b = (np.array([0.1, 0.3, 0.6]), np.array([0.0, 0.0, 1.0]))
        lab = teacher_label([a, b])
        np.testing.assert_allclose(lab.p_start, [0.3, 0.4, 0.3])
        np.testing.assert_allclose(lab.p_end, [0.5, 0.0, 0.5])
        assert lab.p_start.sum() == pytest.approx(1.0)

    def test_teacher_lengths_must_agree(self):
        with pytest.raises(ContractError):
            teacher_label([(np.ones(3) / 3, np.ones(3) / 3), (np.ones(4) / 4, np.ones(4) / 4)])
        with pytest.raises(ContractError):
            teacher_label([])

    def test_kd_value_oracle(self, small_examples, small_tokenizer):
        model = tiny_model(len(small_tokenizer))
        teacher = tiny_model(len(small_tokenizer), seed=9)
        batch = small_examples[:3]
        labels = labels_for(teacher, batch)
        outs = [model.forward(e) for e in batch]
        expected = 0.0
        for o, e in zip(outs, batch):
            lab = labels[e.example_id]
            n = lab.length
            # masked positions carry zero mass on both sides: 0 log 0 = 0
            ce = -sum(q * math.log(p) for lab_p, out_p in ((lab.p_start, o.p_start.data), (lab.p_end, o.p_end.data))
                      for q, p in zip(lab_p, out_p) if q > 0)
            expected += ce / (2 * n)
        got = kd_loss(outs, [labels[e.example_id] for e in batch]).item()
        assert got == pytest.approx(expected / 3, rel=1e-12)

    def test_kd_minimised_by_teacher(self, small_examples, small_tokenizer):
        """Soft cross-entropy is smallest when the student equals the teacher."""
        teacher = tiny_model(len(small_tokenizer), seed=9)
        other = tiny_model(len(small_tokenizer), seed=10)
        batch = small_examples[:3]
        labs = [labels_for(teacher, batch)[e.example_id] for e in batch]
        self_ce = kd_loss([teacher.forward(e) for e in batch], labs).item()
        other_ce = kd_loss([other.forward(e) for e in batch], labs).item()
        assert self_ce < other_ce

    def test_length_mismatch(self, small_examples, small_tokenizer):
        model = tiny_model(len(small_tokenizer))
        out = model.forward(small_examples[0])
        bad = TeacherLabel(np.ones(3) / 3, np.ones(3) / 3)
        with pytest.raises(ContractError):
            kd_loss([out], [bad])

    def test_student_total_includes_kd(self, small_examples, small_tokenizer):
        model = tiny_model(len(small_tokenizer))
        teacher = tiny_model(len(small_tokenizer), seed=9)
        batch = small_examples[:2]
        labels = labels_for(teacher, small_examples)
        w = LossWeights(beta1=0.0, beta2=0.0, beta3=0.0, beta4=1.0)
        bd, _ = total_loss(batch, model, w, mode=STUDENT, teacher_labels=labels)
        assert bd.total.item() == pytest.approx(bd.base + bd.kd, abs=1e-12)

        def fn():
            return total_loss(batch, model, w, mode=STUDENT, teacher_labels=labels)[0].total

        assert sampled_gradcheck(fn, list(model.params.values()), np.random.default_rng(0)) < 1e-4

    def test_label_set_round_trip(self, small_examples, small_tokenizer, tmp_path):
        model = tiny_model(len(small_tokenizer))
        labels = TeacherLabelSet(labels_for(model, small_examples[:4]))
        labels.save(tmp_path / "labels.jsonl", "abc")
        back = TeacherLabelSet.load(tmp_path / "labels.jsonl", "abc")
        assert sorted(back) == sorted(labels)
        for key in labels:
            np.testing.assert_array_equal(back[key].p_start, labels[key].p_start)
            np.testing.assert_array_equal(back[key].p_end, labels[key].p_end)
        with pytest.raises(ContractError):
            TeacherLabelSet.load(tmp_path / "labels.jsonl", "other")


def test_fixed_perturbations_are_reused(small_examples, small_tokenizer):
    model = tiny_model(len(small_tokenizer))
    batch = small_examples[:2]
    zeros = Perturbations(
        at=[np.zeros((e.length, model.config.hidden_dim)) for e in batch],
        vat=[np.zeros((e.length, model.config.hidden_dim)) for e in batch],
        vat_targets=[(model.forward(e).p_start.data, model.forward(e).p_end.data) for e in batch],
    )
    bd, used = total_loss(batch, model, LossWeights(), fixed=zeros)
    assert used.at is zeros.at and used.vat is zeros.vat
    assert bd.vat == pytest.approx(0.0, abs=1e-12)
    assert bd.at == pytest.approx(bd.base + 5.0 * bd.rationale, abs=1e-12)


def test_vat_ignores_gold_labels(small_examples, small_tokenizer):
    import dataclasses

    from convqa.data import GoldLabel, UNKNOWN

    model = tiny_model(len(small_tokenizer))
    batch = small_examples[:2]
    relabelled = [
        dataclasses.replace(e, gold=GoldLabel(UNKNOWN, e.length + 2, e.length + 2, np.zeros(e.length)))
        for e in batch
    ]
    w = LossWeights(beta1=0.0, beta2=0.0)
    a, _ = total_loss(batch, model, w, seed=3)
    b, _ = total_loss(relabelled, model, w, seed=3)
    assert a.vat == b.vat
    assert a.base != b.base


def test_kd_minus_entropy_is_kl(small_examples, small_tokenizer):
    teacher = tiny_model(len(small_tokenizer), seed=9)
    student = tiny_model(len(small_tokenizer), seed=4)
    for ex in small_examples[:4]:
        t = teacher.forward(ex)
        lab = TeacherLabel(t.p_start.data, t.p_end.data)

        def entropy(p):
            p = p[p > 0]
            return -(p * np.log(p)).sum()

        h = (entropy(lab.p_start) + entropy(lab.p_end)) / (2 * lab.length)
        assert kd_loss([student.forward(ex)], [lab]).item() - h >= -1e-12
        assert abs(kd_loss([t], [lab]).item() - h) < 1e-12
