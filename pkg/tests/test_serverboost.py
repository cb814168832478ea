from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny
from incongrufl import datagen as dg
from incongrufl import numerics as nx
from incongrufl import serverboost as sb
from incongrufl.fedsim import fedavg, mean_pairwise_l2, prepare_data, run_federation
from incongrufl.fusion import as_tensors, collate, forward_batch
from incongrufl.numerics import Tensor

SPEC = sb.DistillSpec(steps=4, batch=8, lr=1e-2)


@pytest.fixture(scope="module")
def trained():
    """Client models after a few rounds of an incongruent tiny federation."""
    return run_federation(tiny(rounds=2, gamma=0.1))


def server_data(plan, modality="IT", n=24, seed=0):
    d = plan.data
    pool = dg.generate_synthetic(n, K=d.K, d_v=d.d_v, vocab=d.vocab, N_max=d.N_max, seed=seed + 99)
    samples = [replace(dg.restrict_modality(s, modality), labels=None) for s in pool]
    return sb.ServerDataset(collate(samples, d.N_max, d.vocab), dg.ServerModality(modality))


class TestFedDF:
    def test_teachers_not_modified(self, trained):
        teachers = trained.client_params
        before = [t.data.tobytes() for t in teachers]
        sb.feddf_distill(fedavg(teachers), teachers, server_data(trained.plan), SPEC,
                         trained.plan.model_config, "isolated", np.random.default_rng(0))
        assert [t.data.tobytes() for t in teachers] == before

    def test_teacher_order_invariant(self, trained):
        teachers = trained.client_params
        cfg, data = trained.plan.model_config, server_data(trained.plan)
        student = fedavg(teachers)
        a = sb.feddf_distill(student, teachers, data, SPEC, cfg, "bi", np.random.default_rng(1))
        b = sb.feddf_distill(student, teachers[::-1], data, SPEC, cfg, "bi", np.random.default_rng(1))
        assert a.data.tobytes() == b.data.tobytes()

    def test_single_teacher_allowed(self, trained):
        t = trained.client_params[:1]
        out = sb.feddf_distill(t[0], t, server_data(trained.plan), SPEC, trained.plan.model_config,
                               "isolated", np.random.default_rng(0))
        assert out.data.shape == t[0].data.shape

    def test_distillation_lowers_kl_to_teachers(self, trained):
        cfg, data = trained.plan.model_config, server_data(trained.plan, n=48)
        teachers = trained.client_params

        def kl(student):
            with nx.no_grad():
                avg = np.mean([forward_batch(as_tensors(t.to_params()), data.batch, cfg, "bi").logits.data
                               for t in teachers], axis=0)
                s = forward_batch(as_tensors(student.to_params()), data.batch, cfg, "bi").logits
                return float(nx.kl_softmax(avg, s).data)

        start = fedavg(teachers)
        spec = sb.DistillSpec(steps=30, batch=16, lr=1e-2)
        out = sb.feddf_distill(start, teachers, data, spec, cfg, "bi", np.random.default_rng(0))
        assert kl(out) < kl(start)

    def test_zero_lr_returns_student(self, trained):
        student = fedavg(trained.client_params)
        out = sb.feddf_distill(student, trained.client_params, server_data(trained.plan),
                               sb.DistillSpec(steps=1, lr=0.0), trained.plan.model_config, "isolated",
                               np.random.default_rng(0))
        assert out.data.tobytes() == student.data.tobytes()

    def test_teachers_equal_to_student_give_zero_loss(self, trained):
        data = server_data(trained.plan)
        with nx.no_grad():
            z = forward_batch(as_tensors(trained.global_params.to_params()), data.batch,
                              trained.plan.model_config, "bi").logits
        assert abs(float(sb.distill_loss(z.data, z).data)) < 1e-15

    def test_opposite_teachers_cancel(self):
        z = np.random.default_rng(0).standard_normal((4, 14))
        avg = np.sort([z, -z], axis=0).mean(axis=0)
        assert not avg.any()

    def test_empty_server_data(self, trained):
        empty = server_data(trained.plan)
        empty = sb.ServerDataset(empty.batch.take(np.array([], dtype=int)), empty.modality)
        with pytest.raises(dg.ConfigError):
            sb.feddf_distill(trained.global_params, trained.client_params, empty, SPEC,
                             trained.plan.model_config, "isolated", np.random.default_rng(0))


class TestLoot:
    @pytest.mark.parametrize("scale", [2.0, 0.5, 1024.0])
    def test_cosine_scale_invariance_exact(self, scale):
        rng = np.random.default_rng(5)
        s = rng.standard_normal(8)
        teachers = [rng.standard_normal(8) for _ in range(3)]
        base = float(sb.loot_loss(Tensor(s), teachers).data)
        scaled = float(sb.loot_loss(Tensor(s), [scale * t for t in teachers]).data)
        assert scaled == base

    def test_cosine_scale_invariance_any_positive_scale(self):
        rng = np.random.default_rng(6)
        s, t = rng.standard_normal(8), rng.standard_normal(8)
        for c in (0.3, 7.1, 1e5):
            assert float(sb.loot_loss(Tensor(s), [c * t]).data) == pytest.approx(
                float(sb.loot_loss(Tensor(s), [t]).data), abs=1e-15)

    def test_aligned_student_scores_minus_one(self):
        t = np.array([1.0, 2.0, 3.0])
        assert float(sb.loot_loss(Tensor(2 * t), [t, 3 * t]).data) == pytest.approx(-1.0, abs=1e-15)

    def test_teachers_not_modified(self, trained):
        before = [t.data.tobytes() for t in trained.client_params]
        sb.loot_finetune(trained.client_params, server_data(trained.plan), SPEC,
                         trained.plan.model_config, "isolated", np.random.default_rng(0))
        assert [t.data.tobytes() for t in trained.client_params] == before

    def test_needs_two_models(self, trained):
        with pytest.raises(dg.ConfigError):
            sb.loot_finetune(trained.client_params[:1], server_data(trained.plan), SPEC,
                             trained.plan.model_config, "isolated", np.random.default_rng(0))

    def test_reduces_pairwise_distance(self):
        drops = []
        for seed in range(5):
            res = run_federation(tiny(rounds=2, gamma=0.1, seed=seed))
            tuned = sb.loot_finetune(res.client_params, server_data(res.plan, seed=seed),
                                     sb.DistillSpec(batch=16), res.plan.model_config, "isolated",
                                     np.random.default_rng(seed))
            drops.append(mean_pairwise_l2(res.client_params) - mean_pairwise_l2(tuned))
        assert np.median(drops) > 0

    def test_identical_models_are_a_fixed_point(self, trained):
        models = [trained.global_params] * 3
        data = server_data(trained.plan)
        with nx.no_grad():
            emb = forward_batch(as_tensors(models[0].to_params()), data.batch,
                                trained.plan.model_config, "isolated").pooled.data.mean(axis=0)
        assert float(sb.loot_loss(Tensor(emb), [emb, emb]).data) == pytest.approx(-1.0, abs=1e-15)
        tuned = sb.loot_finetune(models, data, sb.DistillSpec(steps=10, batch=16),
                                 trained.plan.model_config, "isolated", np.random.default_rng(0))
        for t in tuned:
            assert np.max(np.abs(t.data - models[0].data)) < 1e-6

    def test_two_models_student_similarity_rises(self, trained):
        cfg, data = trained.plan.model_config, server_data(trained.plan, n=48)
        a, b = trained.client_params[:2]
        Pb = as_tensors(b.to_params())

        def cos_to_b(p):
            with nx.no_grad():
                ea = forward_batch(as_tensors(p.to_params()), data.batch, cfg, "isolated").pooled.data.mean(0)
                eb = forward_batch(Pb, data.batch, cfg, "isolated").pooled.data.mean(0)
            return float(nx.cosine_sim(Tensor(ea), eb).data)

        tuned = sb.loot_finetune([a, b], data, sb.DistillSpec(steps=40, batch=16, lr=0.1), cfg,
                                 "isolated", np.random.default_rng(0))[0]
        assert cos_to_b(tuned) > cos_to_b(a)


class TestHook:
    def test_none_is_fedavg(self, trained):
        g, clients = sb.apply_server_hook(sb.ServerSpec(), trained.client_params, [1, 2, 3], None,
                                          trained.plan.model_config, "isolated", np.random.default_rng(0))
        assert g.data.tobytes() == fedavg(trained.client_params, [1, 2, 3]).data.tobytes()
        assert clients is trained.client_params

    def test_modality_mismatch(self, trained):
        spec = sb.ServerSpec(kind="feddf", modality="T")
        with pytest.raises(dg.ConfigError):
            sb.apply_server_hook(spec, trained.client_params, [1, 1, 1], server_data(trained.plan, "I"),
                                 trained.plan.model_config, "isolated", np.random.default_rng(0))

    def test_missing_server_data(self, trained):
        with pytest.raises(dg.ConfigError):
            sb.apply_server_hook(sb.ServerSpec(kind="loot"), trained.client_params, [1, 1, 1], None,
                                 trained.plan.model_config, "isolated", np.random.default_rng(0))

    @pytest.mark.parametrize("kind", ["feddf", "loot"])
    @pytest.mark.parametrize("modality", ["I", "T", "IT"])
    def test_federation_with_server_method(self, kind, modality):
        plan = tiny(server=sb.ServerSpec(kind=kind, modality=modality, fraction=0.1, distill=SPEC))
        data = prepare_data(plan)
        assert len(data.server) == 16
        res = run_federation(plan, data)
        assert len(res.reports) == plan.rounds

    def test_cross_domain_server_data(self):
        plan = tiny(server=sb.ServerSpec(kind="feddf", fraction=0.1, same_domain=False, distill=SPEC))
        data = prepare_data(plan)
        assert len(data.server) == 16 and len(data.train) == 144
        assert all(s.labels is None for s in data.server)


@pytest.mark.parametrize("kw", [dict(steps=0), dict(kl_direction="sideways")])
def test_distill_spec_validation(kw):
    with pytest.raises(dg.ConfigError):
        sb.DistillSpec(**kw)
