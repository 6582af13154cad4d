import numpy as np
import pytest

from selectkd.analysis import (
    LandscapeLoss, fd_gradient, fixed_point_study, grad_check, landscape_probe, noisy_setup, output_dir,
    relative_error, row_normalized_direction, row_tv, spec_decode_sim, tar_study, tar_verdict,
)
from selectkd.divergence import FKL, RKL, SKL, SRKL, grad_logits
from selectkd.errors import ParameterError
from selectkd.models import NGramModel, random_teacher
from selectkd.prob_core import softmax
from selectkd.trainer import TrainingConfig, run_training, teacher_pool
from selectkd.verifier import Mode, VerifierConfig


class TestGradCheck:
    @pytest.mark.parametrize("kind", [FKL, SRKL(0.3)], ids=lambda k: k.label())
    def test_passes(self, kind):
        rep = grad_check(kind, 100, 6)
        assert rep.passed and rep.max_rel_error < 1e-6 and not rep.failures

    def test_fixed_point(self):
        z = np.random.default_rng(0).normal(size=6)
        p = softmax(z)
        assert np.linalg.norm(grad_logits(FKL, p, z)) < 1e-9
        assert np.linalg.norm(fd_gradient(FKL, p, z)) < 1e-6

    def test_relative_error_floor(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert relative_error(np.array([1e-12, 0.0]), np.zeros(2)) == pytest.approx(1e-4)

    def test_bad_args(self):
        with pytest.raises(ParameterError):
            grad_check(FKL, trials=0)
        with pytest.raises(ParameterError):
            grad_check(FKL, epsilon=0.1)

    def test_deterministic(self):
        assert grad_check(RKL, 20, seed=5).to_dict() == grad_check(RKL, 20, seed=5).to_dict()


class TestFixedPoint:
    def test_report_only(self):
        t = random_teacher(5, 1, 1.0, 0)
        s = NGramModel.uniform(5, 1)
        rep = fixed_point_study([FKL, RKL], t, TrainingConfig(), s, steps=0)
        np.testing.assert_allclose(rep.row_tv["fkl"], row_tv(s, t), rtol=0, atol=0)
        assert rep.mean_tv["fkl"] == pytest.approx(row_tv(s, t).mean())
        assert rep.spread == 0.0

    def test_short_run_improves(self):
        t = random_teacher(4, 1, 1.0, 0)
        cfg = TrainingConfig(steps=300, batch_size=8, seq_length=8, lr=2.0, seed=1)
        rep = fixed_point_study([FKL, RKL], t, cfg)
        start = row_tv(NGramModel.uniform(4, 1), t).mean()
        assert all(v < start / 5 for v in rep.mean_tv.values())
        assert rep.steps == 300

    def test_workers_match_serial(self):
        t = random_teacher(4, 1, 1.0, 0)
        cfg = TrainingConfig(steps=50, batch_size=4, seq_length=4, seed=1)
        a = fixed_point_study([FKL, SKL(0.1)], t, cfg)
        b = fixed_point_study([FKL, SKL(0.1)], t, cfg, workers=2)
        for k in a.kinds:
            np.testing.assert_allclose(a.row_tv[k], b.row_tv[k], rtol=0, atol=1e-12)

    def test_empty_kinds(self):
        with pytest.raises(ParameterError):
            fixed_point_study([], random_teacher(4, 1, 1.0, 0), TrainingConfig())


class TestTar:
    def test_verdict_synthetic(self):
        up = np.clip(np.linspace(0.3, 1.0, 200), 0, 1)
        assert tar_verdict(up).passed
        dip = up.copy()
        dip[100:140] -= 0.2
        rep = tar_verdict(dip)
        assert not rep.passed and rep.max_drawdown > 0.02

    def test_verdict_flat(self):
        rep = tar_verdict(np.full(100, 0.4))
        assert rep.passed and rep.slope == 0.0 and rep.max_drawdown == 0.0

    def test_pinned_at_teacher(self):
        t = random_teacher(8, 1, 0.5, 0)
        cfg = TrainingConfig(steps=50, verifier=VerifierConfig(Mode.SPEC, 5, 0.01))
        rep, trace, _ = tar_study(cfg, t, t.copy())
        assert np.all(trace.tar == 1.0)
        assert rep.passed

    def test_lr_zero_constant(self):
        t = random_teacher(6, 0, 0.5, 0)
        s = random_teacher(6, 0, 0.5, 1)
        cfg = TrainingConfig(steps=40, lr=0.0, verifier=VerifierConfig(Mode.GREEDY, 2, 0.01))
        rep, trace, final = tar_study(cfg, t, s)
        assert len(set(trace.tar.tolist())) == 1
        np.testing.assert_array_equal(final.logits, s.logits)

    def test_needs_discrete_verifier(self):
        t = random_teacher(4, 1, 1.0, 0)
        with pytest.raises(ParameterError):
            tar_study(TrainingConfig(verifier=None), t, t)


class TestLandscape:
    def setup_method(self):
        self.teacher = random_teacher(6, 1, 1.0, 2)
        cfg = TrainingConfig(pool_size=64)
        self.pool = teacher_pool(self.teacher, cfg, np.random.default_rng(0))

    def test_zero_radius_column(self):
        s = random_teacher(6, 1, 1.0, 3)
        loss = LandscapeLoss.from_tokens(self.teacher, s, self.pool, 1)
        probe = landscape_probe(s, loss, 4, [0.0, 0.5, 1.0], seed=1)
        assert np.all(probe.losses[:, 0] == loss(s.logits))

    def test_symmetric_at_optimum(self):
        s = self.teacher.copy()
        loss = LandscapeLoss.from_tokens(self.teacher, s, self.pool, 1)
        assert np.abs(loss.gradient(s.logits)).max() < 1e-12
        r = 0.01
        probe = landscape_probe(s, loss, 6, [-r, 0.0, r], seed=4)
        base = probe.losses[:, 1]
        rise = probe.losses[:, 2] - base
        assert np.all(np.abs(probe.losses[:, 2] - probe.losses[:, 0]) < 0.1 * (rise + 1e-9))

    def test_gradient_matches_fd(self):
        s = random_teacher(6, 1, 1.0, 5)
        loss = LandscapeLoss.from_tokens(self.teacher, s, self.pool, 1, SKL(0.2))
        g = loss.gradient(s.logits)
        h = 1e-6
        for r, c in [(0, 1), (3, 4), (5, 0)]:
            e = np.zeros_like(s.logits)
            e[r, c] = h
            fd = (loss(s.logits + e) - loss(s.logits - e)) / (2 * h)
            assert fd == pytest.approx(g[r, c], abs=1e-8)

    def test_direction_normalised(self):
        s = random_teacher(6, 1, 1.0, 3)
        d = row_normalized_direction(s.logits, 7)
        centred = s.logits - s.logits.mean(axis=1, keepdims=True)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), np.linalg.norm(centred, axis=1), rtol=1e-12)
        np.testing.assert_allclose(d.sum(axis=1), 0.0, atol=1e-12)
        np.testing.assert_array_equal(d, row_normalized_direction(s.logits, 7))

    def test_needs_two_directions(self):
        s = random_teacher(6, 1, 1.0, 3)
        with pytest.raises(ParameterError):
            landscape_probe(s, LandscapeLoss.from_tokens(self.teacher, s, self.pool, 1), 1)


class TestSpecSim:
    def test_self_drafting(self):
        t = random_teacher(8, 1, 0.5, 0)
        rep = spec_decode_sim(t, t, [[1], [2]], 4, 2000, np.random.default_rng(0))
        assert abs(rep.acceptance_rate - 1.0) < 1e-9
        assert rep.tokens_per_round == 5.0
        assert rep.speedup_estimate == pytest.approx(5.0 / 1.4)

    def test_uniform_vs_one_hot(self):
        V = 16
        logits = np.full((V, V), -60.0)
        logits[np.arange(V), (np.arange(V) * 5 + 3) % V] = 0.0
        target = NGramModel(V, 1, logits)
        drafter = NGramModel.uniform(V, 1)
        r = 1 / 16
        for gamma, rounds in [(1, 100_000), (4, 100_000)]:
            rep = spec_decode_sim(drafter, target, [[i] for i in range(8)], gamma, rounds, np.random.default_rng(1))
            assert rep.evaluated >= 100_000
            assert abs(rep.acceptance_rate - r) <= 3 * np.sqrt(r * (1 - r) / rep.evaluated)

    def test_streams_follow_target(self):
        # one-hot target: every emitted token is the target's forced successor
        V = 5
        logits = np.full((V, V), -60.0)
        logits[np.arange(V), (np.arange(V) + 1) % V] = 0.0
        target = NGramModel(V, 1, logits)
        rep = spec_decode_sim(random_teacher(V, 1, 1.0, 0), target, [[0]], 2, 300, np.random.default_rng(2))
        seq = [0] + rep.tokens[0].tolist()
        assert all(b == (a + 1) % V for a, b in zip(seq, seq[1:]))

    def test_transition_pvalues_uniform(self):
        # a correct sampler gives uniform goodness-of-fit p-values across replicates
        from scipy.stats import chi2, kstest

        V = 6
        drafter, target = random_teacher(V, 1, 1.0, 50), random_teacher(V, 1, 2.0, 60)
        pvals = []
        for rep_seed in range(60):
            rep = spec_decode_sim(drafter, target, [[0], [1]], 1, 10_000, np.random.default_rng([rep_seed, 5]))
            counts = np.zeros((V, V))
            for prompt, stream in zip([[0], [1]], rep.tokens):
                seq = np.concatenate([prompt, stream]).astype(np.int64)
                np.add.at(counts, (seq[:-1], seq[1:]), 1)
            expected = counts.sum(axis=1, keepdims=True) * target.probs()
            pvals.append(chi2.sf(np.sum((counts - expected) ** 2 / expected), V * (V - 1)))
        assert kstest(pvals, "uniform").pvalue > 1e-3

    def test_mismatch(self):
        with pytest.raises(ParameterError):
            spec_decode_sim(NGramModel.uniform(4, 1), NGramModel.uniform(4, 2), [[0]], 2, 10,
                            np.random.default_rng(0))
        with pytest.raises(ParameterError):
            spec_decode_sim(NGramModel.uniform(4, 1), NGramModel.uniform(4, 1), [[0]], 0, 10,
                            np.random.default_rng(0))


class TestNoisySetup:
    def test_structure(self):
        ns = noisy_setup(vocab_size=8, noise_fraction=0.25, seed=1)
        mask = np.zeros(8, dtype=bool)
        mask[ns.noise_rows] = True
        assert mask.sum() == 2
        np.testing.assert_array_equal(ns.teacher.logits[~mask], ns.reference.logits[~mask])
        assert np.all(row_tv(ns.teacher, ns.reference)[mask] > 0.1)

    def test_rejects_low_entropy_reference(self):
        with pytest.raises(ParameterError):
            noisy_setup(concentration=1.0)

    def test_deterministic(self):
        a, b = noisy_setup(seed=3), noisy_setup(seed=3)
        assert a.sft_student.logits.tobytes() == b.sft_student.logits.tobytes()


def test_output_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SELECTKD_OUT", str(tmp_path / "env"))
    assert output_dir() == tmp_path / "env"
    assert output_dir(tmp_path / "flag") == tmp_path / "flag"
