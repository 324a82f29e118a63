import numpy as np
import pytest

from fcl.calibrate import (CalibConfig, Pair, PairSet, alignment_loss,
                           build_pair_set, calibrate_context,
                           calibration_loss, candidate_posterior,
                           pair_weight, pairwise_posterior, sensitivity_gap,
                           total_loss_and_grad)
from fcl.encoders import (init_context, make_toy_text_encoder,
                          make_toy_vocabulary)
from fcl.numerics import RngStream, js_divergence, l2_normalize, softmax

D, D_TOKEN, N_CTX = 20, 8, 3
BETA = 20.0

# JS between a point mass and the uniform pair: 0.75 * ln(4/3), frozen from
# the direct half-KL evaluation (the tightest value the pairwise loss can hit)
JS_POINT_VS_UNIFORM = 0.21576155433883569558
PAIR_16_15 = [0.73105857863000487925, 0.26894142136999512075]


@pytest.fixture(scope="module")
def text():
    vocab = make_toy_vocabulary([f"c{i}" for i in range(4)], d_cls=D_TOKEN,
                                vocab_seed=21)
    return make_toy_text_encoder(vocab, D, D_TOKEN, RngStream(21, 0),
                                 ctx_gain=4.0)


@pytest.fixture()
def ctx():
    return init_context("a photo of a", N_CTX, D_TOKEN)


def random_pair_set(text, ctx, gen, n_classes=3, weights=None):
    base = {c: text.encode(c, ctx) for c in range(n_classes)}
    pairs = []
    k = 0
    for i in range(n_classes):
        for j in range(i + 1, n_classes):
            w = 1.0 if weights is None else weights[k]
            pairs.append(Pair(i=i, j=j,
                              z_common=l2_normalize(gen.normal(size=D)),
                              weight=w))
            k += 1
    return PairSet(pairs=pairs, candidate_ids=list(range(n_classes))), base


class TestPairwisePosterior:
    def test_identical_embeddings_uniform(self, gen):
        tau = l2_normalize(gen.normal(size=D))
        z = l2_normalize(gen.normal(size=D))
        assert np.allclose(pairwise_posterior(z, tau, tau, BETA), [0.5, 0.5],
                           atol=1e-12)

    def test_two_class_closed_form(self, gen):
        # pi_i = 1 / (1 + exp(-m)) for score gap m
        z = l2_normalize(gen.normal(size=D))
        t_i = l2_normalize(gen.normal(size=D))
        t_j = l2_normalize(gen.normal(size=D))
        m = BETA * float(z @ t_i - z @ t_j)
        p = pairwise_posterior(z, t_i, t_j, BETA)
        assert p[0] == pytest.approx(1.0 / (1.0 + np.exp(-m)), abs=1e-12)

    def test_sixteen_fifteen_oracle(self):
        # cosine gaps 0.8 and 0.75 at temperature 20: softmax of (16, 15)
        z = np.zeros(4)
        z[0] = 1.0
        t_i = np.array([0.8, 0.6, 0.0, 0.0])
        t_j = np.array([0.75, 0.0, np.sqrt(1 - 0.75 ** 2), 0.0])
        assert np.allclose(pairwise_posterior(z, t_i, t_j, BETA), PAIR_16_15,
                           atol=1e-12)


class TestPairWeight:
    def test_balanced_pair_full_weight(self):
        assert pair_weight(np.array([0.4, 0.4, 0.2]), 0, 1) == 1.0

    def test_saturated_pair_zero_weight(self):
        assert pair_weight(np.array([1.0, 0.0]), 0, 1) == 0.0

    def test_arithmetic_example(self):
        assert pair_weight(np.array([0.7, 0.1, 0.2]), 0, 1) == \
            pytest.approx(0.4, abs=1e-12)

    def test_same_index_rejected(self):
        with pytest.raises(ValueError):
            pair_weight(np.array([0.5, 0.5]), 1, 1)


class TestCalibrationLoss:
    def test_uniform_posteriors_zero(self, text, ctx):
        # shared embedding orthogonal to both taus: scores tie, JS = 0
        base = {c: text.encode(c, ctx) for c in (0, 1)}
        q, _ = np.linalg.qr(np.stack([base[0], base[1]]).T, mode="complete")
        z_orth = q[:, -1]
        ps = PairSet(pairs=[Pair(0, 1, z_orth, 1.0)], candidate_ids=[0, 1])
        assert calibration_loss(ctx, ps, text, BETA) == \
            pytest.approx(0.0, abs=1e-12)

    def test_point_mass_pair_hits_js_ceiling(self, ctx, stub_text_encoder):
        # embeddings engineered so the pair softmax saturates to (1, 0);
        # JS against uniform then equals 0.75*ln(4/3), not ln 2
        t_i = np.zeros(D)
        t_i[0] = 1.0
        t_j = np.zeros(D)
        t_j[0] = -1.0
        stub = stub_text_encoder({0: t_i, 1: t_j})
        z = np.zeros(D)
        z[0] = 1.0
        ps = PairSet(pairs=[Pair(0, 1, z, 1.0)], candidate_ids=[0, 1])
        loss = calibration_loss(ctx, ps, stub, 100.0)
        assert loss == pytest.approx(JS_POINT_VS_UNIFORM, abs=1e-10)

    def test_weighted_mean_formula(self, text, ctx, gen):
        ps, _ = random_pair_set(text, ctx, gen,
                                weights=[1.0, 0.4, 0.7])
        taus = {c: text.encode(c, ctx) for c in range(3)}
        expected = np.mean([
            p.weight * js_divergence(
                pairwise_posterior(p.z_common, taus[p.i], taus[p.j], BETA),
                [0.5, 0.5])
            for p in ps.pairs])
        assert calibration_loss(ctx, ps, text, BETA) == \
            pytest.approx(expected, abs=1e-12)

    def test_empty_pair_set_zero(self, text, ctx):
        ps = PairSet(pairs=[], candidate_ids=[0])
        assert calibration_loss(ctx, ps, text, BETA) == 0.0

    def test_pair_swap_symmetry(self, text, ctx, gen):
        z = l2_normalize(gen.normal(size=D))
        a = PairSet(pairs=[Pair(0, 1, z, 0.8)], candidate_ids=[0, 1])
        b = PairSet(pairs=[Pair(1, 0, z, 0.8)], candidate_ids=[0, 1])
        assert abs(calibration_loss(ctx, a, text, BETA)
                   - calibration_loss(ctx, b, text, BETA)) < 1e-12

    def test_loss_range(self, text, ctx, gen):
        for _ in range(50):
            ps, _ = random_pair_set(text, ctx, gen)
            loss = calibration_loss(ctx, ps, text, BETA)
            assert 0.0 <= loss <= np.log(2)


class TestAlignmentLoss:
    def test_zero_at_base_context(self, text, ctx):
        base = {c: text.encode(c, ctx) for c in range(3)}
        assert alignment_loss(ctx, base, [0, 1, 2], text) == \
            pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_embeddings_give_one(self, ctx, stub_text_encoder):
        e0 = np.zeros(D)
        e0[0] = 1.0
        e1 = np.zeros(D)
        e1[1] = 1.0
        stub = stub_text_encoder({0: e0, 1: e1})
        base = {0: np.roll(e0, 2), 1: np.roll(e1, 2)}
        assert alignment_loss(ctx, base, [0, 1], stub) == \
            pytest.approx(1.0, abs=1e-12)

    def test_cosine_average_example(self, ctx, stub_text_encoder):
        # K=2 with cosines (1.0, 0.5) -> 1 - 0.75 = 0.25
        e0 = np.zeros(D)
        e0[0] = 1.0
        e1 = np.zeros(D)
        e1[1] = 1.0
        stub = stub_text_encoder({0: e0, 1: e1})
        base1 = 0.5 * e1 + np.sqrt(0.75) * np.eye(D)[2]
        assert alignment_loss(ctx, {0: e0, 1: base1}, [0, 1], stub) == \
            pytest.approx(0.25, abs=1e-12)

    def test_range(self, text, ctx, gen):
        for _ in range(20):
            noisy = ctx.with_tokens(ctx.tokens + gen.normal(0, 1, ctx.tokens.shape))
            base = {c: text.encode(c, ctx) for c in range(3)}
            val = alignment_loss(noisy, base, [0, 1, 2], text)
            assert 0.0 <= val <= 2.0


class TestTotalLossAndGrad:
    def test_zero_coefficients(self, text, ctx, gen):
        ps, base = random_pair_set(text, ctx, gen)
        cfg = CalibConfig(lambda_cal=0.0, lambda_align=0.0)
        total, cal, align, grad = total_loss_and_grad(ctx, ps, base, text,
                                                      cfg, BETA)
        assert total == 0.0
        assert np.array_equal(grad, np.zeros_like(ctx.tokens))

    def test_gradient_matches_finite_differences(self, text, gen):
        cfg = CalibConfig()
        worst = 0.0
        for trial in range(10):
            ctx0 = init_context("a photo of a", N_CTX, D_TOKEN)
            ctx0 = ctx0.with_tokens(ctx0.tokens
                                    + gen.normal(0, 0.2, ctx0.tokens.shape))
            ps, base = random_pair_set(text, ctx0, gen)
            probe = ctx0.with_tokens(ctx0.tokens
                                     + gen.normal(0, 0.05, ctx0.tokens.shape))
            _, _, _, grad = total_loss_and_grad(probe, ps, base, text, cfg,
                                                BETA)
            fd = np.zeros_like(grad)
            h = 1e-5
            for r in range(fd.shape[0]):
                for c in range(fd.shape[1]):
                    for sign in (1.0, -1.0):
                        t = probe.tokens.copy()
                        t[r, c] += sign * h
                        val, _, _, _ = total_loss_and_grad(
                            probe.with_tokens(t), ps, base, text, cfg, BETA)
                        fd[r, c] += sign * val / (2 * h)
            scale = max(np.max(np.abs(fd)), 1e-12)
            worst = max(worst, np.max(np.abs(grad - fd)) / scale)
        assert worst < 1e-4

    def test_descent_direction_on_biased_pair(self, text, ctx, gen):
        # maximally biased pair: gradient must be nonzero and a small step
        # along its negative must lower the loss (line-search probe)
        base = {c: text.encode(c, ctx) for c in (0, 1)}
        z = l2_normalize(base[0] - 0.2 * base[1])
        ps = PairSet(pairs=[Pair(0, 1, z, 1.0)], candidate_ids=[0, 1])
        cfg = CalibConfig()
        loss0, _, _, grad = total_loss_and_grad(ctx, ps, base, text, cfg, BETA)
        assert np.max(np.abs(grad)) > 0.0
        stepped = ctx.with_tokens(ctx.tokens - 1e-4 * grad)
        loss1, _, _, _ = total_loss_and_grad(stepped, ps, base, text, cfg,
                                             BETA)
        assert loss1 < loss0


class TestCalibrateContext:
    def test_zero_steps_identity(self, text, ctx, gen):
        ps, base = random_pair_set(text, ctx, gen)
        out, trace = calibrate_context(ctx, ps, base, text,
                                       CalibConfig(steps=0), BETA)
        assert np.array_equal(out.tokens, ctx.tokens)
        assert len(trace.total) == 1

    def test_trace_length_and_determinism(self, text, ctx, gen):
        ps, base = random_pair_set(text, ctx, gen)
        cfg = CalibConfig(steps=3)
        a, trace_a = calibrate_context(ctx, ps, base, text, cfg, BETA)
        b, trace_b = calibrate_context(ctx, ps, base, text, cfg, BETA)
        assert len(trace_a.total) == 4
        assert np.array_equal(a.tokens, b.tokens)
        assert trace_a.total == trace_b.total

    def test_biased_episode_reduces_calibration_loss(self, text, ctx):
        base = {c: text.encode(c, ctx) for c in (0, 1)}
        z = l2_normalize(base[0] + 0.3 * base[1])
        ps = PairSet(pairs=[Pair(0, 1, z, 1.0)], candidate_ids=[0, 1])
        _, trace = calibrate_context(ctx, ps, base, text,
                                     CalibConfig(steps=4, learning_rate=0.005),
                                     BETA)
        assert trace.cal[-1] < trace.cal[0]

    def test_sensitivity_gap_shrinks(self, text, ctx):
        base = {c: text.encode(c, ctx) for c in (0, 1)}
        z = l2_normalize(base[0] + 0.3 * base[1])
        ps = PairSet(pairs=[Pair(0, 1, z, 1.0)], candidate_ids=[0, 1])
        out, _ = calibrate_context(ctx, ps, base, text,
                                   CalibConfig(steps=4, learning_rate=0.005),
                                   BETA)
        before = sensitivity_gap(z, base[0], base[1])
        after = sensitivity_gap(z, text.encode(0, out), text.encode(1, out))
        assert after < before

    def test_non_finite_loss_falls_back(self, ctx, stub_text_encoder):
        stub = stub_text_encoder({0: np.full(D, np.nan), 1: np.ones(D)})
        base = {0: np.ones(D) / np.sqrt(D), 1: np.ones(D) / np.sqrt(D)}
        z = np.ones(D) / np.sqrt(D)
        ps = PairSet(pairs=[Pair(0, 1, z, 1.0)], candidate_ids=[0, 1])
        out, trace = calibrate_context(ctx, ps, base, stub,
                                       CalibConfig(steps=2), BETA)
        assert trace.fallback
        assert np.array_equal(out.tokens, ctx.tokens)

    def test_alignment_dominance_sweep(self, text, ctx):
        # growing the alignment coefficient must shrink the context movement
        base = {c: text.encode(c, ctx) for c in (0, 1)}
        z = l2_normalize(base[0] + 0.3 * base[1])
        ps = PairSet(pairs=[Pair(0, 1, z, 1.0)], candidate_ids=[0, 1])
        moves = []
        for lam in (0.1, 1.0, 10.0, 100.0):
            out, _ = calibrate_context(
                ctx, ps, base, text,
                CalibConfig(steps=5, learning_rate=0.005, lambda_align=lam),
                BETA)
            moves.append(float(np.linalg.norm(out.tokens - ctx.tokens)))
        assert all(b <= a + 1e-12 for a, b in zip(moves, moves[1:]))

    def test_recompute_weights_switch_runs(self, text, ctx, gen):
        base = {c: text.encode(c, ctx) for c in range(3)}
        common = {(i, j): l2_normalize(gen.normal(size=D))
                  for i in range(3) for j in range(i + 1, 3)}
        z_full = l2_normalize(gen.normal(size=D))
        ps = build_pair_set([0, 1, 2], common, z_full, base, BETA)
        cfg = CalibConfig(steps=2, recompute_weights=True)
        out, trace = calibrate_context(ctx, ps, base, text, cfg, BETA)
        assert len(trace.total) == 3
        assert np.all(np.isfinite(out.tokens))


class TestBuildPairSet:
    def test_counts_weights_and_logging(self, text, ctx, gen):
        base = {c: text.encode(c, ctx) for c in range(4)}
        common = {(i, j): l2_normalize(gen.normal(size=D))
                  for i in range(4) for j in range(i + 1, 4)}
        z = l2_normalize(gen.normal(size=D))
        ps = build_pair_set([0, 1, 2, 3], common, z, base, BETA)
        assert len(ps) == 6
        posterior = candidate_posterior(z, np.stack([base[c] for c in range(4)]),
                                        BETA)
        for p, (i, j) in zip(ps.pairs, [(0, 1), (0, 2), (0, 3), (1, 2),
                                        (1, 3), (2, 3)]):
            assert (p.i, p.j) == (i, j)
            assert p.weight == pytest.approx(
                1.0 - abs(posterior[i] - posterior[j]), abs=1e-12)
            assert 0.0 <= p.weight <= 1.0
        assert set(ps.base_pairwise) == set(common)
        logged = ps.base_pairwise[(0, 1)]
        assert np.allclose(logged, softmax(BETA * np.array(
            [float(z @ base[0]), float(z @ base[1])])), atol=1e-12)
