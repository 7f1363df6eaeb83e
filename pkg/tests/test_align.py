import math

import numpy as np
import pytest

from siam.align import (
    LossConfig,
    PolicyLogProbBatch,
    ToyPair,
    ToySoftmaxPolicy,
    compute_loss,
    dpo_sft_loss,
    gradient_check,
    orpo_loss,
    sft_loss,
    train_toy,
)

from oracles import central_difference


def batch_from(w, l=None, wr=None, lr=None):
    return PolicyLogProbBatch(
        logp_w_policy=np.array(w, dtype=float),
        logp_l_policy=None if l is None else np.array(l, dtype=float),
        logp_w_ref=None if wr is None else np.array(wr, dtype=float),
        logp_l_ref=None if lr is None else np.array(lr, dtype=float),
    )


def random_batch(rng, size=6):
    draw = lambda: -rng.uniform(0.05, 6.0, size)
    return batch_from(draw(), draw(), draw(), draw())


class TestBatchValidation:
    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            batch_from([])

    def test_positive_log_prob_rejected(self):
        with pytest.raises(ValueError):
            batch_from([0.5])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            batch_from([float("nan")])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            batch_from([-1.0, -2.0], [-1.0])

    def test_from_rows_round_trip(self):
        rows = [
            {"logp_w_policy": -1.0, "logp_l_policy": -2.0, "logp_w_ref": -1.5, "logp_l_ref": -2.5},
            {"logp_w_policy": -0.5, "logp_l_policy": -3.0, "logp_w_ref": -0.4, "logp_l_ref": -2.0},
        ]
        batch = PolicyLogProbBatch.from_rows(rows)
        assert len(batch) == 2
        assert batch.logp_l_ref[1] == -2.0

    def test_batch_file_schema(self, tmp_path):
        import json

        from siam.corpus import read_jsonl

        path = tmp_path / "batch.jsonl"
        rows = [
            {"logp_w_policy": -1.0, "logp_l_policy": -2.0, "logp_w_ref": -1.5, "logp_l_ref": -2.5},
            {"logp_w_policy": -0.5, "logp_l_policy": -3.0, "logp_w_ref": -0.4, "logp_l_ref": -2.0},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
        loaded = [row for _, row, _ in read_jsonl(path) if row is not None]
        batch = PolicyLogProbBatch.from_rows(loaded)
        result = dpo_sft_loss(batch, LossConfig(beta=0.1, sft_weight=1.0))
        assert np.isfinite(result.value)


class TestSftLoss:
    def test_single_example(self):
        result = sft_loss(batch_from([-2.0]))
        assert result.value == pytest.approx(2.0)
        assert result.grad_w_policy[0] == pytest.approx(-1.0)

    def test_certainty_is_zero_loss(self):
        assert sft_loss(batch_from([0.0])).value == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            batch = random_batch(rng)
            result = sft_loss(batch)

            def value_at(values):
                return sft_loss(batch_from(values, batch.logp_l_policy)).value

            for i in range(len(batch)):
                numeric = central_difference(value_at, list(batch.logp_w_policy), i)
                assert abs(result.grad_w_policy[i] - numeric) <= 1e-6 * max(
                    1.0, abs(numeric)
                )


class TestDpoSftLoss:
    def test_policy_equals_reference_lambda_zero_is_log_two(self):
        w = [-1.3, -0.7, -2.2]
        l = [-2.0, -1.1, -0.4]
        batch = batch_from(w, l, w, l)
        for beta in (0.05, 0.1, 0.5, 2.0):
            config = LossConfig(beta=beta, sft_weight=0.0)
            assert dpo_sft_loss(batch, config).value == pytest.approx(
                math.log(2.0), abs=1e-12
            )

    def test_sft_term_adds_linearly(self):
        batch = batch_from([-2.0], [-1.0], [-2.0], [-1.0])
        config = LossConfig(beta=0.1, sft_weight=1.0)
        assert dpo_sft_loss(batch, config).value == pytest.approx(
            math.log(2.0) + 2.0, abs=1e-12
        )

    def test_requires_reference_log_probs(self):
        with pytest.raises(ValueError):
            dpo_sft_loss(batch_from([-1.0], [-2.0]))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(17)
        for beta in (0.05, 0.1, 0.5):
            config = LossConfig(beta=beta, sft_weight=rng.choice([0.0, 1.0, 2.0]))
            for _ in range(10):
                batch = random_batch(rng)
                result = dpo_sft_loss(batch, config)
                for attr, grad in (
                    ("logp_w_policy", result.grad_w_policy),
                    ("logp_l_policy", result.grad_l_policy),
                ):
                    def value_at(values, attr=attr):
                        fields = {
                            "logp_w_policy": batch.logp_w_policy.copy(),
                            "logp_l_policy": batch.logp_l_policy.copy(),
                            "logp_w_ref": batch.logp_w_ref,
                            "logp_l_ref": batch.logp_l_ref,
                        }
                        fields[attr] = np.array(values)
                        return dpo_sft_loss(PolicyLogProbBatch(**fields), config).value

                    for i in range(len(batch)):
                        numeric = central_difference(value_at, list(getattr(batch, attr)), i)
                        rel = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-8)
                        assert rel < 1e-5

    def test_margin_gradient_signs(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            result = dpo_sft_loss(random_batch(rng), LossConfig(beta=0.1, sft_weight=1.0))
            assert np.all(result.grad_w_policy < 0)
            assert np.all(result.grad_l_policy > 0)

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(31)
        batch = random_batch(rng, size=8)
        config = LossConfig(beta=0.1, sft_weight=1.0)
        base = dpo_sft_loss(batch, config).value
        perm = rng.permutation(8)
        shuffled = PolicyLogProbBatch(
            batch.logp_w_policy[perm],
            batch.logp_l_policy[perm],
            batch.logp_w_ref[perm],
            batch.logp_l_ref[perm],
        )
        assert dpo_sft_loss(shuffled, config).value == pytest.approx(base, abs=1e-12)

    def test_beta_scaling_never_flips_implicit_reward_order(self):
        rng = np.random.default_rng(37)
        for _ in range(50):
            batch = random_batch(rng, size=1)
            margins = []
            for beta in (0.05, 0.1, 0.5, 5.0):
                margin = beta * (
                    (batch.logp_w_policy - batch.logp_w_ref)
                    - (batch.logp_l_policy - batch.logp_l_ref)
                )
                margins.append(float(margin[0]))
            signs = {math.copysign(1.0, m) for m in margins if m != 0.0}
            assert len(signs) <= 1


class TestOrpoLoss:
    def test_even_odds_identity(self):
        logp_half = math.log(0.5)
        batch = batch_from([logp_half], [logp_half])
        config = LossConfig(sft_weight=1.0, loss_kind="orpo")
        assert orpo_loss(batch, config).value == pytest.approx(2 * math.log(2.0), abs=1e-12)

    def test_lambda_zero_reduces_to_sft(self):
        rng = np.random.default_rng(41)
        batch = random_batch(rng)
        config = LossConfig(sft_weight=0.0, loss_kind="orpo")
        assert orpo_loss(batch, config).value == pytest.approx(sft_loss(batch).value, abs=1e-12)

    def test_reference_fields_ignored(self):
        rng = np.random.default_rng(43)
        batch = random_batch(rng)
        config = LossConfig(sft_weight=1.0, loss_kind="orpo")
        base = orpo_loss(batch, config).value
        shifted = PolicyLogProbBatch(
            batch.logp_w_policy,
            batch.logp_l_policy,
            batch.logp_w_ref - 1.0,
            batch.logp_l_ref - 2.0,
        )
        assert orpo_loss(shifted, config).value == base

    def test_probability_one_is_an_error(self):
        with pytest.raises(ValueError):
            orpo_loss(batch_from([0.0], [-1.0]), LossConfig(loss_kind="orpo"))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(47)
        config = LossConfig(sft_weight=1.0, loss_kind="orpo")
        for _ in range(20):
            batch = random_batch(rng)
            result = orpo_loss(batch, config)
            for attr, grad in (
                ("logp_w_policy", result.grad_w_policy),
                ("logp_l_policy", result.grad_l_policy),
            ):
                def value_at(values, attr=attr):
                    fields = {
                        "logp_w_policy": batch.logp_w_policy.copy(),
                        "logp_l_policy": batch.logp_l_policy.copy(),
                    }
                    fields[attr] = np.array(values)
                    return orpo_loss(PolicyLogProbBatch(**fields), config).value

                for i in range(len(batch)):
                    numeric = central_difference(value_at, list(getattr(batch, attr)), i)
                    rel = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-8)
                    assert rel < 1e-5


class TestGradientCheckHelper:
    @pytest.mark.parametrize("kind", ["sft", "dpo_sft", "orpo"])
    def test_self_check_within_tolerance(self, kind):
        assert gradient_check(kind, trials=5, seed=3) < 1e-5


def separable_pairs(num_contexts=4):
    return [ToyPair(winner=((c, 0),), loser=((c, 1),)) for c in range(num_contexts)]


class TestToyPolicy:
    def test_log_softmax_normalized(self):
        policy = ToySoftmaxPolicy(3, 5, seed=1)
        table = policy._log_softmax()
        assert np.allclose(np.exp(table).sum(axis=1), 1.0, atol=1e-12)

    def test_out_of_vocab_rejected(self):
        policy = ToySoftmaxPolicy(2, 3, seed=1)
        with pytest.raises(ValueError):
            policy.log_prob([(0, 7)])
        with pytest.raises(ValueError):
            train_toy(policy, [ToyPair(((9, 0),), ((0, 1),))], LossConfig(), 1, 0.1)

    def test_log_prob_grad_matches_finite_differences(self):
        policy = ToySoftmaxPolicy(2, 4, seed=5)
        sequence = [(0, 1), (1, 2), (0, 1)]
        value, grad = policy.log_prob_grad(sequence)
        assert value == pytest.approx(policy.log_prob(sequence))
        step = 1e-6
        for c in range(2):
            for v in range(4):
                policy.params[c, v] += step
                up = policy.log_prob(sequence)
                policy.params[c, v] -= 2 * step
                down = policy.log_prob(sequence)
                policy.params[c, v] += step
                numeric = (up - down) / (2 * step)
                assert abs(grad[c, v] - numeric) < 1e-6


class TestTrainToy:
    def test_margin_increases_on_separable_pairs(self):
        policy = ToySoftmaxPolicy(4, 4, seed=7)
        trace = train_toy(policy, separable_pairs(), LossConfig(beta=0.1, sft_weight=1.0), 200, 0.5)
        assert not trace.diverged
        margins = trace.margins()
        assert len(margins) == 200
        assert all(b > a for a, b in zip(margins[10:], margins[11:]))
        assert margins[-1] > margins[0]

    def test_zero_learning_rate_constant_trace(self):
        policy = ToySoftmaxPolicy(4, 4, seed=7)
        trace = train_toy(policy, separable_pairs(), LossConfig(), 20, 0.0)
        assert len(set(trace.losses())) == 1
        assert len(set(trace.margins())) == 1

    def test_sft_anchor_keeps_winner_likelihood_up(self):
        final = {}
        for lam in (0.0, 2.0):
            policy = ToySoftmaxPolicy(4, 4, seed=11)
            config = LossConfig(beta=0.1, sft_weight=lam)
            trace = train_toy(policy, separable_pairs(), config, 200, 0.5)
            final[lam] = trace.steps[-1].mean_logp_w
        assert final[2.0] >= final[0.0]

    def test_divergence_aborts_with_trace(self):
        policy = ToySoftmaxPolicy(1, 2, seed=1)
        policy.params = np.array([[float("inf"), 0.0]])
        with np.errstate(invalid="ignore"):
            trace = train_toy(policy, [ToyPair(((0, 0),), ((0, 1),))], LossConfig(), 10, 0.1)
        assert trace.diverged
        assert len(trace.steps) <= 10

    def test_sft_kind_trains_winners_only(self):
        policy = ToySoftmaxPolicy(2, 3, seed=3)
        config = LossConfig(loss_kind="sft")
        trace = train_toy(policy, separable_pairs(2), config, 50, 0.5)
        assert trace.steps[-1].mean_logp_w > trace.steps[0].mean_logp_w


class TestLossConfig:
    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(beta=0.0)
        with pytest.raises(ValueError):
            LossConfig(sft_weight=-0.1)
        with pytest.raises(ValueError):
            LossConfig(loss_kind="ppo")

    def test_compute_loss_dispatch(self):
        rng = np.random.default_rng(2)
        batch = random_batch(rng)
        assert compute_loss(batch, LossConfig(loss_kind="sft")).value == sft_loss(batch).value
