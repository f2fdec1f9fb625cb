from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qpagrpo.evalharness import EmptyDataset
from qpagrpo.grpo import (
    ConfigError,
    NonFiniteLoss,
    SweepSpec,
    TrainConfig,
    TrainerState,
    compute_advantages,
    grpo_step,
    kl_estimate,
    sequential_sweep,
    sweep,
    train,
)
from qpagrpo.policy import (
    GroupTooSmall,
    PolicyParams,
    SamplingConfig,
    Vocab,
    encode_prompt,
    init_params,
    load_params,
    next_token_dist,
    sample_group,
    sequence_logprob,
    sequence_logprob_and_grad,
)
from qpagrpo.qpa_extract import Dataset
from qpagrpo.reward import combined_reward
from qpagrpo.synthetic import make_curriculum

from builders import qa, random_params


def blue_params(logit: float = 10.0) -> PolicyParams:
    vocab = Vocab.from_words(["blue", "red", "tree"])
    p = init_params(vocab, feature_dim=8)
    d = p.feature_dim
    p.weight_matrix[vocab.id("blue"), d + vocab.bos_id] = logit
    p.weight_matrix[vocab.eos_id, d + vocab.id("blue")] = logit
    return p


def exact_kl(current: PolicyParams, reference: PolicyParams, example, prefixes) -> float:
    """Sum over probe prefixes of KL(current || reference) at that position."""
    f = encode_prompt(example, current)
    total = 0.0
    for prev in prefixes:
        p = next_token_dist(current, f, prev)
        q = next_token_dist(reference, f, prev)
        total += float(np.sum(p * (np.log(p) - np.log(q))))
    return total


def small_cfg(**kw) -> TrainConfig:
    base = dict(group_size=4, learning_rate=1e-2, max_steps=6, eval_every=3, optimizer="adam",
                sampling=SamplingConfig(max_tokens=4), feature_dim=32)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def curriculum():
    return make_curriculum(seed=0)


class TestAdvantages:
    def test_examples(self):
        assert compute_advantages([1.0, 0.5, 0.0, 0.5]) == [0.5, 0.0, -0.5, 0.0]
        assert compute_advantages([0.3] * 5) == [0.0] * 5
        assert compute_advantages([2, 0, 0, 0, 0, 0, 0, 0]) == [1.75] + [-0.25] * 7

    def test_too_small(self):
        with pytest.raises(GroupTooSmall):
            compute_advantages([1.0])

    @given(st.sampled_from([2, 4, 8, 16]).flatmap(
        lambda k: st.lists(st.floats(0, 2, allow_nan=False), min_size=k, max_size=k)))
    def test_zero_sum(self, rewards):
        assert abs(sum(compute_advantages(rewards))) <= 1e-9

    @given(st.lists(st.floats(0, 2, allow_nan=False), min_size=2, max_size=16), st.floats(0.1, 10))
    def test_scaling_covariance(self, rewards, c):
        a = np.array(compute_advantages(rewards))
        b = np.array(compute_advantages([c * r for r in rewards]))
        np.testing.assert_allclose(b, c * a, atol=1e-9)
        big = np.abs(a) > 1e-9
        assert (np.sign(a[big]) == np.sign(b[big])).all()

    def test_std_variant(self):
        a = compute_advantages([1.0, 0.0], normalize_std=True)
        assert a == [1.0, -1.0]
        assert compute_advantages([1.0, 1.0], normalize_std=True) == [0.0, 0.0]


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.group_size, cfg.learning_rate, cfg.kl_coefficient, cfg.reward_scaling, cfg.batch_size,
                cfg.grad_clip_norm) == (8, 1e-4, 0.01, 2.0, 1, 1.0)
        assert cfg.optimizer == "sgd" and cfg.advantage_norm == "mean"

    @pytest.mark.parametrize(
        "kw",
        [dict(group_size=1), dict(learning_rate=0), dict(kl_coefficient=-1), dict(max_steps=0),
         dict(reward_scaling=0), dict(batch_size=0), dict(eval_every=0), dict(grad_clip_norm=0),
         dict(optimizer="rmsprop"), dict(advantage_norm="rank")],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestKL:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(0)
        p = random_params(Vocab.from_words(["a", "b"]), 6, rng)
        group = sample_group(p, qa(), 4, seed=1)
        assert kl_estimate(p, p.copy(), group, qa()) == 0.0

    def test_concentrated_vs_uniform_positive(self):
        cur = blue_params(4.0)
        ref = init_params(cur.vocab, 8)
        group = sample_group(cur, qa(), 8, SamplingConfig(top_p=1.0), seed=2)
        est = kl_estimate(cur, ref, group, qa())
        exact = exact_kl(cur, ref, qa(), [cur.vocab.bos_id])
        assert est > 0 and exact > 0

    def test_kl_coefficient_zero_ignores_reference(self):
        rng = np.random.default_rng(3)
        p = random_params(Vocab.from_words(["the", "blue", "tree"]), 8, rng)
        cfg = TrainConfig(group_size=4, learning_rate=0.1, kl_coefficient=0.0, seed=5)
        a = TrainerState.create(p, cfg)
        b = TrainerState.create(p, cfg)
        b.reference = random_params(p.vocab, 8, rng)
        ra = grpo_step(a, [qa(answer="the blue tree")])
        rb = grpo_step(b, [qa(answer="the blue tree")])
        np.testing.assert_array_equal(a.params.weight_matrix, b.params.weight_matrix)
        assert ra.loss == rb.loss and ra.grad_norm == rb.grad_norm

    def test_zero_advantage_steps_move_toward_reference(self):
        # top_p filtering makes every sample "blue", so all rewards tie
        cur = blue_params()
        cfg = TrainConfig(group_size=4, learning_rate=1.0, kl_coefficient=0.01, seed=0)
        state = TrainerState.create(cur, cfg)
        state.reference = init_params(cur.vocab, 8)
        probe = [cur.vocab.bos_id, cur.vocab.id("blue")]
        kls = [exact_kl(state.params, state.reference, qa(), probe)]
        for _ in range(50):
            grpo_step(state, [qa(answer="red")])
            kls.append(exact_kl(state.params, state.reference, qa(), probe))
        assert all(b < a for a, b in zip(kls, kls[1:]))


class TestStep:
    def test_all_tie_zero_delta(self):
        p = blue_params()
        state = TrainerState.create(p, TrainConfig(group_size=8, learning_rate=1.0, kl_coefficient=0.0))
        report = grpo_step(state, [qa(answer="tree")])
        np.testing.assert_array_equal(state.params.weight_matrix, p.weight_matrix)
        assert report.grad_norm == 0.0 and report.loss == 0.0

    def test_report_is_pre_scaling(self):
        p = blue_params()
        state = TrainerState.create(p, TrainConfig(group_size=4))
        report = grpo_step(state, [qa(answer="blue")])
        assert report.mean_reward == 1.0 and report.step == 1
        assert all(math.isfinite(x) for x in (report.loss, report.kl_estimate, report.grad_norm))

    def test_score_group_scales_rewards(self):
        from qpagrpo.grpo import score_group

        rng = np.random.default_rng(2)
        p = random_params(Vocab.from_words(["the", "blue", "tree"]), 8, rng)
        ex = qa(answer="the blue tree")
        group = sample_group(p, ex, 6, seed=0)
        raw = score_group(group, ex, TrainConfig(reward_scaling=2.0))
        assert group.rewards == [2.0 * r for r in raw]
        assert raw == [combined_reward(g.text, ex.answer).reward for g in group.generations]
        assert abs(sum(group.advantages)) <= 1e-9

    def test_gradient_is_clipped(self):
        rng = np.random.default_rng(0)
        p = random_params(Vocab.from_words(["the", "blue", "tree"]), 8, rng)
        cfg = TrainConfig(group_size=8, learning_rate=1.0, kl_coefficient=0.0, grad_clip_norm=1e-3, seed=4)
        state = TrainerState.create(p, cfg)
        report = grpo_step(state, [qa(answer="the blue tree")])
        assert report.grad_norm > 1e-3
        delta = np.linalg.norm(state.params.weight_matrix - p.weight_matrix)
        assert delta == pytest.approx(1e-3, rel=1e-9)

    def test_separates_pair(self):
        """K=2: the gap between the better and the worse logprob always widens,
        and each logprob moves the way the first-order expansion predicts."""
        rng = np.random.default_rng(11)
        checked = 0
        trial = 0
        while checked < 100:
            trial += 1
            p = random_params(Vocab.from_words(["the", "blue", "tree", "red"]), 8, rng)
            ex = qa(qid=f"q{trial}", answer="the blue tree")
            cfg = TrainConfig(group_size=2, learning_rate=1e-3, kl_coefficient=0.0,
                              sampling=SamplingConfig(top_p=1.0, max_tokens=4), seed=trial)
            state = TrainerState.create(p, cfg)
            gens = _groups_seen(p, ex, cfg)
            rewards = [combined_reward(g.text, ex.answer).reward for g in gens]
            if rewards[0] == rewards[1]:
                continue
            checked += 1
            hi, lo = (gens[0], gens[1]) if rewards[0] > rewards[1] else (gens[1], gens[0])
            before = [sequence_logprob(p, ex, g.tokens) for g in (hi, lo)]
            grpo_step(state, [ex])
            after = [sequence_logprob(state.params, ex, g.tokens) for g in (hi, lo)]
            assert after[0] - after[1] > before[0] - before[1]
            g_hi = sequence_logprob_and_grad(p, ex, hi.tokens)[1]
            g_lo = sequence_logprob_and_grad(p, ex, lo.tokens)[1]
            d = g_hi - g_lo  # update direction, up to a positive factor
            for g, delta in ((g_hi, after[0] - before[0]), (g_lo, after[1] - before[1])):
                predicted = float(np.sum(g * d))
                if abs(predicted) > 1e-6:
                    assert np.sign(delta) == np.sign(predicted)

    def test_non_finite_aborts(self):
        p = random_params(Vocab.from_words(["a", "b"]), 4, np.random.default_rng(0), scale=1e307)
        state = TrainerState.create(p, TrainConfig(group_size=2))
        with pytest.raises(NonFiniteLoss) as err:
            grpo_step(state, [qa(qid="bad")])
        assert err.value.example_id == "bad"


def _groups_seen(params, example, cfg):
    from qpagrpo.grpo import _step_seed

    return sample_group(params, example, cfg.group_size, cfg.sampling, _step_seed(cfg.seed, 1)).generations


class TestTrain:
    def test_determinism(self, curriculum, tmp_path):
        tr, ho, vocab = curriculum
        cfg = small_cfg(max_steps=20, eval_every=10)
        train(tr, ho, cfg, params=init_params(vocab, 32), metrics_path=tmp_path / "a.jsonl")
        train(tr, ho, cfg, params=init_params(vocab, 32), metrics_path=tmp_path / "b.jsonl")
        a = (tmp_path / "a.jsonl").read_bytes()
        assert a == (tmp_path / "b.jsonl").read_bytes()
        assert len(a.splitlines()) == 22

    def test_log_and_checkpoints(self, curriculum, tmp_path):
        tr, ho, vocab = curriculum
        res = train(tr, ho, small_cfg(max_steps=7, eval_every=3), params=init_params(vocab, 32),
                    checkpoint_dir=tmp_path)
        steps = [r for r in res.log if "split" not in r]
        evals = [r for r in res.log if r.get("split") == "val"]
        assert [r["step"] for r in steps] == list(range(1, 8))
        assert set(steps[0]) == {"step", "mean_reward", "loss", "kl_estimate", "grad_norm"}
        assert [r["step"] for r in evals] == [3, 6, 7]
        assert set(evals[0]) == {"step", "split", "mean_reward", "top1"}
        names = sorted(f.name for f in tmp_path.iterdir())
        assert names == ["best.tlm", "step-0003.tlm", "step-0006.tlm", "step-0007.tlm"]
        assert load_params(tmp_path / "best.tlm").vocab == vocab

    def test_reference_is_frozen(self, curriculum):
        tr, ho, vocab = curriculum
        res = train(tr, ho, small_cfg(max_steps=5), params=init_params(vocab, 32))
        assert res.log[0]["kl_estimate"] == 0.0
        assert any(r.get("kl_estimate", 0) != 0 for r in res.log[1:])

    def test_best_retained_after_lr_spike(self, curriculum):
        tr, ho, vocab = curriculum
        cfg = small_cfg(max_steps=200, eval_every=25, batch_size=2)
        res = train(tr, ho, cfg, params=init_params(vocab, 32), lr_schedule=lambda s: 5.0 if s > 175 else 1e-2)
        from qpagrpo.evalharness import eval_open_ended

        final = eval_open_ended(res.final_params, ho, max_tokens=cfg.sampling.max_tokens).mean_reward
        best = eval_open_ended(res.best_params, ho, max_tokens=cfg.sampling.max_tokens).mean_reward
        assert best == res.best_score
        assert best >= final
        assert res.best_step <= 200

    def test_empty(self, curriculum):
        tr, ho, vocab = curriculum
        with pytest.raises(EmptyDataset):
            train(Dataset([]), ho, small_cfg())


class TestSweep:
    def test_lr_three_rows(self, curriculum):
        tr, ho, vocab = curriculum
        spec = SweepSpec(small_cfg(max_steps=4, eval_every=2), "learning_rate", (1e-3, 1e-4, 1e-6))
        rep = sweep(spec, tr, ho, init_params(vocab, 32))
        assert [r.value for r in rep.rows] == [1e-6, 1e-4, 1e-3]
        assert sum(r.best for r in rep.rows) == 1
        lines = rep.to_tsv().splitlines()
        assert lines[0].split("\t") == ["learning_rate", "val_mean_reward", "final_val_mean_reward", "best"]
        assert len(lines) == 4 and len(rep.to_jsonl().splitlines()) == 3

    def test_single_value(self, curriculum):
        tr, ho, vocab = curriculum
        rep = sweep(SweepSpec(small_cfg(max_steps=2), "group_size", (2,)), tr, ho, init_params(vocab, 32))
        assert len(rep.rows) == 1 and rep.rows[0].best

    def test_failing_row_does_not_abort(self, curriculum):
        tr, ho, vocab = curriculum
        rep = sweep(SweepSpec(small_cfg(max_steps=2), "group_size", (1, 2)), tr, ho, init_params(vocab, 32))
        assert rep.rows[0].error and rep.rows[1].error is None and rep.rows[1].best
        assert "ERROR" in rep.to_tsv()

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            SweepSpec(TrainConfig(), "momentum", (1,))
        with pytest.raises(ConfigError):
            SweepSpec(TrainConfig(), "learning_rate", ())

    def test_sequential_adoption(self, curriculum):
        tr, ho, vocab = curriculum
        final, reports = sequential_sweep(
            small_cfg(max_steps=3), [("learning_rate", [1e-2, 1e-4]), ("group_size", [2, 4])], tr, ho,
            init_params(vocab, 32),
        )
        assert reports[1].rows[0].value == 2
        assert final.learning_rate == reports[0].winner.value
        assert final.group_size == reports[1].winner.value
