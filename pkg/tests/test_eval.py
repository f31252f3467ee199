import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import fdmdesk.tasks as tasks
from fdmdesk import evalharness as eh
from fdmdesk.errors import UsageError


@pytest.fixture(scope="module")
def tok():
    return tasks.default_tokenizer()


class TestNormalizedScore:
    def test_expert_is_one(self):
        assert eh.normalized_score([5.0, 5.0], 1.0, 5.0) == 1.0

    def test_random_is_zero(self):
        assert eh.normalized_score([1.0, 1.0], 1.0, 5.0) == 0.0

    def test_midpoint(self):
        assert eh.normalized_score([1.0, 5.0], 1.0, 5.0) == 0.5

    def test_no_clipping(self):
        assert eh.normalized_score([9.0], 1.0, 5.0) == 2.0
        assert eh.normalized_score([-3.0], 1.0, 5.0) == -1.0

    def test_degenerate(self):
        with pytest.raises(UsageError):
            eh.normalized_score([1.0], 2.0, 2.0)

    @given(
        st.floats(0.1, 10.0),
        st.floats(-5.0, 5.0),
        st.lists(st.floats(-10, 10), min_size=1, max_size=8),
    )
    def test_affine_invariance(self, a, b, returns):
        r_min, r_e = -2.0, 3.0
        s1 = eh.normalized_score(returns, r_min, r_e)
        s2 = eh.normalized_score(
            [a * r + b for r in returns], a * r_min + b, a * r_e + b
        )
        assert s1 == pytest.approx(s2, rel=1e-6, abs=1e-9)


class TestRollout:
    def test_expert_replay_scores_one(self, tok):
        res = eh.evaluate_task(
            "gridworld",
            tasks.DEFAULT_PARAMS["gridworld"],
            lambda env, s: eh.ExpertPolicy(
                "gridworld", tasks.DEFAULT_PARAMS["gridworld"], env, s
            ),
            tok,
            n_episodes=5,
        )
        assert res.score == 1.0

    def test_rollout_deterministic(self, tok):
        params = tasks.DEFAULT_PARAMS["gridworld"]
        r1 = eh.rollout(
            lambda env, s: eh.RandomPolicy(env.spec, tok, s), "gridworld", params, range(5)
        )
        r2 = eh.rollout(
            lambda env, s: eh.RandomPolicy(env.spec, tok, s), "gridworld", params, range(5)
        )
        assert r1 == r2

    def test_r_min_is_monte_carlo_mean(self, tok):
        params = tasks.DEFAULT_PARAMS["gridworld"]
        res = eh.evaluate_task(
            "gridworld", params,
            lambda env, s: eh.ExpertPolicy("gridworld", params, env, s),
            tok, n_episodes=3, random_seed=777,
        )
        rets = eh.rollout(
            lambda env, s: eh.RandomPolicy(env.spec, tok, s),
            "gridworld", params, [777 + i for i in range(eh.RANDOM_EPISODES)],
        )
        assert res.r_min == pytest.approx(float(np.mean(rets)))


class TestReport:
    def make_results(self):
        return [
            eh.EvalResult("alpha", [0.2, 0.6], 0.0, 1.0),
            eh.EvalResult("beta", [0.6, 0.6], 0.0, 1.0),
        ]

    def test_rows_and_aggregate(self, tmp_path):
        csv_path, md_path = eh.report(self.make_results(), str(tmp_path))
        lines = open(csv_path).read().strip().splitlines()
        assert lines[0] == ",".join(eh.CSV_HEADER)
        assert len(lines) == 4  # header + 2 tasks + aggregate
        agg = lines[-1].split(",")
        assert agg[0] == "ALL"
        assert float(agg[-1]) == 0.5  # one of two tasks scores >= 0.5

    def test_deterministic_bytes(self, tmp_path):
        p1, _ = eh.report(self.make_results(), str(tmp_path / "a"))
        p2, _ = eh.report(self.make_results(), str(tmp_path / "b"))
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_single_result(self, tmp_path):
        csv_path, _ = eh.report(self.make_results()[:1], str(tmp_path))
        lines = open(csv_path).read().strip().splitlines()
        assert len(lines) == 3

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(UsageError):
            eh.report([], str(tmp_path))

    def test_read_back(self, tmp_path):
        csv_path, _ = eh.report(self.make_results(), str(tmp_path))
        rows = eh.read_results_csv(csv_path)
        assert [r[0] for r in rows] == ["alpha", "beta"]
        assert rows[0][5] == pytest.approx(0.4)


class TestTokenActions:
    def test_discrete(self, tok):
        from fdmdesk.modality import DiscreteAction

        assert eh.tokens_to_action([2, 0], DiscreteAction(4, slots=2), tok) == [2, 0]

    def test_continuous(self, tok):
        from fdmdesk.modality import ContinuousAction
        from fdmdesk import vocab

        a = eh.tokens_to_action([32512], ContinuousAction(1), tok)
        assert abs(a[0] - vocab.decode_continuous(32512)) < 1e-12

    def test_text(self, tok):
        from fdmdesk.modality import TextAction

        ids = tok.tokenize("a red circle\n")
        assert eh.tokens_to_action(ids, TextAction(24), tok) == "a red circle\n"
