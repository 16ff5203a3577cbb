import itertools
import math
import random
from fractions import Fraction

import numpy as np
import pytest

from plat.errors import ConfigError
from plat.evaluation import (branch_record, cluster_steps, entropy, pass_at_k_enumerated,
                             pass_at_k_exact, progress_bin, validate_path, validate_step)

# Reference verdicts from the step-validity rubric, rewritten as corpus questions.
Q_16_3_4 = "tom has 16 apples . he loses 3 . then he sells 4 . how many apples does tom have now ?"
Q_2_2 = "ann has 2 coins . she splits them into 2 equal groups and keeps one . how many coins does ann have now ?"
Q_3_3_60 = ("sam has 3 stamps . he makes it 3 times as many . then he makes it 60 times as many . "
            "how many stamps does sam have now ?")
Q_SMALL = "mia has 5 marbles . she buys 7 more . how many marbles does mia have now ?"

ORACLE_CASES = [
    # (step, question, prior valid results, expected)
    ("3+4=7", Q_16_3_4, (), True),
    ("16-3=13", Q_16_3_4, (), True),
    ("16-4=12", Q_16_3_4, (), True),
    ("2*1/2=1", Q_2_2, (), True),
    ("60*3=180", Q_3_3_60, (), True),
    ("180*3=540", Q_3_3_60, (180,), True),
    ("2+2=5", Q_2_2, (), False),
    ("100*100=10000", Q_SMALL, (), False),
    ("3*16=48", Q_SMALL, (), False),
]


@pytest.mark.parametrize("step,question,prior,expected", ORACLE_CASES)
def test_validate_step_reference_examples(step, question, prior, expected):
    assert validate_step(step, question, prior) is expected


def test_derived_result_only_counts_after_its_step():
    assert validate_path(["60*3=180", "180*3=540"], Q_3_3_60) == [True, True]
    assert validate_path(["180*3=540"], Q_3_3_60) == [False]
    # an invalid step does not ground its result
    assert validate_path(["60*3=181", "181*1=181"], Q_3_3_60) == [False, False]


def test_validate_step_rejects_non_equations():
    assert not validate_step("he buys more", Q_SMALL)
    assert not validate_step("5/0=0", Q_SMALL)


@pytest.mark.parametrize("n", range(1, 9))
def test_pass_at_k_matches_enumeration(n):
    for c in range(n + 1):
        outcomes = [True] * c + [False] * (n - c)
        for k in range(1, n + 1):
            assert pass_at_k_exact(n, c, k) == pass_at_k_enumerated(outcomes, k)


def test_pass_at_k_monotone_and_edges():
    for n, c in [(32, 0), (32, 3), (32, 32), (16, 5)]:
        vals = [pass_at_k_exact(n, c, k) for k in range(1, n + 1)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert pass_at_k_exact(10, 3, 1) == Fraction(3, 10)
    assert pass_at_k_exact(10, 0, 5) == 0
    with pytest.raises(ConfigError):
        pass_at_k_exact(4, 5, 1)
    with pytest.raises(ConfigError):
        pass_at_k_exact(4, 2, 0)


def test_cluster_steps_groups_commutative_variants():
    clusters = cluster_steps(["3+4=7", "4+3=7", "7-3=4", "garbage", "3+4=7"])
    as_sets = sorted(sorted(c) for c in clusters)
    assert as_sets == [["3+4=7", "3+4=7", "4+3=7"], ["7-3=4"], ["garbage"]]


def test_identical_unparseable_steps_share_a_cluster():
    assert cluster_steps(["oops", "oops", "x"]) == [["oops", "oops"], ["x"]]
    assert branch_record(0, Q_SMALL, [["oops"]] * 4, bins=2).bins[1] == (1, 0)


def test_cluster_steps_is_order_invariant():
    steps = ["3+4=7", "4+3=7", "2*5=10", "5*2=10", "10-3=7", "oops", "oops", "x"]
    ref = cluster_steps(steps)
    rnd = random.Random(0)
    for _ in range(20):
        shuffled = steps[:]
        rnd.shuffle(shuffled)
        assert cluster_steps(shuffled) == ref


def test_entropy_bounds():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(40), size=100)
    h = entropy(p)
    assert (h >= 0).all() and (h <= math.log(40) + 1e-12).all()
    assert entropy(np.full(8, 1 / 8)) == pytest.approx(math.log(8))
    assert entropy(np.eye(5)[2]) == 0.0


@pytest.mark.parametrize("m", range(1, 13))
def test_progress_bins_cover_range(m):
    bins = [progress_bin(j, m, 10) for j in range(1, m + 1)]
    assert bins == sorted(bins)
    assert bins[-1] == 9 and bins[0] >= 0


def test_identical_paths_have_one_branch_everywhere():
    path = ["16-3=13", "13-4=9"]
    rec = branch_record(0, Q_16_3_4, [path] * 10, bins=10)
    assert all(b is None or b[0] == 1 for b in rec.bins)
    assert rec.branch_total == 2 and rec.valid_total == 2
