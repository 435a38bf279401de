import itertools
import json
import math

import numpy as np
import pytest

from ldmic.dsc import (
    AuxChannels, JointPMF, PMFError, binary_entropy, bt_inner, entropy, four_way_joint,
    inner_bound_condition, marginal_entropies, mutual_information, outer_bound_conditions,
    sw_admissible, sw_corner,
)


def _h(ps):
    return -sum(p * math.log2(p) for p in ps if p > 0)


def test_dsbs_corner():
    c1, c2, joint = sw_corner(JointPMF.dsbs(0.1))
    h = -(0.1 * math.log2(0.1) + 0.9 * math.log2(0.9))
    assert c1 == pytest.approx(h, abs=1e-12) and c2 == pytest.approx(h, abs=1e-12)
    assert joint == pytest.approx(1 + h, abs=1e-12)
    assert (round(c1, 5), round(joint, 5)) == (0.469, 1.469)


def test_degenerate_sources():
    assert sw_corner(JointPMF(np.full((2, 2), 0.25))) == pytest.approx((1, 1, 2))
    c = sw_corner(JointPMF(np.diag([0.2, 0.3, 0.5])))
    assert c == pytest.approx((0, 0, _h([0.2, 0.3, 0.5])))


def test_admissibility():
    pmf = JointPMF.dsbs(0.1)
    h1, h2 = marginal_entropies(pmf)
    c1, c2, _ = sw_corner(pmf)
    assert sw_admissible(h1, c2, pmf)
    assert not sw_admissible(c1 - 0.01, h2, pmf)
    assert sw_admissible(0.8, 0.8, pmf)
    assert not sw_admissible(0.7, 0.7, pmf)


def test_pmf_validation(tmp_path):
    with pytest.raises(PMFError):
        JointPMF(np.array([[0.5, 0.6], [0, 0]]))
    with pytest.raises(PMFError):
        JointPMF(np.array([[-0.1, 0.6], [0.5, 0]]))
    with pytest.raises(PMFError):
        JointPMF(np.ones(4) / 4)
    (tmp_path / "p.json").write_text(json.dumps({"shape": [2, 2], "p": [0.45, 0.05, 0.05, 0.45]}))
    assert sw_corner(JointPMF.load(tmp_path / "p.json")) == pytest.approx(sw_corner(JointPMF.dsbs(0.1)))


def test_identity_channels_reduce_to_corner():
    rng = np.random.default_rng(0)
    for pmf in (JointPMF.dsbs(0.1), JointPMF(rng.dirichlet(np.ones(12)).reshape(3, 4))):
        bt = bt_inner(pmf, AuxChannels.identity(*pmf.p.shape))
        c1, c2, joint = sw_corner(pmf)
        assert abs(bt.r1 - c1) < 1e-9 and abs(bt.r2 - c2) < 1e-9 and abs(bt.sum_rate - joint) < 1e-9
        assert bt.d1 == 0 and bt.d2 == 0


def test_constant_channels_need_no_rate():
    bt = bt_inner(JointPMF.dsbs(0.3), AuxChannels.constant(2, 2))
    assert max(abs(bt.r1), abs(bt.r2), abs(bt.sum_rate)) < 1e-12


def test_bsc_aux_channels_brute_force():
    """Every quantity recomputed from an explicit 16-entry table."""
    q, e = 0.1, 0.05
    pmf = JointPMF.dsbs(q)
    aux = AuxChannels.binary_symmetric(e, e)
    table = {}
    for x1, x2, u1, u2 in itertools.product((0, 1), repeat=4):
        pxx = (1 - q) / 2 if x1 == x2 else q / 2
        table[x1, x2, u1, u2] = pxx * (1 - e if u1 == x1 else e) * (1 - e if u2 == x2 else e)

    def H(*axes):
        marg = {}
        for key, p in table.items():
            k = tuple(key[a] for a in axes)
            marg[k] = marg.get(k, 0) + p
        return _h(marg.values())

    r1 = H(0, 1, 3) + H(2, 3) - H(0, 1, 2, 3) - H(3)
    r2 = H(0, 1, 2) + H(2, 3) - H(0, 1, 2, 3) - H(2)
    s = H(0, 1) + H(2, 3) - H(0, 1, 2, 3)
    bt = bt_inner(pmf, aux)
    assert (bt.r1, bt.r2, bt.sum_rate) == pytest.approx((r1, r2, s), abs=1e-12)
    d1 = sum(p for (x1, _, u1, _), p in table.items() if u1 != x1)
    assert bt.d1 == pytest.approx(d1, abs=1e-12) and d1 == pytest.approx(e)
    assert bt.admits(r1, r2 + 0.5) and not bt.admits(r1 - 0.01, r2 + 0.5)


def test_markov_conditions():
    pmf = JointPMF.dsbs(0.2)
    joint = four_way_joint(pmf, AuxChannels.binary_symmetric(0.1, 0.3))
    assert inner_bound_condition(joint) and outer_bound_conditions(joint)
    # U1 copying X2 breaks U1 - X1 - X2
    bad = np.zeros((2, 2, 2, 2))
    for x1, x2 in itertools.product((0, 1), repeat=2):
        bad[x1, x2, x2, x2] = pmf.p[x1, x2]
    assert not outer_bound_conditions(bad)


def test_chain_rule_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(100):
        shape = tuple(rng.integers(2, 5, size=2))
        p = rng.dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)
        pmf = JointPMF(p)
        c1, c2, joint = sw_corner(pmf)
        h1, h2 = marginal_entropies(pmf)
        assert abs(joint - (h1 + c2)) < 1e-9 and abs(joint - (h2 + c1)) < 1e-9
        w1 = rng.dirichlet(np.ones(3), size=shape[0])
        w2 = rng.dirichlet(np.ones(2), size=shape[1])
        j4 = four_way_joint(pmf, AuxChannels(w1, w2))
        # I(X; U1 U2) = I(X; U2) + I(X; U1 | U2)
        lhs = mutual_information(j4, (0, 1), (2, 3))
        rhs = mutual_information(j4, (0, 1), (3,)) + mutual_information(j4, (0, 1), (2,), (3,))
        assert abs(lhs - rhs) < 1e-9


def test_entropy_helpers():
    assert binary_entropy(0.5) == 1.0
    assert entropy([1.0, 0.0]) == 0.0
