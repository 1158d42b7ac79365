import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import (DIM, brute_force_scalar_prox, catalogue, firmly_nonexpansive,
                     printed_huber_prox_at_unit_step, prox_beats_perturbations, random_draw)
from psfcenter.errors import DimensionMismatch
from psfcenter.prox import (LOSS_GRAMMAR, BoxConstraint, LossKind, LossSpec, huber,
                            prox_abs, prox_huber, prox_huber_of_norm, prox_norm,
                            prox_separable, project_ball, project_box)

OPS = catalogue()
IDS = [name for name, _, _ in OPS]


def test_huber_examples():
    assert huber(0.0, 1.0) == 0.0
    assert huber(3.0, 1.0) == 2.5
    t = 0.7
    assert huber(t, t) == pytest.approx(0.5 * t * t)
    assert t * (t - 0.5 * t) == pytest.approx(0.5 * t * t)


def test_huber_is_smooth_at_knee():
    t, h = 1.3, 1e-7
    left = (huber(t, t) - huber(t - h, t)) / h
    right = (huber(t + h, t) - huber(t, t)) / h
    assert left == pytest.approx(right, abs=1e-6)


@pytest.mark.parametrize("x, expected", [(3, 2), (0.5, 0), (-3, -2)])
def test_prox_abs_examples(x, expected):
    assert prox_abs(np.array([x], float), 1.0)[0] == expected


def test_prox_norm_examples():
    np.testing.assert_allclose(prox_norm([3, 4, 0], 1.0), [2.4, 3.2, 0.0])
    np.testing.assert_array_equal(prox_norm([0.3, 0.4, 0], 0.5), 0.0)
    np.testing.assert_array_equal(prox_norm([0, 0, 0], 1.0), 0.0)
    np.testing.assert_allclose(prox_norm([3, 4, 0], 1e-12), [3, 4, 0], rtol=1e-12)


@pytest.mark.parametrize("x, t, gamma, expected", [
    (1.0, 1.0, 1.0, 0.5),
    (5.0, 1.0, 1.0, 4.0),
    (2.0, 1.0, 4.0, 0.4),
    (4.0, 1.0, 4.0, 0.8),
])
def test_prox_huber_examples(x, t, gamma, expected):
    assert prox_huber(x, t, gamma) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("x, t, gamma", [(2.0, 1.0, 4.0), (4.0, 1.0, 4.0), (-7.5, 0.3, 2.5)])
def test_prox_huber_brute_force(x, t, gamma):
    brute = brute_force_scalar_prox(lambda u: huber(u, t), x, gamma)
    assert prox_huber(x, t, gamma) == pytest.approx(brute, abs=2e-5)


def test_printed_form_departs_from_definition_off_unit_step():
    # at step 4 the printed shift t*sqrt(step) gives 2.0 for x = 4; the minimizer is 0.8
    x, t, gamma = 4.0, 1.0, 4.0
    printed = x - t * np.sqrt(gamma) * np.sign(x)
    brute = brute_force_scalar_prox(lambda u: huber(u, t), x, gamma)
    assert printed == 2.0
    assert brute == pytest.approx(0.8, abs=1e-5)


def test_prox_huber_matches_printed_formula_at_unit_step(rng):
    xs = np.r_[np.linspace(-10, 10, 2001), rng.normal(size=500) * 5]
    for t in (0.1, 0.5, 1.0, 2.0, 3.7):
        for x in xs:
            assert prox_huber(x, t, 1.0) == printed_huber_prox_at_unit_step(x, t)


def test_prox_huber_of_norm_examples():
    np.testing.assert_array_equal(prox_huber_of_norm([0, 0, 0], 1.0, 1.0), 0.0)
    np.testing.assert_allclose(prox_huber_of_norm([3, 4, 0], 10.0, 1.0), [1.5, 2.0, 0.0])
    x = np.array([300.0, 400.0, 0.0])
    np.testing.assert_allclose(prox_huber_of_norm(x, 1.0, 2.0), x - 2.0 * x / 500.0)


def test_prox_huber_of_norm_brute_force():
    # coarse 3D grid search in the quadratic zone
    x, t, gamma = np.array([3.0, 4.0, 0.0]), 10.0, 1.0
    g = np.linspace(-1, 5, 121)
    U = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    obj = 0.5 * np.sum((U - x) ** 2, axis=1) + gamma * huber(np.linalg.norm(U, axis=1), t)
    np.testing.assert_allclose(U[np.argmin(obj)], [1.5, 2.0, 0.0], atol=0.05)


def test_prox_separable_examples():
    x = np.array([3, -0.5, 0.2, -4.0])
    np.testing.assert_array_equal(prox_separable(x, 1, lambda b: prox_abs(b, 1.0)),
                                  prox_abs(x, 1.0))
    out = prox_separable([3, 4, 0, 0, 0, 0.5], 3, lambda b: prox_norm(b, 1.0))
    np.testing.assert_allclose(out, [2.4, 3.2, 0, 0, 0, 0])
    np.testing.assert_array_equal(prox_separable(x, 2, lambda b: b), x)
    with pytest.raises(DimensionMismatch):
        prox_separable(x, 3, lambda b: b)


@pytest.mark.parametrize("kind", [LossKind.BLOCK_NORM, LossKind.BLOCK_HUBER_NORM])
def test_block_losses_equal_separable_composition(kind, rng):
    spec = LossSpec(kind, 1.5 if kind.is_huber else None)
    single = (lambda b: prox_norm(b, 0.7)) if kind is LossKind.BLOCK_NORM \
        else (lambda b: prox_huber_of_norm(b, 1.5, 0.7))
    for _ in range(50):
        x = rng.normal(size=12) * 3
        x[3:6] = 0.0
        np.testing.assert_allclose(spec.prox(x, 0.7), prox_separable(x, 3, single), rtol=1e-14)


def test_project_box_examples():
    box = BoxConstraint([0, 0, 0], [2048, 2048, 2048])
    np.testing.assert_array_equal(project_box([-5, 3000, 10], box), [0, 2048, 10])
    np.testing.assert_array_equal(project_box([1, 2, 3], box), [1, 2, 3])
    np.testing.assert_array_equal(project_box([-1e9, 5, 1e9], BoxConstraint.unbounded()),
                                  [-1e9, 5, 1e9])
    with pytest.raises(ValueError):
        BoxConstraint([1, 0, 0], [0, 1, 1])


def test_field_of_view_box():
    box = BoxConstraint.field_of_view(2048, 1024).expand(5)
    np.testing.assert_array_equal(project_box([-1, 2000, -7, -1e6, 1e6], box),
                                  [0, 1024, 0, -1e6, 1e6])


@pytest.mark.parametrize("name, f, prox", OPS, ids=IDS)
def test_prox_oracle(name, f, prox):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(20):
        x, gamma, t = random_draw(rng)
        ok, best, worst = prox_beats_perturbations(f, prox, x, gamma, t, rng, count=300)
        assert ok, (name, x, gamma, t, best, worst)


@pytest.mark.parametrize("name, f, prox", OPS, ids=IDS)
def test_firm_nonexpansiveness(name, f, prox):
    rng = np.random.default_rng(7)
    for _ in range(5):
        _, gamma, t = random_draw(rng)
        assert firmly_nonexpansive(prox, gamma, t, rng, pairs=100)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_moreau_identity(seed):
    rng = np.random.default_rng(seed)
    x, gamma, _ = random_draw(rng)
    # |.|_2 is conjugate to the unit-ball indicator, |.|_1 to the unit-box indicator
    np.testing.assert_allclose(prox_norm(x, gamma) + gamma * project_ball(x / gamma),
                               x, atol=1e-12 * max(1, np.abs(x).max()))
    np.testing.assert_allclose(prox_abs(x, gamma) + gamma * np.clip(x / gamma, -1, 1),
                               x, atol=1e-12 * max(1, np.abs(x).max()))


def test_huber_limits(rng):
    u = np.linspace(-5, 5, 101)
    np.testing.assert_allclose(huber(u, 1e9), 0.5 * u * u)
    for gamma in (0.1, 1.0, 3.0):
        np.testing.assert_allclose(prox_huber(u, 1e9, gamma), u / (1 + gamma))
        # L_t ~ t |u| as t -> 0
        t = 1e-9
        np.testing.assert_allclose(prox_huber(u, t, gamma), prox_abs(u, gamma * t),
                                   atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_rotation_equivariance(seed):
    rng = np.random.default_rng(seed)
    R = Rotation.random(random_state=rng.integers(2**31)).as_matrix()
    x = rng.normal(size=3) * 10 ** rng.uniform(-1, 2)
    gamma, t = 10 ** rng.uniform(-2, 1), 10 ** rng.uniform(-1, 1)
    np.testing.assert_allclose(prox_norm(R @ x, gamma), R @ prox_norm(x, gamma),
                               atol=1e-12 * max(1, np.linalg.norm(x)))
    np.testing.assert_allclose(prox_huber_of_norm(R @ x, t, gamma),
                               R @ prox_huber_of_norm(x, t, gamma),
                               atol=1e-12 * max(1, np.linalg.norm(x)))


@pytest.mark.parametrize("text, kind, t", [
    ("l1", LossKind.ABS, None), ("l2", LossKind.GLOBAL_NORM, None),
    ("block-l2", LossKind.BLOCK_NORM, None), ("sq", LossKind.SQUARED_BLOCKS, None),
    ("huber:t=1.5", LossKind.HUBER, 1.5), ("huber-norm:t=2", LossKind.HUBER_GLOBAL_NORM, 2.0),
    ("block-huber:t=0.25", LossKind.BLOCK_HUBER_NORM, 0.25),
    ("huber", LossKind.HUBER, None), ("huber:t=auto", LossKind.HUBER, None),
])
def test_loss_parse(text, kind, t):
    spec = LossSpec.parse(text)
    assert spec.kind is kind and spec.huber_threshold == t
    assert LossSpec.parse(str(spec)) == spec


@pytest.mark.parametrize("text", ["l3", "huber:t=-1", "huber:t=x", "l1:t=2", ""])
def test_loss_parse_errors(text):
    with pytest.raises(ValueError) as info:
        LossSpec.parse(text)
    assert LOSS_GRAMMAR in str(info.value) or "positive" in str(info.value)


def test_loss_codes_follow_declaration_order():
    assert [k.code for k in LossKind] == list(range(len(LossKind)))
