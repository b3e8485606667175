import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from alfalab import gazesim
from alfalab.errors import ContractError, PoseRangeError
from alfalab.numerics import make_rng

# angle between (0.10, 0.20) and (0.15, 0.18), frozen from a 50-digit mpmath evaluation
ANGLE_EXAMPLE_DEG = 3.0376078183974584


def _profile(**kw):
    base = gazesim.source_profile(0, make_rng(0))
    vals = {**base.appearance(), **kw}
    return gazesim.UserProfile(0, **vals)


def test_angle_oracle_and_example():
    mpmath.mp.dps = 50

    def vec(y, p):
        return [mpmath.cos(p) * mpmath.sin(y), mpmath.sin(p), mpmath.cos(p) * mpmath.cos(y)]

    a, b = vec(mpmath.mpf("0.10"), mpmath.mpf("0.20")), vec(mpmath.mpf("0.15"), mpmath.mpf("0.18"))
    exact = mpmath.degrees(mpmath.acos(sum(x * y for x, y in zip(a, b))))
    assert abs(float(exact) - ANGLE_EXAMPLE_DEG) <= 1e-15
    assert gazesim.angular_error((0.10, 0.20), (0.15, 0.18)) == pytest.approx(ANGLE_EXAMPLE_DEG, abs=1e-9)


def test_angle_trivial_cases():
    assert gazesim.angular_error((0.3, -0.2), (0.3, -0.2)) == 0.0
    assert gazesim.angular_error((math.pi / 2, 0.0), (0.0, 0.0)) == pytest.approx(90.0, abs=1e-12)


angles = st.floats(-math.pi, math.pi, allow_nan=False)


@given(angles, angles, angles, angles)
def test_angle_symmetric_and_bounded(y1, p1, y2, p2):
    a = gazesim.angular_error((y1, p1), (y2, p2))
    b = gazesim.angular_error((y2, p2), (y1, p1))
    assert a == b
    assert 0.0 <= a <= 180.0 and not math.isnan(a)


def test_flip_helpers():
    m = np.array([[1, 2, 3], [4, 5, 6]])
    assert gazesim.flip_image(m).tolist() == [[3, 2, 1], [6, 5, 4]]
    sym = np.array([[1, 2, 1]])
    assert np.array_equal(gazesim.flip_image(sym), sym)
    assert gazesim.flip_yaw((0.3, 0.1)).tolist() == [-0.3, 0.1]
    assert gazesim.flip_yaw((0.0, 0.7)).tolist() == [0.0, 0.7]


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_flip_yaw_involution(y, p):
    assert gazesim.flip_yaw(gazesim.flip_yaw((y, p))).tolist() == [y, p]


def test_symmetry_loss_cases():
    assert gazesim.symmetry_loss([((0.3, 0.1), (-0.3, 0.1))]) == 0.0
    assert gazesim.symmetry_loss([((0.3, 0.1), (-0.2, 0.2))]) == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(ContractError):
        gazesim.symmetry_loss([])


def test_symmetry_loss_batch_scalar_oracle():
    rng = make_rng(3)
    pairs = [(tuple(rng.normal(size=2)), tuple(rng.normal(size=2))) for _ in range(5)]
    total = 0.0
    for (y, p), (yf, pf) in pairs:
        total += abs(y - (-yf)) + abs(p - pf)
    assert gazesim.symmetry_loss(pairs) == pytest.approx(total / 5, abs=1e-15)


@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2)),
                min_size=1, max_size=6))
def test_symmetry_loss_nonnegative_and_zero_set(rows):
    pairs = [((a, b), (c, d)) for a, b, c, d in rows]
    loss = gazesim.symmetry_loss(pairs)
    assert loss >= 0.0
    mirrored = [((a, b), (-a, b)) for a, b, _, _ in rows]
    assert gazesim.symmetry_loss(mirrored) == 0.0


def test_render_frontal_is_mirror_symmetric():
    img = gazesim.render(_profile(light_gradient=0.0), 0.0, 0.0)
    assert np.abs(img - gazesim.flip_image(img)).max() <= 1e-12


def test_mirror_of_render_equals_negated_yaw():
    rng = make_rng(4)
    for _ in range(100):
        prof = gazesim.source_profile(0, rng)
        yaw, pitch = gazesim.sample_pose(prof, rng)
        lhs = gazesim.flip_image(gazesim.render(prof, yaw, pitch))
        mirrored = gazesim.UserProfile(0, **{**prof.appearance(), "light_gradient": -prof.light_gradient})
        assert np.array_equal(lhs, gazesim.render(mirrored, -yaw, pitch))


def test_generation_deterministic_and_range_checked():
    prof = _profile()
    a = gazesim.gen_sample(prof, 0.1, -0.1, make_rng(5))
    b = gazesim.gen_sample(prof, 0.1, -0.1, make_rng(5))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.image.min() >= 0 and a.image.max() <= 1
    with pytest.raises(PoseRangeError):
        gazesim.gen_sample(prof, 1.0, 0.0, make_rng(5))


def test_population_deterministic():
    def pop():
        rng = make_rng(6)
        out = []
        for u in range(3):
            out += gazesim.user_samples(gazesim.source_profile(u, rng), 4, rng)
        return gazesim.stack(out)

    (xa, ya), (xb, yb) = pop(), pop()
    assert xa.tobytes() == xb.tobytes() and ya.tobytes() == yb.tobytes()


def test_shifted_profile_leaves_source_range():
    for u in range(20):
        prof = gazesim.shifted_profile(u, make_rng(7, u), margin=1.0)
        app = prof.appearance()
        for k in gazesim.SHIFTED_SCALARS:
            lo, hi = gazesim.SOURCE_RANGES[k]
            blo, bhi = gazesim.APPEARANCE_BOUNDS[k]
            assert blo <= app[k] <= bhi
            assert not lo < app[k] < hi
        assert prof.light_gradient < 0 < gazesim.SOURCE_RANGES["light_gradient"][0]


def test_frontal_shots():
    prof = _profile()
    samples = gazesim.user_samples(prof, 12, make_rng(8), frontal_first=5)
    for s in samples[:5]:
        assert abs(s.yaw) <= gazesim.FRONTAL_YAW and abs(s.pitch) <= gazesim.FRONTAL_PITCH
    assert [s.index for s in samples] == list(range(12))


def test_augment_shapes_and_range():
    x = np.stack([gazesim.render(_profile(), 0.1 * i, 0.0) for i in range(3)])
    out = gazesim.augment(x, make_rng(9))
    assert out.shape == (6, 32, 32)
    assert np.array_equal(out[:3], x)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.array_equal(gazesim.augment(x, make_rng(9)), out)
