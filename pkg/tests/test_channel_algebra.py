import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rmtqubit.channel_algebra import (
    NonInvertibleChannelError, apply_superop, choi_eigenvalues, choi_from_point, intermediate_map,
    invert_superop, is_completely_positive, reshuffle, superop_from_point, trace_norm, unvec, vec,
    x_choi, x_superop,
)
from rmtqubit.dynamics import ChannelPoint, ModelParams, simulate_realization

def random_point(rng, t=0.0):
    """A completely positive X-form channel point."""
    r = rng.uniform(0, 1)
    a1, a2 = rng.uniform(0, r), rng.uniform(0, 1 - r)
    return ChannelPoint(t, r, a1 * np.exp(2j * np.pi * rng.uniform()), a2 * np.exp(2j * np.pi * rng.uniform()))


def physical_superop(maps):
    """Column-stacked superoperator from <a|L(|i><j|)|b>."""
    L = np.zeros((4, 4), dtype=complex)
    for i in range(2):
        for j in range(2):
            for a in range(2):
                for b in range(2):
                    L[a + 2 * b, i + 2 * j] = maps[i, j, a, b]
    return L


@given(arrays(np.complex128, (4, 4), elements=st.complex_numbers(max_magnitude=5, allow_nan=False)))
def test_reshuffle_is_involution(m):
    assert np.array_equal(reshuffle(reshuffle(m)), m)


@given(r=st.floats(0, 1), z1=st.complex_numbers(max_magnitude=1), z2=st.complex_numbers(max_magnitude=1))
def test_reshuffle_maps_superop_to_choi(r, z1, z2):
    assert np.allclose(reshuffle(x_superop(r, z1, z2)), x_choi(r, z1, z2))


def test_superop_acts_as_channel():
    rho = np.array([[0.7, 0.2 - 0.1j], [0.2 + 0.1j, 0.3]])
    r, z1, z2 = 0.8, 0.5 * np.exp(0.3j), 0.1j
    out = apply_superop(x_superop(r, z1, z2), rho)
    # Direct action: populations mix through r, coherence <0|.|1> picks z1 and z2 terms
    assert out[0, 0] == pytest.approx(r * 0.7 + (1 - r) * 0.3)
    assert out[1, 1] == pytest.approx((1 - r) * 0.7 + r * 0.3)
    assert out[1, 0] == pytest.approx(z1 * rho[1, 0] + z2 * rho[0, 1])
    assert np.allclose(out, out.conj().T)


def test_vec_roundtrip(rng):
    m = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    assert np.array_equal(unvec(vec(m)), m)
    assert np.array_equal(vec(m), m.T.reshape(-1))


def test_physical_maps_match_conventions():
    p = ModelParams(0.7, 0.4, 6, 1, master_seed=2)
    ch = simulate_realization(p, 0, [0.0, 0.8, 2.5], full=True)
    rho = np.array([[0.6, 0.3j], [-0.3j, 0.4]])
    for k in range(3):
        L = physical_superop(ch.maps[k])
        assert np.allclose(apply_superop(L, rho), ch.evolve(rho)[k], atol=1e-12)
        assert is_completely_positive(reshuffle(L), tol=1e-10)
        assert L[0, 0] == pytest.approx(ch.r[k])
        # stored parameters are those of the complex-conjugate channel
        assert L[1, 1] == pytest.approx(np.conj(ch.z1[k]))
        assert L[1, 2] == pytest.approx(np.conj(ch.z2[k]))


def test_composition_is_matrix_product(rng):
    a, b = random_point(rng), random_point(rng)
    La, Lb = superop_from_point(a), superop_from_point(b)
    rho = np.array([[0.25, 0.1 + 0.2j], [0.1 - 0.2j, 0.75]])
    assert np.allclose(apply_superop(La @ Lb, rho), apply_superop(La, apply_superop(Lb, rho)))


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=60)
def test_inverse_matches_dense(seed):
    p = random_point(np.random.default_rng(seed))
    L = superop_from_point(p)
    if abs(2 * p.r - 1) < 1e-3 or abs(abs(p.z1) ** 2 - abs(p.z2) ** 2) < 1e-3:
        return
    assert np.allclose(invert_superop(L), np.linalg.inv(L), atol=1e-8)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=60)
def test_intermediate_map_closed_form(seed):
    rng = np.random.default_rng(seed)
    p, q = random_point(rng), random_point(rng, 1.0)
    try:
        m = intermediate_map(p, q)
    except NonInvertibleChannelError:
        return
    dense = reshuffle(superop_from_point(q) @ np.linalg.inv(superop_from_point(p)))
    assert np.allclose(m.choi(), dense, atol=1e-8 * max(1.0, np.abs(dense).max()))
    assert np.allclose(np.sort(choi_eigenvalues(m)), np.linalg.eigvalsh(m.choi()), atol=1e-9 * max(1, abs(m.q)))


def test_intermediate_map_of_identity_step():
    p = random_point(np.random.default_rng(5))
    m = intermediate_map(p, p)
    assert m.q == pytest.approx(1.0)
    assert m.Z1 == pytest.approx(1.0)
    assert abs(m.Z2) < 1e-12
    assert trace_norm(choi_eigenvalues(m)) == pytest.approx(2.0)


def test_choi_of_point(rng):
    p = random_point(rng)
    assert np.array_equal(choi_from_point(p), x_choi(p.r, p.z1, p.z2))
    assert is_completely_positive(choi_from_point(p))
    assert np.trace(choi_from_point(p)) == pytest.approx(2.0)


def test_cp_violation_detected():
    assert not is_completely_positive(x_choi(0.5, 0.9, 0.9))


@pytest.mark.parametrize("r, z1, z2", [(0.5, 0.5, 0.1), (0.9, 0.4, 0.4), (0.9, 0.3, 0.3j)])
def test_non_invertible(r, z1, z2):
    p = ChannelPoint(0.0, r, z1, z2)
    with pytest.raises(NonInvertibleChannelError):
        invert_superop(superop_from_point(p))
    with pytest.raises(NonInvertibleChannelError):
        intermediate_map(p, p)


def test_trace_norm():
    assert trace_norm([1.0, -0.5, 0.2]) == pytest.approx(1.7)
