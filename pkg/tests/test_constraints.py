import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from eqfpn.constraints import (AffineOrthant, AffineSet, Box, ConstraintError, IntersectionList, MinkowskiSum,
                               Orthant, Simplex, SimplexProduct, lift, lower, project_affine, project_box,
                               project_consensus, project_orthant, project_simplex, projection_jvp)
from eqfpn.numerics import RngStream, ShapeError

from oracles import qp_project

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def vectors(n):
    return arrays(np.float64, n, elements=finite)


def braess_affine():
    N = np.array([[-1, 0, -1, 0, 0], [0, 0, 1, -1, -1], [1, -1, 0, 1, 0], [0, 1, 0, 0, 1]], float)
    return AffineSet(N, [-1.0, 0.0, 0.0, 1.0])


SETS = {
    "orthant": Orthant(4),
    "box": Box(4, -0.4, 0.4),
    "simplex": Simplex(4),
    "simplex_product": SimplexProduct((2, 2)),
    "affine": AffineSet([[1.0, 1.0, 0.0, 0.0], [0.0, 1.0, -1.0, 2.0]], [1.0, 0.5]),
}


def test_orthant_examples():
    np.testing.assert_array_equal(project_orthant([1, -2, 0]), [1, 0, 0])
    np.testing.assert_array_equal(project_orthant([3, 4]), [3, 4])
    np.testing.assert_array_equal(project_orthant([-1, -1]), [0, 0])


def test_box_examples():
    assert project_box(0.0, -0.4, 0.4) == 0.0
    assert project_box(-3.0, -0.4, 0.4) == -0.4
    np.testing.assert_allclose(project_box([0.1, 0.5], -0.3, 0.3), [0.1, 0.3])
    with pytest.raises(ValueError):
        project_box(0.0, 1.0, 0.0)


def test_simplex_examples():
    np.testing.assert_allclose(project_simplex([2, 0, 0]), [1, 0, 0])
    np.testing.assert_allclose(project_simplex([0.2, 0.2, 0.2]), [1 / 3] * 3)
    np.testing.assert_allclose(project_simplex([0.5, 0.5, 1.0]), [1 / 6, 1 / 6, 2 / 3])


def test_affine_examples():
    A = AffineSet([[1.0, 1.0]], [1.0])
    np.testing.assert_allclose(project_affine([0, 0], A), [0.5, 0.5])
    np.testing.assert_allclose(project_affine([0.3, 0.7], A), [0.3, 0.7])
    B = AffineSet([[1.0, -1.0]], [0.0])
    np.testing.assert_allclose(project_affine([2, 0], B), [1, 1])
    with pytest.raises(ShapeError):
        project_affine([1, 2, 3], A)


def test_affine_empty_set_rejected():
    with pytest.raises(ConstraintError):
        AffineSet([[1.0, 1.0], [1.0, 1.0]], [0.0, 1.0])


def test_consensus_and_lifting():
    np.testing.assert_allclose(project_consensus([[1, 2], [3, 4]]), [[2, 3], [2, 3]])
    np.testing.assert_allclose(project_consensus([[1, 2], [1, 2]]), [[1, 2], [1, 2]])
    np.testing.assert_allclose(project_consensus([[5, 6]]), [[5, 6]])
    np.testing.assert_allclose(lift([1, 2], 2), [[1, 2], [1, 2]])
    np.testing.assert_allclose(lower([[1, 0], [0, 1]]), [1, 1])
    np.testing.assert_allclose(lower(lift([1.5, -2.0], 3)), [4.5, -6.0])


def test_jvp_examples():
    A = AffineSet([[1.0, 1.0]], [1.0])
    np.testing.assert_allclose(projection_jvp(A, [0.0, 0.0], [1.0, 0.0]), [0.5, -0.5])
    np.testing.assert_allclose(projection_jvp("orthant", [1.0, -1.0], [1.0, 1.0]), [1.0, 0.0])
    with pytest.raises(NotImplementedError):
        projection_jvp("cone", [1.0], [1.0])


@settings(max_examples=100, deadline=None)
@given(z=vectors(5))
def test_simplex_matches_enumeration(z):
    want = qp_project(z, np.ones((1, 5)), np.ones(1))
    np.testing.assert_allclose(project_simplex(z), want, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(z=vectors(5))
def test_affine_orthant_oracle(z):
    A = braess_affine()
    x = qp_project(z, A.N, A.b)
    assert np.all(x >= -1e-12)
    np.testing.assert_allclose(A.N @ x, A.b, atol=1e-9)


@pytest.mark.parametrize("name", sorted(SETS))
@settings(max_examples=50, deadline=None)
@given(z=vectors(4), w=vectors(4))
def test_projection_properties(name, z, w):
    C = SETS[name]
    pz, pw = C.project(z), C.project(w)
    np.testing.assert_allclose(C.project(pz), pz, atol=1e-12)
    diff = pz - pw
    assert diff @ diff <= diff @ (z - w) + 1e-10
    assert C.contains(pz, atol=1e-9)


@pytest.mark.parametrize("name", sorted(SETS))
def test_variational_inequality(name):
    C = SETS[name]
    g = RngStream(11, name).generator
    for _ in range(10):
        z = g.normal(scale=3, size=4)
        p = C.project(z)
        ys = C.project(g.normal(scale=3, size=(100, 4)))
        assert np.all((ys - p) @ (z - p) <= 1e-8)


@pytest.mark.parametrize("name", sorted(SETS))
def test_jvp_matches_finite_differences(name):
    C = SETS[name]
    g = RngStream(5, name).generator
    h = 1e-6
    done = 0
    while done < 20:
        z, t = g.normal(scale=2, size=4), g.normal(size=4)
        zp, zm = C.project(z + h * t), C.project(z - h * t)
        # skip points within 1e-3 of an active-set change along the tangent
        far = C.project(z + 1e-3 * t), C.project(z - 1e-3 * t)
        if np.linalg.norm(far[0] + far[1] - 2 * C.project(z)) > 1e-9:
            continue
        fd = (zp - zm) / (2 * h)
        np.testing.assert_allclose(C.jvp(z, t), fd, atol=1e-5)
        done += 1


def test_jvp_is_symmetric():
    g = RngStream(9).generator
    for C in SETS.values():
        z = g.normal(size=4)
        J = np.stack([C.jvp(z, e) for e in np.eye(4)])
        np.testing.assert_allclose(J, J.T, atol=1e-12)


def test_simplex_product_blocks():
    C = SimplexProduct((2, 3))
    x = C.project([3.0, 1.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(x, [1, 0, 1 / 3, 1 / 3, 1 / 3])
    with pytest.raises(ConstraintError):
        SimplexProduct(())


def test_minkowski_shared_and_general_agree():
    A = braess_affine()
    demands = np.array([[-1.0, 0, 0, 1.0], [-0.5, 0, 0.5, 0]])
    shared = MinkowskiSum.shared_incidence(A.N, demands)
    general = MinkowskiSum([AffineOrthant(AffineSet(A.N.copy() + 0.0, b)) for b in demands])
    general.shared = False  # force the per-block path
    z = RngStream(4).generator.normal(size=(3, 2, 5))
    np.testing.assert_allclose(shared.project_affine_blocks(z), general.project_affine_blocks(z), atol=1e-12)
    t = RngStream(5).generator.normal(size=(3, 2, 5))
    np.testing.assert_allclose(shared.affine_jvp_blocks(t), general.affine_jvp_blocks(t), atol=1e-12)
    with pytest.raises(ShapeError):
        shared.project_affine_blocks(np.zeros((3, 5)))


def test_intersection_validation():
    with pytest.raises(ConstraintError):
        IntersectionList([])
    with pytest.raises(ShapeError):
        IntersectionList([Orthant(2), Orthant(3)])
