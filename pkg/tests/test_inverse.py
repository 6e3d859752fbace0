import numpy as np
import pytest

from fracdtn.dtn import DtnMatrix, apply_dtn, assemble_dtn_matrix
from fracdtn.errors import IllPosedError, ValidationError
from fracdtn.forward import make_scenario
from fracdtn.geometry import Box, partition
from fracdtn.inverse import (
    ObstacleCandidateFamily,
    bump_datum,
    distinguish_obstacles,
    nodal_solutions,
    recover_obstacle,
    recover_potential,
    runge_approximate,
)

from conftest import LOWER, OMEGA, RING, UPPER

NINE = tuple({"type": "ball", "center": [x, y], "radius": 0.12} for y in (-0.25, 0.0, 0.25) for x in (-0.25, 0.0, 0.25))
ALPHAS = np.geomspace(1e-2, 1e-16, 29)


def ball(r, c=(0.0, 0.0)):
    return {"type": "ball", "center": list(c), "radius": r}


@pytest.fixture(scope="module")
def probe(grid33, part_halves):
    return bump_datum(grid33, part_halves, (0.0, 0.9), 0.4)


@pytest.fixture(scope="module")
def nine(grid33):
    return ObstacleCandidateFamily(grid33, OMEGA, UPPER, LOWER, NINE, ("soft",) * 9)


def _trace(scn, g):
    p = scn.partition
    return apply_dtn(scn, g)[np.searchsorted(p.exterior, p.o2)]


def test_bump_datum(grid33, part_halves):
    g = bump_datum(grid33, part_halves, (0.0, 0.9), 0.4)
    assert np.all(g[np.setdiff1d(np.arange(grid33.size), part_halves.o1)] == 0)
    assert g.max() <= 1.0 and g.max() > 0.9
    with pytest.raises(ValidationError):
        bump_datum(grid33, part_halves, (0.0, -0.9), 0.2)  # centre in the wrong patch


# -- distinguishability -------------------------------------------------------


def test_identical_scenarios_zero(part_halves, Ls33, probe):
    scn = make_scenario(part_halves, Ls33, 1.0)
    d = distinguish_obstacles(scn, scn, probe)
    assert d.discrepancy == 0.0 and not d.distinct


def test_nested_balls_distinct(grid33, Ls33, probe):
    s1 = make_scenario(partition(grid33, OMEGA, ball(0.1), UPPER, LOWER), Ls33, 1.0)
    s2 = make_scenario(partition(grid33, OMEGA, ball(0.18), UPPER, LOWER), Ls33, 1.0)
    assert distinguish_obstacles(s1, s2, probe).distinct


def test_mixed_kinds_random_potentials_distinct(grid33, Ls33_aniso, probe, rng):
    p1 = partition(grid33, OMEGA, ball(0.12, (0.2, 0.1)), UPPER, LOWER)
    p2 = partition(grid33, OMEGA, ball(0.14, (-0.1, 0.2)), UPPER, LOWER)
    s1 = make_scenario(p1, Ls33_aniso, rng.uniform(0.5, 1.5, grid33.size), "hard")
    s2 = make_scenario(p2, Ls33_aniso, rng.uniform(0.5, 1.5, grid33.size), "soft")
    d = distinguish_obstacles(s1, s2, probe)
    assert d.distinct and min(d.min_abs_q) >= 0.5


def test_distinguish_preconditions(part_halves, grid33, Ls33, probe):
    scn = make_scenario(part_halves, Ls33, 1.0)
    with pytest.raises(ValidationError):
        distinguish_obstacles(scn, scn, np.zeros(grid33.size))
    hard0 = make_scenario(part_halves, Ls33, 0.0, "hard")
    with pytest.raises(ValidationError):
        distinguish_obstacles(hard0, scn, probe)
    other = make_scenario(partition(grid33, OMEGA, ball(0.15), RING, RING), Ls33, 1.0)
    with pytest.raises(ValidationError):
        distinguish_obstacles(scn, other, probe)


# -- obstacle search ----------------------------------------------------------


def test_family_rejects_duplicates(grid33):
    fam = ObstacleCandidateFamily(grid33, OMEGA, UPPER, LOWER, (ball(0.15), ball(0.16)), ("soft", "soft"))
    with pytest.raises(ValidationError):
        fam.partitions()
    with pytest.raises(ValidationError):
        ObstacleCandidateFamily(grid33, OMEGA, UPPER, LOWER, (ball(0.15),), ())


def test_noiseless_self_tests(nine, Ls33, probe):
    scns = nine.scenarios(Ls33, 1.0)
    for k, scn in enumerate(scns):
        rec = recover_obstacle(_trace(scn, probe), probe, nine, 1.0, Ls33)
        assert rec.best_index == k
        assert rec.best_misfit < 1e-10 and rec.in_family
        assert len(rec.misfits) == 9


def test_noisy_self_tests(nine, Ls33, probe):
    rng = np.random.default_rng(3)
    scns = nine.scenarios(Ls33, 1.0)
    for k in (0, 4, 8):
        meas = _trace(scns[k], probe)
        e = rng.standard_normal(meas.size)
        noisy = meas + 0.01 * np.linalg.norm(meas) * e / np.linalg.norm(e)
        rec = recover_obstacle(noisy, probe, nine, 1.0, Ls33, threads=2)
        assert rec.best_index == k and not rec.in_family


def test_out_of_family_obstacle(nine, grid33, Ls33, probe):
    truth = make_scenario(partition(grid33, OMEGA, ball(0.16, (0.25, 0.0)), UPPER, LOWER), Ls33, 1.0)
    rec = recover_obstacle(_trace(truth, probe), probe, nine, 1.0, Ls33)
    # nearest in misfit, which need not be the geometric neighbour
    assert rec.best_index == int(np.argmin(rec.misfits))
    assert not rec.in_family and rec.best_misfit > rec.tolerance


def test_search_preconditions(nine, grid33, Ls33, probe):
    empty = ObstacleCandidateFamily(grid33, OMEGA, UPPER, LOWER, (), ())
    with pytest.raises(ValidationError):
        recover_obstacle(np.zeros(5), probe, empty, 1.0, Ls33)
    n2 = nine.partitions()[0].o2.size
    with pytest.raises(ValidationError):
        recover_obstacle(np.zeros(n2 + 1), probe, nine, 1.0, Ls33)
    with pytest.raises(ValidationError):
        recover_obstacle(np.zeros(n2), np.zeros(grid33.size), nine, 1.0, Ls33)


def test_all_candidates_ill_posed(grid33, Ls33, probe):
    from fracdtn.forward import resonant_potential

    fam = ObstacleCandidateFamily(grid33, OMEGA, UPPER, LOWER, (ball(0.15),), ("soft",))
    c = resonant_potential(fam.partitions()[0], Ls33, "soft")
    with pytest.raises(IllPosedError):
        recover_obstacle(np.zeros(fam.partitions()[0].o2.size), probe, fam, c, Ls33)


# -- Runge ---------------------------------------------------------------------


def test_runge_target_in_range(part_ring, Ls33, rng):
    scn = make_scenario(part_ring, Ls33, 1.0)
    phi = nodal_solutions(scn) @ rng.standard_normal(part_ring.o1.size)
    res = runge_approximate(scn, phi, ALPHAS)
    assert res.residual < 1e-8
    assert res.monotone


def test_runge_constant_target_decreases(part_halves, Ls33):
    scn = make_scenario(part_halves, Ls33, 1.0)
    res = runge_approximate(scn, np.ones(part_halves.annulus.size), np.geomspace(1e-2, 1e-10, 9))
    r = np.array([x for _, x in res.path])
    assert np.all(np.diff(r) < 0)
    assert res.monotone


def test_runge_subbox_indicator(part_ring, Ls33, grid33):
    assert part_ring.o1.size >= part_ring.annulus.size / 2
    scn = make_scenario(part_ring, Ls33, 1.0)
    phi = Box((-0.3, -0.3), (0.3, 0.0)).contains(grid33.nodes[part_ring.annulus]).astype(float)
    res = runge_approximate(scn, phi, ALPHAS)
    assert res.relative_residual < 0.1 and res.monotone


def test_runge_target_selection(part_halves, Ls33):
    scn = make_scenario(part_halves, Ls33, 1.0)
    res = runge_approximate(scn, np.ones(part_halves.annulus.size), ALPHAS, target=0.2)
    assert res.relative_residual <= 0.2
    assert res.alpha > ALPHAS[-1]


def test_runge_preconditions(part_halves, Ls33):
    scn = make_scenario(part_halves, Ls33, 1.0)
    phi = np.ones(part_halves.annulus.size)
    for bad in ([], [1e-3, 1e-2], [1e-2, -1.0]):
        with pytest.raises(ValidationError):
            runge_approximate(scn, phi, bad)
    with pytest.raises(ValidationError):
        runge_approximate(scn, np.ones(3), ALPHAS)


# -- potential recovery -----------------------------------------------------------


@pytest.fixture(scope="module")
def ring_base(part_ring, Ls33):
    scn2 = make_scenario(part_ring, Ls33, 1.0)
    return scn2, assemble_dtn_matrix(scn2)


def _block_bump(grid, part, centre=(19, 16)):
    dq = np.zeros(grid.size)
    for a in (-1, 0, 1):
        for b in (-1, 0, 1):
            dq[grid.index((centre[0] + a, centre[1] + b))] = 1.0
    assert set(np.flatnonzero(dq)) <= set(part.annulus)
    return dq


def test_equal_potentials_give_zero(ring_base):
    scn2, d2 = ring_base
    rec = recover_potential(d2, d2, scn2, scn2)
    assert np.all(rec.dq == 0)


def test_noiseless_block_recovery(ring_base, grid33, part_ring, Ls33):
    scn2, d2 = ring_base
    dq = _block_bump(grid33, part_ring)
    scn1 = make_scenario(part_ring, Ls33, 1.0 + dq)
    rec = recover_potential(assemble_dtn_matrix(scn1), d2, scn1, scn2)
    true = dq[part_ring.annulus]
    assert rec.conditioning["numerical_rank"] == part_ring.annulus.size
    assert np.linalg.norm(rec.dq - true) / np.linalg.norm(true) < 1e-6
    assert np.array_equal(rec.dq_nodes[part_ring.annulus], rec.dq)


def test_noiseless_random_recovery_hard(grid33, Ls33_aniso):
    part = partition(grid33, OMEGA, ball(0.15), UPPER, LOWER)
    rng = np.random.default_rng(8)
    q2 = rng.uniform(0.5, 1.5, grid33.size)
    dq = np.zeros(grid33.size)
    dq[part.annulus] = rng.uniform(-0.5, 0.5, part.annulus.size)
    s1 = make_scenario(part, Ls33_aniso, q2 + dq, "hard")
    s2 = make_scenario(part, Ls33_aniso, q2, "hard")
    rec = recover_potential(assemble_dtn_matrix(s1), assemble_dtn_matrix(s2), s1, s2)
    assert np.linalg.norm(rec.dq - dq[part.annulus]) / np.linalg.norm(dq) < 1e-6


def test_noisy_recovery_with_discrepancy_principle(ring_base, grid33, part_ring, Ls33):
    scn2, d2 = ring_base
    dq = _block_bump(grid33, part_ring)
    scn1 = make_scenario(part_ring, Ls33, 1.0 + dq)
    d1 = assemble_dtn_matrix(scn1)
    rng = np.random.default_rng(21)
    E = rng.standard_normal(d1.shape)
    E *= 1e-3 * np.linalg.norm(d1.values - d2.values) / np.linalg.norm(E)
    noisy = DtnMatrix(d1.values + E, d1.o1, d1.o2, d1.cell_measure, d1.meta)
    rec = recover_potential(noisy, d2, scn1, scn2, noise_level=np.linalg.norm(E) * grid33.cell_measure)
    true = dq[part_ring.annulus]
    assert rec.rank < part_ring.annulus.size
    assert np.linalg.norm(rec.dq - true) / np.linalg.norm(true) < 0.2


def test_potential_preconditions(grid33, Ls33, ring_base):
    scn2, d2 = ring_base
    small = {"type": "box", "lo": [0.6, 0.6], "hi": [0.8, 0.8]}  # 2 x 2 nodes
    p = partition(grid33, OMEGA, ball(0.15), small, small)
    s = make_scenario(p, Ls33, 1.0)
    d = assemble_dtn_matrix(s)
    with pytest.raises(ValidationError):
        recover_potential(d, d, s, s)
    rec = recover_potential(d, d, s, s, allow_underdetermined=True)
    assert np.all(rec.dq == 0)
    with pytest.raises(ValidationError):
        recover_potential(d2, d2, s, s)
