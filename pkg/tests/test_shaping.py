import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpvtune.frf import LocalFrf
from lpvtune.shaping import (BLOCKS, WeightSet, block_norms, channel_scalings,
                             closed_loop_blocks, comp_or_control_weight, crossover_frequencies,
                             local_norm, process_weight, sensitivity_peaks_db,
                             sensitivity_weight, sigma_max, weighted_norm,
                             write_weight_preview)

WB, ALPHA = 60.0, 2.0


def test_sensitivity_branches():
    assert sensitivity_weight(WB / ALPHA, WB, ALPHA, 0.5) == 0.5
    assert sensitivity_weight(WB / (2 * ALPHA), WB, ALPHA, 0.5) == 4.0
    assert sensitivity_weight(1e9, WB, ALPHA, 0.5) == 0.5


def test_comp_or_control_branches():
    assert comp_or_control_weight(ALPHA * WB, WB, ALPHA, 0.7) == 0.7
    assert comp_or_control_weight(2 * ALPHA * WB, WB, ALPHA, 0.5) == 1.0
    assert comp_or_control_weight(1e-3, WB, ALPHA, 0.7) == 0.7


def test_process_branches():
    kp = 3.0
    np.testing.assert_array_equal(process_weight([WB / ALPHA, WB, ALPHA * WB], WB, ALPHA, kp), kp)
    assert process_weight(WB / (2 * ALPHA), WB, ALPHA, kp) == 2 * kp
    assert process_weight(2 * ALPHA * WB, WB, ALPHA, kp) == 2 * kp


@pytest.mark.parametrize("alpha", [1.5, 2.0, 3.7])
def test_breakpoint_continuity(alpha):
    lo, hi = WB / alpha, alpha * WB
    eps = 1e-9
    for fn, bp in ((sensitivity_weight, lo), (comp_or_control_weight, hi),
                   (process_weight, lo), (process_weight, hi)):
        left, at, right = fn([bp * (1 - eps), bp, bp * (1 + eps)], WB, alpha)
        assert abs(left - at) <= 1e-8 * at and abs(right - at) <= 1e-8 * at


def test_monotonicity():
    omega = np.logspace(-1, 4, 500)
    assert np.all(np.diff(sensitivity_weight(omega, WB, ALPHA)) <= 0)
    assert np.all(np.diff(comp_or_control_weight(omega, WB, ALPHA)) >= 0)
    vee = process_weight(omega, WB, ALPHA)
    k = int(np.argmin(vee))
    assert np.all(np.diff(vee[:k + 1]) <= 0) and np.all(np.diff(vee[k:]) >= 0)


@pytest.mark.parametrize("fn", [sensitivity_weight, comp_or_control_weight, process_weight])
def test_weight_errors(fn):
    with pytest.raises(ValueError, match="frequency"):
        fn(0.0, WB, ALPHA)
    with pytest.raises(ValueError, match="alpha"):
        fn(1.0, WB, 1.0)


def _diag_frf(omega, mags):
    resp = np.einsum("fi,ij->fij", np.asarray(mags, dtype=complex), np.eye(len(mags[0])))
    return LocalFrf([], resp)


def test_channel_scalings_exact_grid_point():
    omega = np.array([1.0, 10.0, 100.0])
    frf = _diag_frf(omega, [[1.0, 1.0], [2.0, 0.01], [3.0, 1.0]])
    kr, kp = channel_scalings(frf, omega, 10.0)
    np.testing.assert_array_equal(kp, [0.5, 100.0])
    np.testing.assert_array_equal(kr, [1.0, 0.005])


def test_channel_scalings_double_integrator():
    omega = np.logspace(0, 3, 37)
    frf = LocalFrf([], (1 / (1j * omega) ** 2)[:, None, None])
    kr, kp = channel_scalings(frf, omega, 10.0 * 1.07)
    # log-log interpolation is exact on a power law
    np.testing.assert_allclose(kp, [(10.0 * 1.07) ** 2], rtol=1e-12)
    np.testing.assert_allclose(kr, [0.5 / (10.0 * 1.07) ** 2], rtol=1e-12)


def test_channel_scalings_errors():
    omega = np.array([1.0, 10.0])
    with pytest.raises(ValueError, match="outside"):
        channel_scalings(_diag_frf(omega, [[1.0], [1.0]]), omega, 100.0)
    with pytest.raises(ValueError, match="zero"):
        channel_scalings(_diag_frf(omega, [[0.0], [1.0]]), omega, 5.0)


def test_weight_set_modes():
    omega = np.logspace(0, 3, 61)
    frf = LocalFrf([], np.tile(0.25 * np.eye(2), (61, 1, 1)).astype(complex))
    scaled = WeightSet((WB,)).evaluate(omega, frf)
    fixed = WeightSet((WB,), kr_mode="fixed").evaluate(omega, frf)
    np.testing.assert_allclose(scaled["KS"][0], 0.5 * 0.25)
    np.testing.assert_allclose(fixed["KS"][0], 0.5)
    np.testing.assert_array_equal(scaled["KSP"], fixed["KSP"])
    np.testing.assert_allclose(scaled["SP"][30], 4.0)
    with pytest.raises(ValueError, match="kr_mode"):
        WeightSet((WB,), kr_mode="other")
    with pytest.raises(ValueError, match="3 target"):
        WeightSet((1.0, 2.0, 3.0)).targets(2)


def test_scalar_unit_loop():
    P = np.ones((1, 1, 1), dtype=complex)
    blocks = closed_loop_blocks(P, P)
    for name in BLOCKS:
        np.testing.assert_allclose(blocks[name], 0.5)
    flat = {name: np.ones((1, 1)) for name in BLOCKS}
    assert max(block_norms(P, P, flat).values()) == 0.5


def test_singular_loop_gives_infinite_norm():
    P = np.ones((1, 1, 1), dtype=complex)
    flat = {name: np.ones((1, 1)) for name in BLOCKS}
    assert closed_loop_blocks(P, -P) is None
    assert all(np.isinf(v) for v in block_norms(P, -P, flat).values())


def test_high_gain_suppresses_sensitivity():
    P = np.full((1, 1, 1), 1.0 + 0j)
    K = np.full((1, 1, 1), 1e8 + 0j)
    w = {name: np.ones((1, 1)) for name in BLOCKS}
    assert block_norms(P, K, w)["S"] < 1e-7


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_sigma_max_matches_svd(m, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((20, m, m)) + 1j * rng.standard_normal((20, m, m))
    np.testing.assert_allclose(sigma_max(X), np.linalg.svd(X, compute_uv=False)[:, 0],
                               rtol=1e-12)


def _random_loop(rng, m, nf):
    P = rng.standard_normal((nf, m, m)) + 1j * rng.standard_normal((nf, m, m))
    K = rng.standard_normal((nf, m, m)) + 1j * rng.standard_normal((nf, m, m))
    w = {name: rng.uniform(0.1, 3.0, (nf, m)) for name in BLOCKS}
    return P, K, w


@pytest.mark.parametrize("m", [1, 2, 3])
def test_block_diagonal_svd_oracle(m):
    rng = np.random.default_rng(10 + m)
    P, K, w = _random_loop(rng, m, 15)
    blocks = closed_loop_blocks(P, K)
    full = np.zeros((15, 4 * m, 4 * m), dtype=complex)
    for b, name in enumerate(BLOCKS):
        full[:, b * m:(b + 1) * m, b * m:(b + 1) * m] = w[name][:, :, None] * blocks[name]
    oracle = np.linalg.svd(full, compute_uv=False)[:, 0].max()
    np.testing.assert_allclose(max(block_norms(P, K, w).values()), oracle, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_unit_norm_bounds_sensitivity(m, seed):
    rng = np.random.default_rng(seed)
    P, K, w = _random_loop(rng, m, 10)
    gamma = max(block_norms(P, K, w).values())
    w = {k: v / gamma for k, v in w.items()}
    assert max(block_norms(P, K, w).values()) <= 1 + 1e-12
    S = np.abs(np.diagonal(closed_loop_blocks(P, K)["S"], axis1=1, axis2=2))
    assert np.all(S <= (1 + 1e-12) / w["S"])


def test_weighted_norm_on_demo(lti_frfs, demo_ctrl):
    weights = WeightSet((WB,))
    norms, worst = weighted_norm(lti_frfs, demo_ctrl, demo_ctrl.initial, weights)
    K = demo_ctrl.closed(demo_ctrl.initial).freqresp(lti_frfs.omega)
    direct = local_norm(lti_frfs.locals[0], lti_frfs.omega, K, weights)
    assert worst == norms.max()
    np.testing.assert_allclose(worst, direct, rtol=1e-10)


def test_crossover_power_law():
    omega = np.logspace(0, 3, 97)
    L = (42.0 / (1j * omega))[:, None, None]
    np.testing.assert_allclose(crossover_frequencies(omega, L, np.ones_like(L)), [42.0],
                               rtol=1e-12)
    assert np.isnan(crossover_frequencies(omega, 0.5 * np.ones_like(L), np.ones_like(L))[0])


def test_sensitivity_peak():
    omega = np.array([1.0, 2.0])
    L = np.array([[[1.0]], [[-0.5]]], dtype=complex)
    np.testing.assert_allclose(sensitivity_peaks_db(L, np.ones_like(L)), [20 * np.log10(2.0)])


def test_weight_preview(tmp_path, lti_frfs):
    write_weight_preview(tmp_path / "w.csv", lti_frfs.omega, lti_frfs.locals[0],
                         WeightSet((WB,)))
    rows = (tmp_path / "w.csv").read_text().splitlines()
    assert rows[0].startswith("omega,bound_S_1,bound_S_2,bound_KS_1")
    assert len(rows) == 1 + len(lti_frfs.omega)
    hi = [float(v) for v in rows[-1].split(",")]
    assert hi[1] == 2.0  # 1/Ks on the flat tail
