"""The ten package-level acceptance checks.

One test per criterion, numbered so a verbose run reads as the acceptance
report.  Each test also prints its measured numbers; run with -s (or -rA)
to see them.  The trained-model fixture runs the default 2-d recipe once
for each mode and is shared by the consistency, topology, learning, and
self-registration checks, so this module takes a while; everything is
seeded and deterministic.
"""

import time

import numpy as np
import pytest

from defreg import metrics
from defreg import tensor as T
from defreg import training as tr
from defreg.fields import identity_grid, interp_field, jacobian_stats
from defreg.inversion import FixedPointConfig, fixed_point_invert, invert_field
from defreg.networks import EncoderConfig, ModelWeights
from defreg.pipeline import (complete_jacobian_stats, consistency_errors,
                             register)
from defreg.splines import (ControlGrid, compute_K, evaluate_spline,
                            tightness_witness, witness_jacobian_det)
from defreg.tensor import Tensor
from defreg.training import _random_clamped_field, synth_pair

TIGHT = FixedPointConfig(tol=1e-12, max_iter=200, backward_tol=1e-12,
                         backward_max_iter=200)

# Published reference values of the bound constant, 9 decimals.
K_REF_2D = (2.222222222, 2.031168620, 2.084187826, 2.063570023, 2.057074951,
            2.052177394, 2.049330491, 2.047871477, 2.047136380)
K_REF_3D = (2.777777778, 2.594390728, 2.512366240, 2.495476474, 2.489089713,
            2.484247818, 2.481890143, 2.480726430, 2.480102049)


@pytest.fixture(scope="module")
def trained():
    """Default 2-d training runs, one per mode, with wall-clock times."""
    out = {}
    for mode in ("sym", "non_sym"):
        cfg = tr.TrainConfig(mode=mode)
        t0 = time.time()
        weights, history = tr.train(cfg)
        out[mode] = (weights, time.time() - t0)
    return out


@pytest.fixture(scope="module")
def heldout_pairs():
    return [synth_pair(777000 + i, 64, 2) for i in range(20)]


@pytest.fixture(scope="module")
def sym_report(trained, heldout_pairs):
    weights, _ = trained["sym"]
    return metrics.evaluate(weights, heldout_pairs, mode="sym")


def test_criterion_01_bound_table_reproduction():
    compute_K.cache_clear()
    t0 = time.time()
    worst = 0.0
    for n, table in ((2, K_REF_2D), (3, K_REF_3D)):
        for k, expected in enumerate(table):
            worst = max(worst, abs(compute_K(n, k) - expected))
    elapsed = time.time() - t0
    assert worst <= 1e-6
    assert elapsed < 60.0
    print("criterion 1 PASS: 18 bound entries, worst |err| %.2e, %.1fs"
          % (worst, elapsed))


def _min_sampled_det(grid, scale):
    """Min finite-difference Jacobian determinant over the sample lattice.

    Voxel sample positions sit at (0.5 + h/2) mod h in control-grid
    coordinates (the offsets sample_positions_1d enumerates); the bound
    constrains the one-step differences of exactly those samples.
    """
    k = grid.level
    h = 1.0 / 2 ** k
    n = grid.ndim_space
    scaled = ControlGrid(k, grid.array * scale, grid.origin)
    offset = (0.5 + h / 2.0) % h
    steps = np.arange(np.ceil((-5.0 - offset) / h),
                      np.floor((5.0 - offset) / h) + 1)
    axes = [offset + h * steps for _ in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh])
    disp = evaluate_spline(scaled, pts).reshape((n,) + mesh[0].shape)
    interior = tuple(slice(0, -1) for _ in range(n))
    cols = []
    for j in range(n):
        ahead = tuple(slice(1, None) if d == j else slice(0, -1)
                      for d in range(n))
        col = (disp[(slice(None),) + ahead] - disp[(slice(None),) + interior]) / h
        col[j] += 1.0
        cols.append(np.moveaxis(col, 0, -1))
    jac = np.stack(cols, axis=-1)
    return float(np.linalg.det(jac).min())


def test_criterion_02_bound_tightness():
    for n, k in ((2, 0), (2, 1), (2, 2), (3, 0), (3, 1), (3, 2)):
        grid, x_star = tightness_witness(n, k)
        below = _min_sampled_det(grid, 0.99)
        above = _min_sampled_det(grid, 1.01)
        at = witness_jacobian_det(grid, x_star, scale=1.0)
        assert below > 0.0, "n=%d k=%d min det %g at 0.99" % (n, k, below)
        assert above < 0.0, "n=%d k=%d min det %g at 1.01" % (n, k, above)
        assert abs(at) <= 1e-3, "n=%d k=%d witness det %g" % (n, k, at)
    print("criterion 2 PASS: witness det brackets zero for 6 (n, k) pairs")


def test_criterion_03_inversion_convergence():
    t0 = time.time()
    cfg = FixedPointConfig(tol=0.01, max_iter=20)
    ident = identity_grid((32, 32, 32), np.float64)
    iterations = []
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = _random_clamped_field(rng, 32, 3, 1, 1.0)
        inverse, iters = fixed_point_invert(d, cfg)
        iterations.append(iters)
        residual = float(np.max(np.abs(
            inverse + interp_field(d, ident + inverse))))
        worst = max(worst, residual)
    elapsed = time.time() - t0
    assert worst <= 0.01
    assert max(iterations) <= 20
    assert float(np.median(iterations)) <= 8.0
    assert elapsed < 120.0
    print("criterion 3 PASS: 100 fields at 32^3, worst residual %.4f, "
          "max iters %d, median %.1f, %.1fs"
          % (worst, max(iterations), float(np.median(iterations)), elapsed))


def _weighted(y, c):
    return T.sum_all(T.mul(y, Tensor(np.asarray(c, dtype=y.dtype))))


def test_criterion_04_gradient_correctness():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(2, 6, 6))
    y = rng.normal(size=(2, 6, 6))
    yd = rng.normal(size=(2, 6, 6)) + 3.0
    c = rng.normal(size=(2, 6, 6))
    c5 = rng.normal(size=(4, 6, 6))
    c_slice = rng.normal(size=(2, 3, 4))
    c_pad = rng.normal(size=(2, 10, 8))
    widths = ((0, 0), (2, 2), (1, 1))
    cw = rng.normal(size=(3, 2, 3, 3))
    cb = rng.normal(size=3)
    c_conv = rng.normal(size=(3, 6, 6))
    c_conv2 = rng.normal(size=(3, 3, 3))
    taps = np.array([0.25, 0.75, 0.75, 0.25])
    c_up = rng.normal(size=(2, 12, 6))
    c_block = rng.normal(size=(2, 3, 3))
    vol = rng.normal(size=(1, 8, 8))
    coords0 = identity_grid((8, 8), np.float64) \
        + rng.uniform(-0.3, 0.3, size=(2, 8, 8))
    c_warp = rng.normal(size=(1, 8, 8))
    img_b = rng.normal(size=(1, 8, 8))
    d_clamped = _random_clamped_field(np.random.default_rng(5), 8, 2, 1, 0.8)
    grid8 = identity_grid((8, 8), np.float64)
    w_warp = rng.normal(size=(1, 8, 8))

    def through_inverse(t):
        z = invert_field(t, TIGHT)
        coords = T.add(z, Tensor(grid8))
        warped = T.sample_linear(Tensor(vol), coords)
        return _weighted(warped, w_warp)

    cases = [
        ("add", lambda x: _weighted(T.add(x, Tensor(y)), c), x0),
        ("sub", lambda x: _weighted(T.sub(x, Tensor(y)), c), x0),
        ("mul", lambda x: _weighted(T.mul(x, Tensor(y)), c), x0),
        ("div", lambda x: _weighted(T.div(x, Tensor(yd)), c), x0),
        ("div_denominator",
         lambda x: _weighted(T.div(Tensor(y), T.shift(T.square(x), 0.5)), c),
         x0),
        ("scale", lambda x: _weighted(T.scale(x, -1.7), c), x0),
        ("shift", lambda x: _weighted(T.shift(x, 0.3), c), x0),
        ("square", lambda x: _weighted(T.square(x), c), x0),
        ("sum_all", lambda x: T.scale(T.sum_all(x), 0.37), x0),
        ("mean_all", lambda x: T.mean_all(T.mul(x, x)), x0),
        ("tanh", lambda x: _weighted(T.tanh(x), c), x0),
        ("leaky_relu", lambda x: _weighted(T.leaky_relu(x), c), x0),
        ("maximum_scalar",
         lambda x: _weighted(T.maximum_scalar(x, 0.0), c), x0),
        ("tanh_clamp", lambda x: _weighted(T.tanh_clamp(x, 0.7), c), x0),
        ("astype", lambda x: _weighted(T.astype(x, np.float64), c), x0),
        ("concat", lambda x: _weighted(T.concat(x, Tensor(y), axis=0), c5),
         x0),
        ("slice", lambda x: _weighted(
            T.slice_(x, (slice(None), slice(1, 4), slice(0, 4))), c_slice),
         x0),
        ("pad_zero", lambda x: _weighted(T.pad(x, widths, "zero"), c_pad),
         x0),
        ("pad_replicate",
         lambda x: _weighted(T.pad(x, widths, "replicate"), c_pad), x0),
        ("conv_input", lambda x: _weighted(
            T.conv_nd(x, Tensor(cw), Tensor(cb), stride=1, padding=1),
            c_conv), x0),
        ("conv_weight", lambda w: _weighted(
            T.conv_nd(Tensor(x0), w, Tensor(cb), stride=1, padding=1),
            c_conv), cw),
        ("conv_stride2", lambda x: _weighted(
            T.conv_nd(x, Tensor(cw), Tensor(cb), stride=2, padding=1),
            c_conv2), x0),
        ("transposed_conv", lambda x: _weighted(
            T.transposed_conv_1d_axis(x, taps, axis=1, stride=2), c_up), x0),
        ("block_mean", lambda x: _weighted(T.block_mean(x, 2), c_block), x0),
        ("sample_linear_volume", lambda v: _weighted(
            T.sample_linear(v, Tensor(coords0)), c_warp), vol),
        ("sample_linear_coords", lambda p: _weighted(
            T.sample_linear(Tensor(vol), p), c_warp), coords0),
        ("lncc_first", lambda a: T.lncc_loss(a, Tensor(img_b)), vol),
        ("lncc_second", lambda b: T.lncc_loss(Tensor(vol), b), img_b),
        ("grad_l2_penalty", lambda d: T.grad_l2_penalty(d), d_clamped),
        ("invert_field", through_inverse, d_clamped),
    ]
    worst_op = 0.0
    for name, fn, point in cases:
        err = T.finite_diff_check(fn, point)
        worst_op = max(worst_op, err)
        assert err <= 1e-4, "%s: rel err %g" % (name, err)

    # end to end through feature extraction, prediction, clamping,
    # upsampling, inversion, composition, warping, and both loss terms
    enc = EncoderConfig(num_levels=2, channels=(2, 3), kernel_size=3,
                        res_blocks=1)
    worst_e2e = 0.0
    for n, shape in ((2, (1, 8, 8)), (3, (1, 8, 8, 8))):
        w = ModelWeights(enc, n=n, seed=3, dtype=np.float64)
        wake = np.random.default_rng(77)
        for k in range(2):
            p = w.params["pred%d.out.w" % k]
            p.data = wake.uniform(-0.2, 0.2, size=p.data.shape)
        xa = wake.standard_normal(shape)
        xb = wake.standard_normal(shape)

        def loss_with(key, t):
            old = w.params[key]
            w.params[key] = t
            try:
                res = register(w, xa, xb, config=TIGHT)
                return tr.total_loss(Tensor(xa), Tensor(xb),
                                     res.f12, res.f21, 1.0)
            finally:
                w.params[key] = old

        if n == 2:
            checks = [(key, None) for key in w.params]
        else:
            checks = [("enc0.in.w", [0, 5, 11]), ("pred0.mix.w", [0, 7]),
                      ("pred1.out.b", [0, 1, 2])]
        for key, coords in checks:
            err = T.finite_diff_check(lambda t: loss_with(key, t),
                                      w.params[key].data.copy(), eps=1e-6,
                                      coords=coords)
            worst_e2e = max(worst_e2e, err)
            assert err <= 1e-3, "%d-d %s: rel err %g" % (n, key, err)
    print("criterion 4 PASS: %d ops worst %.2e; end-to-end worst %.2e"
          % (len(cases), worst_op, worst_e2e))


def test_criterion_05_symmetry_by_construct():
    w = ModelWeights(n=2, seed=11)
    rng = np.random.default_rng(12)
    for k in range(w.config.num_levels):
        p = w.params["pred%d.out.w" % k]
        p.data = rng.uniform(-0.05, 0.05, size=p.data.shape).astype(np.float32)
    worst_gap = 0.0
    for i in range(20):
        pair = synth_pair(5000 + i, 32, 2)
        fwd = register(w, pair.x_a, pair.x_b)
        rev = register(w, pair.x_b, pair.x_a)
        assert np.array_equal(fwd.f12.data.view(np.uint32),
                              rev.f21.data.view(np.uint32)), "pair %d" % i
        assert np.array_equal(fwd.f21.data.view(np.uint32),
                              rev.f12.data.view(np.uint32)), "pair %d" % i
        assert np.max(np.abs(fwd.f12.data)) > 1e-3  # not vacuous
        inverse_err, cycle_err = consistency_errors(w, pair.x_a, pair.x_b,
                                                    "sym")
        gap = abs(cycle_err - inverse_err) / max(abs(inverse_err), 1e-300)
        worst_gap = max(worst_gap, gap)
        assert gap <= 1e-10, "pair %d: relative gap %g" % (i, gap)
    print("criterion 5 PASS: 20 pairs bitwise-swap symmetric, "
          "worst cycle/inverse relative gap %.2e" % worst_gap)


def test_criterion_06_inverse_consistency(sym_report):
    mean_inverse = sym_report.aggregate()["inverse_err"]["mean"]
    assert mean_inverse <= 1e-2
    print("criterion 6 PASS: mean inverse_err %.2e on 20 held-out pairs"
          % mean_inverse)


def test_criterion_07_topology_preservation(trained, heldout_pairs):
    for mode in ("sym", "non_sym"):
        weights, _ = trained[mode]
        for pair in heldout_pairs[:5]:
            with T.no_grad():
                result = register(weights, pair.x_a, pair.x_b, mode=mode)
            folding, _ = complete_jacobian_stats(result, 10 ** 5)
            assert folding == 0.0, "%s complete folding %g" % (mode, folding)
            standard_folding, _ = jacobian_stats(
                result.f12.data.astype(np.float64), 10 ** 5)
            assert standard_folding <= 0.001, \
                "%s standard folding %g" % (mode, standard_folding)
    print("criterion 7 PASS: complete folding 0 and standard folding "
          "<= 0.1%% at 1e5 samples on both checkpoints")


def test_criterion_08_registration_learning(trained, heldout_pairs,
                                            sym_report):
    _, sym_seconds = trained["sym"]
    assert sym_seconds <= 1800.0
    agg = sym_report.aggregate()
    lift = agg["dice_mean"]["mean"] - agg["dice_baseline"]["mean"]
    assert lift >= 0.15, "dice lift %.4f" % lift
    non_weights, _ = trained["non_sym"]
    non_report = metrics.evaluate(non_weights, heldout_pairs, mode="non_sym")
    non_cycle = non_report.aggregate()["cycle_err"]["mean"]
    sym_cycle = agg["cycle_err"]["mean"]
    assert non_cycle >= 10.0 * sym_cycle, \
        "non_sym %.3e vs sym %.3e" % (non_cycle, sym_cycle)
    print("criterion 8 PASS: trained in %.0fs, dice lift %.4f, "
          "non_sym/sym cycle ratio %.0f"
          % (sym_seconds, lift, non_cycle / sym_cycle))


def test_criterion_09_self_registration(trained, heldout_pairs):
    weights, _ = trained["sym"]
    means = []
    for pair in heldout_pairs:
        with T.no_grad():
            result = register(weights, pair.x_a, pair.x_a.copy())
        means.append(float(np.mean(np.abs(result.f12.data))))
    assert max(means) <= 0.1
    print("criterion 9 PASS: self-registration mean |f12| %.2e "
          "(worst of 20 images)" % max(means))


def test_criterion_10_permutation_exactness():
    for seed in range(5):
        rng = np.random.default_rng(200 + seed)
        a = rng.normal(size=10)
        b = a + rng.normal(scale=0.7, size=10)
        diff = a - b
        observed = abs(diff.mean())
        tol = 1e-12 * max(1.0, np.abs(diff).max())
        count = 0
        for bits in range(2 ** 10):
            signs = np.array([1.0 if bits >> i & 1 else -1.0
                              for i in range(10)])
            if abs((signs * diff).mean()) >= observed - tol:
                count += 1
        expected = count / 2 ** 10
        got = metrics.permutation_test(a, b, n_perm=2048)
        assert got == expected, "seed %d: %r != %r" % (seed, got, expected)
    print("criterion 10 PASS: exhaustive enumeration matched exactly "
          "for 5 draws at n=10")
