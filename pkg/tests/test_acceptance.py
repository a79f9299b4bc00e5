"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (shown in the pytest terminal summary)
before asserting, so a failing criterion still reports its measured values.

Two synthetic regimes are used:

* clean: every case has its own branching tree, 1 mm noise, no outliers;
* outlier: one shared tree anatomy, varying deformations, 1 mm noise and
  30 % of the fixed points replaced by uniform clutter. This is the regime
  in which spatial CPD alone is ambiguous and learned descriptors matter.
"""
import time

import numpy as np
import pytest

from driftreg import autodiff as ad
from driftreg import cli, cpd, graphnet, pipeline, synth
from driftreg.evaluation import rank_sum_test
from driftreg.pointcloud import farthest_point_sample, knn_indices
from driftreg.tps import tps_eval, tps_fit

from oracles import fps_oracle, knn_oracle, rank_sum_enumeration

N = 512
PARAMS = cpd.CPDParams()


def clean_case(s):
    return synth.make_case("branching_tree", N, deform_seed=s, seed=s)


def outlier_case(s):
    return synth.make_case("branching_tree", N, deform_seed=100 + s, seed=s, shape_seed=0,
                           noise_sigma=1.0, outlier_frac=0.3)


PRETRAIN_SEEDS = range(0, 6)
TEST_SEEDS = range(10, 20)
FINETUNE_SEEDS = range(30, 55)


@pytest.fixture(scope="module")
def pretrained():
    cases = [outlier_case(s) for s in PRETRAIN_SEEDS]
    cfg = graphnet.TrainConfig(epochs=40, lr=1e-3, seed=0)
    return pipeline.pretrain(cases, graphnet.init_params(0), cfg, count=N, seed=0)


@pytest.fixture(scope="module")
def test_cases():
    return [outlier_case(s) for s in TEST_SEEDS]


def _fmt(values):
    return "[" + ", ".join(f"{v:.2f}" for v in values) + "]"


def test_em_sanity(acceptance):
    initial, final, runtimes = [], [], []
    for s in range(20):
        case = clean_case(s)
        t0 = time.perf_counter()
        stats = pipeline.evaluate_method(case, "cpd", PARAMS, count=N, seed=s)
        runtimes.append(time.perf_counter() - t0)
        initial.append(case.initial_tre)
        final.append(stats.mean)
    reduction = 1.0 - np.mean(final) / np.mean(initial)
    ok = reduction >= 0.60 and max(runtimes) < 30.0 and all(20 <= t <= 25 for t in initial)
    acceptance("EM sanity", ok,
               f"20 cases N=M={N}: initial {np.mean(initial):.2f} mm -> cpd {np.mean(final):.2f} mm "
               f"({100 * reduction:.1f}% reduction, need >=60%); worst case {max(final):.2f} mm; "
               f"max runtime {max(runtimes):.1f} s (need <30 s)")
    assert ok


def test_trend(acceptance, pretrained, test_cases):
    methods = ["initial", "knn", "cpd", "feat-cpd"]
    means = {m: [] for m in methods}
    errors = {m: [] for m in methods}
    for case in test_cases:
        for m in methods:
            stats = pipeline.evaluate_method(case, m, PARAMS, pretrained, count=N, seed=0, knn_k=20)
            means[m].append(stats.mean)
            errors[m].append(stats.errors)
    avg = {m: float(np.mean(v)) for m, v in means.items()}
    ordered = avg["initial"] > avg["knn"] > avg["cpd"] > avg["feat-cpd"]
    gain = 1.0 - avg["feat-cpd"] / avg["cpd"]
    p = rank_sum_test(np.concatenate(errors["cpd"]), np.concatenate(errors["feat-cpd"]))
    ok = ordered and gain >= 0.15 and p < 0.05
    acceptance("Trend ordering", ok,
               f"10 cases mean TRE initial {avg['initial']:.2f} > knn@20 {avg['knn']:.2f} > "
               f"cpd {avg['cpd']:.2f} > feat-cpd {avg['feat-cpd']:.2f} ({'holds' if ordered else 'violated'}); "
               f"feat-cpd gain {100 * gain:.1f}% (need >=15%); rank-sum p={p:.2e} (need <0.05); "
               f"per-case cpd {_fmt(means['cpd'])} feat-cpd {_fmt(means['feat-cpd'])}")
    assert ok


def test_finetune(acceptance, pretrained, test_cases):
    cfg = cli.build_config(cli.make_parser().parse_args(["register", "--method", "cpd", "--case", "-"]))
    relaxed = cfg.finetune_params
    assert (relaxed.rho, relaxed.beta, relaxed.iterations) == (0.25, 0.5, 15)
    train = [outlier_case(s) for s in FINETUNE_SEEDS]
    fcfg = pipeline.FinetuneConfig(steps=50, lr=1e-4, seed=0, count=N)
    tuned = pipeline.finetune(train, pretrained, relaxed, fcfg)

    before = pipeline.validation_loss(test_cases, pretrained, relaxed, count=N)
    after = pipeline.validation_loss(test_cases, tuned, relaxed, count=N)
    drop = 1.0 - after / before

    infer = cfg.end_to_end_params
    tre_before = np.mean([pipeline.evaluate_method(c, "feat-cpd", infer, pretrained, count=N).mean
                          for c in test_cases])
    tre_after = np.mean([pipeline.evaluate_method(c, "feat-cpd", infer, tuned, count=N).mean
                         for c in test_cases])
    ok = drop >= 0.05 and tre_after <= tre_before
    acceptance("End-to-end fine-tuning", ok,
               f"50 steps x 15 unrolled iterations: validation correspondence loss {before:.2f} -> {after:.2f} mm^2 "
               f"({100 * drop:.1f}% reduction, need >=5%); mean TRE {tre_before:.3f} -> {tre_after:.3f} mm "
               f"(must not increase)")
    assert ok


def test_gradient_suite(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    w = lambda *s: rng.normal(size=s)

    R = w(5, 5)
    primitives = {
        "matmul": (lambda t: ad.sum_((t[0] @ t[1]) * W1), [w(4, 3), w(3, 5)]),
        "add": (lambda t: ad.sum_((t[0] + t[1]) * W2), [w(4, 3), w(3)]),
        "concat": (lambda t: ad.sum_(ad.concat(t, axis=1) * W3), [w(4, 2), w(4, 3)]),
        "leaky_relu": (lambda t: ad.sum_(ad.leaky_relu(t[0]) * W2), [np.abs(w(4, 3)) + 0.1]),
        "max_reduce": (lambda t: ad.sum_(ad.max_reduce(t[0], axis=1) * W2), [w(4, 6, 3)]),
        "exp": (lambda t: ad.sum_(ad.exp(t[0]) * W2), [w(4, 3)]),
        "l2_normalize": (lambda t: ad.sum_(ad.l2_normalize(t[0], axis=1) * W2), [w(4, 3)]),
        "solve": (lambda t: ad.sum_(ad.solve(t[0], t[1]) * W4), [R @ R.T + 5 * np.eye(5), w(5, 3)]),
    }
    W1, W2, W3, W4 = w(4, 5), w(4, 3), w(4, 5), w(5, 3)
    # the leaky_relu input is shifted in both signs away from the kink
    primitives["leaky_relu"][1][0][::2] *= -1
    prim_err = {k: graphnet.gradient_check(f, a) for k, (f, a) in primitives.items()}

    pts = w(32, 3)
    moving = pts + 0.05 * w(32, 3)
    case = graphnet.TrainingCase(pts, moving, np.arange(0, 32, 2), np.arange(0, 32, 2))
    net = graphnet.init_params(3, k=8, conv_widths=(8, 8), head_widths=(8,), descriptor_dim=4)
    neg = graphnet.derangement(len(case.moving_idx), np.random.default_rng(0))
    triplet_err = graphnet.gradient_check(
        lambda a: graphnet.case_triplet_loss(case, net, a, neg, 0.5), net.arrays())

    X, Y = w(32, 3), None
    Y = X + 0.2 * w(32, 3)
    df, dm = ad.l2_normalize(w(32, 4), axis=1), ad.l2_normalize(w(32, 4), axis=1)
    params = PARAMS.relaxed(iterations=5)
    target = 0.1 * w(32, 3)

    def cpd_loss(t):
        d = cpd.register_unrolled(X, Y, t[0], t[1], params) - target
        return ad.mean((d * d).sum(axis=1))

    cpd_err = graphnet.gradient_check(cpd_loss, [df, dm])
    elapsed = time.perf_counter() - t0
    ok = max(prim_err.values()) < 1e-6 and triplet_err < 1e-4 and cpd_err < 1e-3 and elapsed < 60
    worst = max(prim_err, key=prim_err.get)
    acceptance("Gradient suite", ok,
               f"primitives max rel err {prim_err[worst]:.1e} ({worst}; need <1e-6); "
               f"triplet-through-network {triplet_err:.1e} (need <1e-4); "
               f"unrolled CPD 32 pts x 5 it {cpd_err:.1e} (need <1e-3); {elapsed:.1f} s (need <60 s)")
    assert ok


def test_oracle_equivalence(acceptance):
    rng = np.random.default_rng(11)
    fps_bad = knn_bad = 0
    for i in range(200):
        n = int(rng.integers(2, 257))
        pts = rng.integers(0, 5, size=(n, 3)).astype(float) if i % 2 else rng.normal(size=(n, 3)) * 50
        count = int(rng.integers(1, n + 1))
        first = int(rng.integers(n))
        fps_bad += farthest_point_sample(pts, count, first=first).tolist() != fps_oracle(pts, count, first)
        k = int(rng.integers(1, 25))
        knn_bad += knn_indices(pts, k).neighbors.tolist() != knn_oracle(pts, k)

    rank_worst = 0.0
    for _ in range(300):
        a = rng.integers(0, 8, size=int(rng.integers(1, 7))).tolist()
        b = rng.integers(0, 8, size=int(rng.integers(1, 7))).tolist()
        rank_worst = max(rank_worst, abs(rank_sum_test(a, b) - rank_sum_enumeration(a, b)))

    tps_worst = 0.0
    for _ in range(20):
        c = rng.normal(size=(int(rng.integers(4, 80)), 3)) * 40
        v = rng.normal(size=c.shape) * 10
        tps_worst = max(tps_worst, np.abs(tps_eval(tps_fit(c, v), c) - v).max() / np.abs(v).max())

    res_worst = 0.0
    for _ in range(20):
        X, Y = rng.normal(size=(32, 3)), rng.normal(size=(32, 3))
        G = cpd.gaussian_kernel(Y, 1.0)
        C = cpd.spatial_posterior(X, Y, 1.0, 0.1)
        lam, s2 = 5.0, float(rng.uniform(0.1, 2))
        W, _ = cpd.m_step(X, Y, G, C, lam, s2)
        d = C.sum(axis=1)
        rhs = (C @ X) / d[:, None] - Y
        res = np.linalg.norm((G + lam * s2 * np.diag(1 / d)) @ W - rhs) / np.linalg.norm(rhs)
        res_worst = max(res_worst, res)

    ok = fps_bad == 0 and knn_bad == 0 and rank_worst < 1e-12 and tps_worst < 1e-8 and res_worst < 1e-8
    acceptance("Oracle equivalence", ok,
               f"FPS mismatches {fps_bad}/200, kNN mismatches {knn_bad}/200; rank-sum exact vs enumeration "
               f"max |dp| {rank_worst:.1e}; TPS control residual {tps_worst:.1e} (need <1e-8); "
               f"m_step residual {res_worst:.1e} (need <1e-8)")
    assert ok


def test_invariants(acceptance, tmp_path):
    rng = np.random.default_rng(5)
    col_max = 0.0
    for _ in range(200):
        m, n = rng.integers(1, 60, size=2)
        scale = 10 ** rng.uniform(-2, 3)
        C = cpd.spatial_posterior(rng.normal(size=(n, 3)) * scale, rng.normal(size=(m, 3)) * scale,
                                  10 ** rng.uniform(-3, 3), rng.uniform(0, 0.99))
        col_max = max(col_max, C.sum(axis=0).max())

    case = clean_case(3)
    net = graphnet.init_params(0)
    desc = graphnet.descriptor_forward(case.moving, net)
    norm_err = np.abs(np.linalg.norm(desc, axis=1) - 1).max()
    perm = rng.permutation(N)
    desc_perm_err = np.abs(graphnet.descriptor_forward(case.moving[perm], net) - desc[perm]).max()

    X, Y = pipeline.Normalization.of(case.fixed).apply(case.fixed), pipeline.Normalization.of(case.moving).apply(case.moving)
    short = cpd.CPDParams(iterations=50)
    base = cpd.register(X, Y, params=short)
    reg_perm_err = np.abs(cpd.register(X[perm], Y[perm], params=short) - base[perm]).max()
    shift = np.array([3.0, -7.0, 11.0])
    trans_err = np.abs(cpd.register(X + shift, Y + shift, params=short) - base).max()

    Xs, Ys = X[:128], Y[:128]
    p1 = cpd.CPDParams(iterations=1)
    state = cpd.register_state(Xs, Ys, params=p1)
    q_prev, monotone, steps = cpd.objective(Xs, Ys, state, p1.w, p1.lam), True, 0
    for _ in range(150):
        state = cpd.register_state(Xs, Ys, params=p1, state=state)
        if state.sigma2 <= p1.sigma2_floor:
            break
        q = cpd.objective(Xs, Ys, state, p1.w, p1.lam)
        monotone &= q <= q_prev + 1e-9 * abs(q_prev)
        q_prev, steps = q, steps + 1

    runs = []
    case_dir = tmp_path / "case"
    synth.save_case(synth.make_case("branching_tree", 300, deform_seed=2, seed=2,
                                    supervision_count=20, eval_count=20), case_dir)
    for r in range(2):
        out = tmp_path / f"run{r}"
        cli.main(["evaluate", "--case", str(case_dir), "--methods", "initial,center,cpd",
                  "--repeats", "2", "--count", "200", "--iters", "30", "--out", str(out)])
        runs.append((out / "results.csv").read_bytes())
    deterministic = runs[0] == runs[1]

    ok = (col_max <= 1 + 1e-12 and norm_err <= 1e-6 and desc_perm_err < 1e-9 and reg_perm_err < 1e-9
          and trans_err < 1e-6 and monotone and deterministic)
    acceptance("Invariant suite", ok,
               f"max posterior column sum {col_max:.15f}; descriptor norm err {norm_err:.1e}; "
               f"permutation err descriptors {desc_perm_err:.1e} / register {reg_perm_err:.1e} (need <1e-9); "
               f"joint translation err {trans_err:.1e} (need <1e-6); Q monotone over {steps} EM steps: {monotone}; "
               f"results.csv byte-identical across runs: {deterministic}")
    assert ok


def test_degenerate(acceptance):
    shape = synth.gen_shape("branching_tree", N, seed=4)
    disp = cpd.register(shape, shape, params=PARAMS)
    diameter = np.linalg.norm(shape.max(0) - shape.min(0))
    self_ratio = np.linalg.norm(disp, axis=1).max() / diameter

    case = outlier_case(3)
    rng = np.random.default_rng(0)
    df = ad.l2_normalize(rng.normal(size=(N, 16)), axis=1)
    dm = ad.l2_normalize(rng.normal(size=(N, 16)), axis=1)
    X, Y = case.fixed / 100.0, case.moving / 100.0
    identical = True
    for mode in cpd.FEATURE_MODES:
        p = cpd.CPDParams(alpha=0.0, iterations=40, feature_mode=mode)
        identical &= np.array_equal(cpd.register(X, Y, df, dm, p), cpd.register(X, Y, params=p))

    finite = True
    zero_rows = 0
    for w in (0.0, 0.1):
        state = cpd.register_state(X, Y, params=cpd.CPDParams(w=w))
        finite &= bool(np.all(np.isfinite(state.W)) and np.isfinite(state.sigma2))
        C = cpd.spatial_posterior(X, state.T, state.sigma2, w)
        zero_rows += int((C.sum(axis=1) == 0).sum())
    C = cpd.spatial_posterior(X, Y, 1e-4, 0.1)
    C[: N // 4] = 0.0  # force empty rows through the M-step
    W, s2 = cpd.m_step(X, Y, cpd.gaussian_kernel(Y, 1.0), C, 5.0, 1e-4)
    finite &= bool(np.all(np.isfinite(W)) and np.isfinite(s2))

    ok = self_ratio < 1e-3 and identical and finite
    acceptance("Degenerate handling", ok,
               f"self-registration max displacement {self_ratio:.1e} x diameter (need <1e-3); "
               f"alpha=0 bit-identical: {identical}; outlier_frac=0.3 run finite: {finite} "
               f"(zero-mass rows seen {zero_rows}, plus {N // 4} forced)")
    assert ok
