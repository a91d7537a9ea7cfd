import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from linear_models import LinearGenerator, linear_client
from splitlab import nn
from splitlab.attacks import (
    CMAES,
    AttackConfig,
    AttackDiverged,
    OracleFailure,
    QueryBudgetExceeded,
    QueryOracle,
    TargetModified,
    attack_in,
    attack_latent_only,
    attack_lm,
    attack_pfo,
    attack_pfo_blackbox,
    attack_rmle,
    cma_minimize,
    l1_distance,
    manifold_penalty,
    match_loss,
    match_loss_grad,
    pfo_initial_selection,
    pfo_optimize_w,
    pfo_progressive,
    project_l1_ball,
    project_l1_ball_rows,
    random_search,
    read_only,
    stage_radii,
)
from splitlab.zoo import Generator, InverseNet, SplitModel

SHAPE = (3, 16, 16)


@pytest.fixture(scope="module")
def gen():
    return Generator(z_dim=8, w_dim=8, channels=(8, 8, 4, 4), rng=np.random.default_rng(0))


@pytest.fixture(scope="module")
def client():
    return SplitModel(rng=np.random.default_rng(1)).client(1)


@pytest.fixture(scope="module")
def targets():
    return np.random.default_rng(2).uniform(0, 1, (3, *SHAPE)).astype(np.float32)


def quick(**kw):
    base = dict(iterations=6, select_iterations=4, w_iterations=5, candidates=4)
    base.update(kw)
    return AttackConfig(**base)


# match loss -----------------------------------------------------------------------

def test_match_loss_examples():
    a = np.array([[0.0, 0.0]])
    assert match_loss(a, a) == 0.0
    assert match_loss(a, np.array([[1.0, 1.0]])) == 1.0
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    assert match_loss(x, y) == match_loss(y, x)


def test_match_loss_shape_mismatch():
    with pytest.raises(ValueError):
        match_loss(np.zeros((1, 2)), np.zeros((1, 3)))


def test_match_loss_grad_is_finite_difference():
    rng = np.random.default_rng(1)
    h, t = rng.standard_normal((1, 2, 3)), rng.standard_normal((1, 2, 3))
    g = match_loss_grad(h, t)
    num = nn.gradcheck.numeric_grad(lambda: match_loss(h, t), h, 1e-6)
    assert np.allclose(g, num, atol=1e-8)


# l1-ball projection ---------------------------------------------------------------

def test_projection_hand_examples():
    assert np.allclose(project_l1_ball(np.array([3.0, 0.0]), np.zeros(2), 1.0), [1.0, 0.0])
    assert np.allclose(project_l1_ball(np.array([2.0, 1.0]), np.zeros(2), 1.0), [1.0, 0.0])


def test_projection_interior_unchanged():
    v = np.array([0.2, -0.3, 0.1])
    assert np.array_equal(project_l1_ball(v, np.zeros(3), 1.0), v)


def test_projection_negative_radius_rejected():
    with pytest.raises(ValueError):
        project_l1_ball(np.ones(2), np.zeros(2), -0.1)


def test_projection_zero_and_infinite_radius():
    rng = np.random.default_rng(0)
    v, c = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert np.array_equal(project_l1_ball_rows(v, c, 0.0), c)
    assert np.array_equal(project_l1_ball_rows(v, c, math.inf), v)


def qp_projection(v, c, r):
    """Generic QP solve with u = c + p - q, p, q >= 0, sum(p + q) <= r."""
    n = len(v)
    d = v - c

    def obj(pq):
        u = pq[:n] - pq[n:]
        return 0.5 * np.sum((u - d) ** 2)

    def jac(pq):
        g = pq[:n] - pq[n:] - d
        return np.concatenate([g, -g])

    x0 = np.zeros(2 * n)
    res = minimize(obj, x0, jac=jac, method="SLSQP", bounds=[(0, None)] * (2 * n),
                   constraints=[{"type": "ineq", "fun": lambda pq: r - pq.sum(), "jac": lambda pq: -np.ones(2 * n)}],
                   options={"ftol": 1e-16, "maxiter": 1000})
    return c + res.x[:n] - res.x[n:]


def vertex_certificate(v, c, r, p):
    """max over the ball's 2n vertices of <v - p, u - p>; <= 0 iff p is the projection."""
    n = len(v)
    verts = np.concatenate([c + r * np.eye(n), c - r * np.eye(n)])
    return float(np.max((verts - p) @ (v - p)))


def test_projection_matches_qp_oracle_200_cases():
    rng = np.random.default_rng(42)
    for _ in range(200):
        v, c = rng.standard_normal(10) * 2, rng.standard_normal(10)
        r = float(rng.uniform(0.05, 3.0))
        p = project_l1_ball(v, c, r)
        assert np.abs(p - c).sum() <= r + 1e-9
        assert np.linalg.norm(p - qp_projection(v, c, r)) < 1e-6
        assert vertex_certificate(v, c, r, p) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 5), st.integers(1, 30),
       st.sampled_from([np.float32, np.float64]))
def test_projection_feasible_and_optimal(seed, r, n, dtype):
    rng = np.random.default_rng(seed)
    v = (rng.standard_normal((2, n)) * 3).astype(dtype)
    c = rng.standard_normal((2, n)).astype(dtype)
    p = project_l1_ball_rows(v, c, r)
    assert p.dtype == dtype
    assert np.all(l1_distance(p, c) <= r + 1e-9)
    if dtype == np.float64 and r > 0:
        for i in range(2):
            scale = max(1.0, float(np.abs(v[i] - p[i]).max()))
            assert vertex_certificate(v[i], c[i], r, p[i]) <= 1e-9 * scale * max(r, 1.0) * n


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 5))
def test_projection_idempotent(seed, r):
    rng = np.random.default_rng(seed)
    v, c = rng.standard_normal(6) * 3, rng.standard_normal(6)
    p = project_l1_ball(v, c, r)
    assert np.allclose(project_l1_ball(p, c, r), p, atol=1e-12)


def test_projection_rows_match_single():
    rng = np.random.default_rng(3)
    v, c, r = rng.standard_normal((4, 7)), rng.standard_normal((4, 7)), np.array([0.5, 1.0, 0.0, 10.0])
    rows = project_l1_ball_rows(v, c, r)
    for i in range(4):
        assert np.allclose(rows[i], project_l1_ball(v[i], c[i], r[i]))


# pixel-space attacks --------------------------------------------------------------

def test_rmle_linear_sanity():
    c = linear_client()
    x = np.random.default_rng(1).uniform(0.1, 0.9, (2, 3, 4, 4))
    res = attack_rmle(c(x), c, AttackConfig(iterations=2000, alpha=0.0), image_shape=(3, 4, 4))
    assert np.mean((res.images - x) ** 2) < 1e-3


def test_rmle_huge_tv_gives_flat_image(client, targets):
    res = attack_rmle(client(targets[:1]), client, AttackConfig(iterations=400, alpha=1e6, lr=0.01))
    assert nn.total_variation(res.images[0]) < 0.05 * nn.total_variation(targets[0])


def test_rmle_contracts(client, targets):
    cfg = AttackConfig(iterations=15, seed=4)
    a = attack_rmle(client(targets), client, cfg)
    b = attack_rmle(client(targets), client, cfg)
    assert np.array_equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert a.traces["pixels"].shape == (16, 3)
    assert np.all(np.diff(a.best_traces["pixels"], axis=0) <= 0)
    assert np.allclose(a.final_loss, a.traces["pixels"].min(axis=0))


def test_rmle_single_representation_accepted(client, targets):
    res = attack_rmle(client(targets[:1])[0], client, AttackConfig(iterations=2))
    assert res.images.shape == (1, *SHAPE)


def test_rmle_wrong_representation_shape(client):
    with pytest.raises(nn.ShapeError):
        attack_rmle(np.zeros((1, 5, 5, 5), np.float32), client, AttackConfig(iterations=2))


def test_lm_without_prior_weight_is_rmle(client, targets):
    ae = nn.Stack([nn.Conv2d(3, 3, rng=np.random.default_rng(0))])
    cfg = AttackConfig(iterations=10, alpha=1.0, manifold_weight=0.0, seed=3)
    lm = attack_lm(client(targets), client, ae, cfg)
    rm = attack_rmle(client(targets), client, cfg)
    assert np.array_equal(lm.traces["pixels"], rm.traces["pixels"])
    assert np.array_equal(lm.images, rm.images)


def test_manifold_penalty_zero_on_fixed_points(targets):
    identity = nn.Stack([])
    assert np.all(manifold_penalty(identity, targets) == 0)


def test_in_contracts(client, targets):
    h = client(targets)
    inv = InverseNet(h.shape[1:], rng=np.random.default_rng(0))
    a, b = attack_in(h, inv), attack_in(h, inv)
    assert np.array_equal(a.images, b.images)
    assert a.images.shape == targets.shape
    assert a.images.min() >= 0 and a.images.max() <= 1
    with pytest.raises(nn.ShapeError):
        attack_in(np.zeros((1, 2, 3, 3), np.float32), inv)


def test_diverging_target_aborts_with_trace(targets):
    bad = nn.Stack([nn.Conv2d(3, 2, rng=np.random.default_rng(0))])
    h = bad(targets[:1])
    bad.layers[0].params["weight"] = np.full_like(bad.layers[0].params["weight"], np.nan)
    with pytest.raises(AttackDiverged) as info:
        attack_rmle(h, bad, AttackConfig(iterations=3))
    assert info.value.step == 0


# latent attacks -------------------------------------------------------------------

def test_selection_one_candidate_no_steps_is_raw_sample(client, gen, targets):
    cfg = AttackConfig(candidates=1, select_iterations=0, seed=9)
    sel = pfo_initial_selection(client(targets[:1]), client, gen, cfg)
    raw = np.random.default_rng(9).standard_normal((1, 1, gen.z_dim)).astype(np.float32)
    assert np.array_equal(sel.z, raw[:, 0])
    assert np.array_equal(sel.w_init, gen.map(raw[:, 0]))


def test_selection_keeps_argmin(client, gen, targets):
    sel = pfo_initial_selection(client(targets), client, gen, quick(candidates=6))
    assert np.all(sel.losses[np.arange(3), sel.index] <= sel.losses.min(axis=1))
    assert sel.trace.shape == (5, 3)


def test_selection_more_candidates_help(client, gen, targets):
    h = client(targets[:1])
    one, many = [], []
    for seed in range(10):
        one.append(pfo_initial_selection(h, client, gen, quick(candidates=1, seed=seed)).losses.min())
        many.append(pfo_initial_selection(h, client, gen, quick(candidates=32, seed=seed)).losses.min())
    assert np.mean(many) <= np.mean(one)


def test_optimize_w_zero_iterations_returns_init(client, gen, targets):
    w_init = gen.map(np.random.default_rng(0).standard_normal((3, gen.z_dim)).astype(np.float32))
    assert np.array_equal(pfo_optimize_w(w_init, client(targets), client, gen, quick(w_iterations=0)), w_init)


def test_optimize_w_identity_generator_recovers_target():
    c, g = linear_client(), LinearGenerator()
    x = np.random.default_rng(1).uniform(0.1, 0.9, (2, 3, 4, 4))
    w = pfo_optimize_w(np.random.default_rng(2).standard_normal((2, 48)), c(x), c, g,
                       AttackConfig(iterations=2000, alpha=0.0))
    assert np.mean((g.synthesize(w) - x) ** 2) < 1e-3


def test_optimize_w_linear_least_squares_oracle():
    rng = np.random.default_rng(3)
    c = linear_client(seed=4)
    A = rng.standard_normal((48, 8)) * 0.3
    g = LinearGenerator(matrix=A, bias=np.full(48, 0.5))
    h = c(g.synthesize(rng.standard_normal((2, 8)))) + rng.standard_normal((2, 48)) * 0.05
    w = pfo_optimize_w(np.zeros((2, 8)), h, c, g, AttackConfig(iterations=3000, alpha=0.0))
    M = c.layers[1].params["weight"]
    w_ls = np.linalg.lstsq(M @ A, (h - M @ g.b).T, rcond=None)[0].T
    assert np.abs(w - w_ls).max() < 1e-4


def test_latent_only_contracts(client, gen, targets):
    cfg = quick(seed=5)
    a = attack_latent_only(client(targets), client, gen, cfg)
    b = attack_latent_only(client(targets), client, gen, cfg)
    assert np.array_equal(a.images, b.images)
    assert a.traces["select"].shape == (5, 3) and a.traces["w"].shape == (6, 3)
    assert np.all(a.final_loss <= a.traces["w"][0])
    assert a.images.min() >= 0 and a.images.max() <= 1


# progressive optimization -----------------------------------------------------------

def _w0(gen, n=3, seed=0):
    return gen.map(np.random.default_rng(seed).standard_normal((n, gen.z_dim)).astype(np.float32))


def test_zero_radius_reproduces_w0_image(client, gen, targets):
    w0 = _w0(gen)
    res = pfo_progressive(w0, client(targets), client, gen, quick(radii=(0.0,)))
    assert np.array_equal(res.images, gen.synthesize(w0))


def test_zero_radius_pfo_equals_latent_only(client, gen, targets):
    cfg = quick(radii=(0.0, 0.0, 0.0), seed=11)
    pfo = attack_pfo(client(targets), client, gen, cfg)
    lat = attack_latent_only(client(targets), client, gen, cfg)
    assert np.array_equal(pfo.images, lat.images)
    assert np.array_equal(pfo.extras["latent_image"], lat.images)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 2.0), st.integers(0, 1000))
def test_every_iterate_is_feasible(rho, seed):
    gen = Generator(z_dim=8, w_dim=8, channels=(8, 8, 4, 4), rng=np.random.default_rng(0))
    client = SplitModel(rng=np.random.default_rng(1)).client(2)
    x = np.random.default_rng(seed).uniform(0, 1, (2, *SHAPE)).astype(np.float32)
    worst = []

    def check(stage, step, hf, w, hf0, w0, r_hf, r_w):
        worst.append(max(np.max(l1_distance(hf, hf0) - r_hf), np.max(l1_distance(w, w0) - r_w)))

    res = pfo_progressive(_w0(gen, 2, seed), client(x), client, gen, quick(radius_frac=rho, lr=0.2), on_iterate=check)
    assert len(worst) == 3 * 7
    assert max(worst) <= 1e-6
    assert res.extras["max_violation"] <= 1e-6


def test_explicit_radii_feasible(client, gen, targets):
    seen = []
    pfo_progressive(_w0(gen), client(targets), client, gen, quick(radii=(0.5, 1.0, 2.0), lr=0.3),
                    on_iterate=lambda s, i, hf, w, hf0, w0, rh, rw: seen.append(
                        (s, l1_distance(hf, hf0).max(), l1_distance(w, w0).max())))
    for stage, dh, dw in seen:
        r = (0.5, 1.0, 2.0)[stage - 1]
        assert dh <= r + 1e-6 and dw <= r + 1e-6


def test_stage_final_not_worse_than_stage_initial(client, gen, targets):
    res = pfo_progressive(_w0(gen), client(targets), client, gen, quick(radius_frac=0.5, lr=0.1))
    for stage in (1, 2, 3):
        trace = res.traces[f"stage{stage}"]
        assert trace.shape == (7, 3)
        assert np.all(trace.min(axis=0) <= trace[0])
        assert np.all(np.diff(res.best_traces[f"stage{stage}"], axis=0) <= 0)


def test_nesting_unbounded_stage_one_improves_on_w_only(client, gen, targets):
    h = client(targets)
    lat = attack_latent_only(h, client, gen, quick())
    res = pfo_progressive(lat.extras["w"], h, client, gen, quick(radii=(math.inf, 0.0, 0.0)))
    assert np.all(res.final_loss <= lat.final_loss)


def test_pfo_not_worse_than_latent_only(client, gen, targets):
    res = attack_pfo(client(targets), client, gen, quick(seed=2))
    assert np.all(res.final_loss <= res.extras["latent_loss"])


def test_pfo_deterministic(client, gen, targets):
    a = attack_pfo(client(targets), client, gen, quick(seed=8))
    b = attack_pfo(client(targets), client, gen, quick(seed=8))
    assert np.array_equal(a.images, b.images)
    assert set(a.traces) == {"select", "w", "stage1", "stage2", "stage3"}


def test_batched_targets_follow_single_target_runs(client, gen, targets):
    w0 = _w0(gen)
    both = pfo_progressive(w0, client(targets), client, gen, quick(radius_frac=0.3))
    one = pfo_progressive(w0[1:2], client(targets[1:2]), client, gen, quick(radius_frac=0.3))
    assert np.allclose(both.images[1], one.images[0], atol=1e-5)


def test_stage_radii_rules(gen):
    hf0, w0 = np.ones((2, 4)), np.full((2, 3), 2.0)
    r_hf, r_w = stage_radii(AttackConfig(radius_frac=0.5), 1, 3, hf0, w0)
    assert np.allclose(r_hf, 2.0) and np.allclose(r_w, 3.0)
    r_hf, r_w = stage_radii(AttackConfig(radii=(1.0, 2.0, 3.0)), 2, 3, hf0, w0)
    assert np.allclose(r_hf, 2.0) and np.allclose(r_w, 2.0)
    with pytest.raises(ValueError):
        stage_radii(AttackConfig(radii=(1.0, 2.0)), 1, 3, hf0, w0)


def test_attacks_leave_models_untouched(client, gen, targets):
    before = nn.param_checksum(client, gen.mapping, *gen.blocks)
    attack_pfo(client(targets), client, gen, quick())
    attack_rmle(client(targets), client, AttackConfig(iterations=3))
    assert nn.param_checksum(client, gen.mapping, *gen.blocks) == before


def test_read_only_detects_modification():
    s = nn.Stack([nn.Dense(2, 2)])
    with pytest.raises(TargetModified):
        with read_only(s):
            s.layers[0].params["bias"] = s.layers[0].params["bias"] + 1


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(radii=(-1.0,))
    with pytest.raises(ValueError):
        AttackConfig(lr=0)
    with pytest.raises(ValueError):
        AttackConfig(tv_reduction="median")
    assert AttackConfig().tv_weight("rmle", 768) == pytest.approx(2.0 / 768)
    assert AttackConfig(tv_reduction="sum").tv_weight("gan", 768) == 0.01


# CMA-ES and the black-box attack -----------------------------------------------------

def test_cma_solves_sphere():
    best_x, best_f, evals = cma_minimize(lambda xs: (xs ** 2).sum(axis=1), np.full(4, 3.0), 1.0,
                                         max_evals=5000, target=1e-7, seed=0)
    assert best_f < 1e-6 and evals <= 5000


def test_cma_matches_gradient_optimum_on_quadratic():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((5, 5))
    H = q @ q.T + np.eye(5)
    b = rng.standard_normal(5)
    f = lambda xs: 0.5 * np.einsum("ni,ij,nj->n", xs, H, xs) - xs @ b  # noqa: E731
    x_cma, _, _ = cma_minimize(f, np.zeros(5), 1.0, max_evals=20000, seed=1)
    x = np.zeros(5)
    opt = nn.Adam(0.05)
    for _ in range(5000):
        x = opt.step({"x": x}, {"x": H @ x - b})["x"]
    assert np.abs(x_cma - x).max() < 1e-3
    assert np.abs(x - np.linalg.solve(H, b)).max() < 1e-3


def test_cma_deterministic():
    es1, es2 = CMAES(np.zeros(3), 0.5, seed=4), CMAES(np.zeros(3), 0.5, seed=4)
    for _ in range(5):
        a, b = es1.ask(), es2.ask()
        assert np.array_equal(a, b)
        es1.tell(a, (a ** 2).sum(1))
        es2.tell(b, (b ** 2).sum(1))


def test_query_oracle_counts_and_limits():
    oracle = QueryOracle(lambda x: x * 2, budget=5)
    oracle(np.ones((3, 2)))
    assert oracle.queries == 3 and oracle.remaining == 2
    with pytest.raises(QueryBudgetExceeded):
        oracle(np.ones((3, 2)))


def test_query_oracle_thread_safe():
    oracle = QueryOracle(lambda x: x, budget=None)
    threads = [threading.Thread(target=lambda: [oracle(np.ones((1, 1))) for _ in range(200)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert oracle.queries == 1600


def test_query_oracle_failures():
    def boom(x):
        raise RuntimeError("down")

    with pytest.raises(OracleFailure):
        QueryOracle(boom)(np.ones((1, 1)))
    with pytest.raises(OracleFailure):
        QueryOracle(lambda x: x * np.nan)(np.ones((1, 1)))


def test_blackbox_contracts(client, gen, targets):
    h = client(targets[:1])
    oracle = QueryOracle(client)
    res = attack_pfo_blackbox(h, oracle, gen, AttackConfig(query_budget=300, candidates=8, seed=1))
    trace = res.best_traces["all"][:, 0]
    assert np.all(np.diff(trace) <= 0)
    assert res.queries == oracle.queries <= 300
    assert res.final_loss[0] == pytest.approx(match_loss(client(res.images), h), rel=1e-5)
    assert not res.budget_exhausted


def test_blackbox_budget_exhaustion_returns_best_so_far(client, gen, targets):
    oracle = QueryOracle(client, budget=50)
    res = attack_pfo_blackbox(client(targets[:1]), oracle, gen, AttackConfig(query_budget=500, candidates=8))
    assert res.budget_exhausted
    assert oracle.queries <= 50 and res.images.shape == (1, *SHAPE)


def test_blackbox_oracle_failure_aborts(gen, targets, client):
    def flaky(x):
        raise IOError("server gone")

    with pytest.raises(OracleFailure):
        attack_pfo_blackbox(client(targets[:1]), QueryOracle(flaky), gen, AttackConfig(query_budget=100))


def test_random_search_uses_exact_budget(client, gen, targets):
    oracle = QueryOracle(client)
    res = random_search(client(targets[:1]), oracle, gen, AttackConfig(query_budget=70))
    assert oracle.queries == 70 and res.queries == 70
    assert np.all(np.diff(res.best_traces["all"][:, 0]) <= 0)
