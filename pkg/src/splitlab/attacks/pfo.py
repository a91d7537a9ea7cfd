"""GAN-prior attacks: latent-only inversion and progressive feature optimization.

Every function works on a batch of T targets at once. Losses are summed
over targets and Adam is elementwise, so a batched run follows the same
per-target trajectories as T separate runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from splitlab import nn
from splitlab.attacks.common import (
    AttackConfig,
    AttackDiverged,
    AttackResult,
    BestTracker,
    check_finite,
    ensure_batch,
    l1_distance,
    match_loss_grad,
    per_target_mse,
    project_l1_ball_rows,
    read_only,
)


@dataclass
class Selection:
    z: np.ndarray            # (T, k_z) selected candidates
    w_init: np.ndarray       # (T, k_w) = G_map(z)
    index: np.ndarray        # (T,) chosen candidate index
    losses: np.ndarray       # (T, K) final match loss of every candidate
    trace: np.ndarray        # (n_iter + 1, T) best-candidate match loss per iteration


@dataclass
class LatentFit:
    w: np.ndarray
    image: np.ndarray
    loss: np.ndarray
    trace: np.ndarray


def _targets(h_tar, client, gen):
    return ensure_batch(h_tar, client.output_shape((1, 3, gen.size, gen.size))[1:])


def _image_grad(client, cache, h, h_tar, x, alpha):
    g = client.backward(cache, match_loss_grad(h, h_tar).astype(x.dtype), need_params=False).input
    if alpha:
        g = g + alpha * nn.total_variation_grad(x)
    return g


def pfo_initial_selection(h_tar, client: nn.Stack, gen, cfg: AttackConfig | None = None) -> Selection:
    """Jointly optimize K latent candidates per target, keep the best.

    Objective per target: sum of candidate match losses + lambda * KL of the
    candidates' batch statistics + alpha * TV of every candidate image.
    The candidate with the lowest final match loss wins (lowest index on ties).
    """
    cfg = cfg or AttackConfig()
    h_tar = _targets(h_tar, client, gen)
    t, k = h_tar.shape[0], cfg.candidates
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((t, k, gen.z_dim)).astype(h_tar.dtype)
    alpha = cfg.tv_weight("gan", 3 * gen.size * gen.size)
    use_kl = cfg.kl_weight > 0 and k >= 2
    reps = np.repeat(h_tar, k, axis=0)
    opt = nn.Adam(cfg.lr)
    trace = []
    with read_only(client, gen):
        for step in range(cfg.n_select + 1):
            zf = z.reshape(t * k, -1)
            w, mc = gen.mapping.forward(zf)
            x, caches = gen.remain_forward(0, None, w)
            h, cc = client.forward(x)
            loss = per_target_mse(h, reps).reshape(t, k)
            loss = np.where(np.isfinite(loss), loss, np.inf)
            if np.any(np.all(np.isinf(loss), axis=1)):
                raise AttackDiverged("initial selection", step, trace)
            trace.append(loss.min(axis=1))
            if step == cfg.n_select:
                break
            gx = _image_grad(client, cc, h, reps, x, alpha)
            _, dw, _ = gen.remain_backward(0, caches, gx)
            dz = gen.mapping.backward(mc, dw, need_params=False).input.reshape(z.shape)
            if use_kl:
                dz = dz + nn.kl_gaussian_reg_grad(z, cfg.kl_weight)
            z = opt.step({"z": z}, {"z": dz})["z"]
    index = np.argmin(loss, axis=1)
    z_star = z[np.arange(t), index]
    return Selection(z_star, gen.map(z_star), index, loss, np.array(trace))


def _fit_latent(w_init, h_tar, client, gen, cfg) -> LatentFit:
    alpha = cfg.tv_weight("gan", 3 * gen.size * gen.size)
    w = np.array(w_init, dtype=h_tar.dtype, copy=True)
    opt = nn.Adam(cfg.lr)
    best = BestTracker(len(w))
    trace = []
    for step in range(cfg.n_w + 1):
        x, caches = gen.remain_forward(0, None, w)
        h, cc = client.forward(x)
        loss = per_target_mse(h, h_tar)
        check_finite(loss, "w optimization", step, trace)
        trace.append(loss)
        best.update(loss, w=w, x=x)
        if step == cfg.n_w:
            break
        gx = _image_grad(client, cc, h, h_tar, x, alpha)
        _, dw, _ = gen.remain_backward(0, caches, gx)
        w = opt.step({"w": w}, {"w": dw})["w"]
    return LatentFit(best["w"], best["x"], best.loss, np.array(trace))


def pfo_optimize_w(w_init, h_tar, client: nn.Stack, gen, cfg: AttackConfig | None = None) -> np.ndarray:
    """Adam on w under match + alpha * TV; returns the best iterate w_0."""
    cfg = cfg or AttackConfig()
    h_tar = _targets(h_tar, client, gen)
    with read_only(client, gen):
        return _fit_latent(w_init, h_tar, client, gen, cfg).w


def stage_radii(cfg: AttackConfig, stage: int, depth: int, hf0, w0):
    """(r_hf, r_w) per target for ``stage`` (1-based)."""
    if cfg.radii is not None:
        radii = tuple(cfg.radii)
        if len(radii) == 1:
            radii = radii * depth
        if len(radii) != depth:
            raise ValueError(f"expected {depth} radii, got {len(radii)}")
        r = np.full(len(w0), float(radii[stage - 1]))
        return r, r
    return cfg.radius_frac * l1_distance(hf0, np.zeros_like(hf0)), cfg.radius_frac * l1_distance(w0, np.zeros_like(w0))


def pfo_progressive(w_0, h_tar, client: nn.Stack, gen, cfg: AttackConfig | None = None,
                    on_iterate=None) -> AttackResult:
    """Stage-wise joint optimization of (hf_i, w_i) inside l1 balls.

    hf_1^0 = G_1(w_0). Stage i runs N Adam steps on hf_i and w_i through
    G_remain = G_{H+1} o ... o G_{i+1}, projecting both onto their balls
    after every step. The stage's best iterate (iterate 0 included) is
    handed to the next stage; the final image is the best image of stage H.
    ``on_iterate(stage, step, hf, w, hf0, w0, r_hf, r_w)`` sees every iterate.
    """
    cfg = cfg or AttackConfig()
    t0 = time.perf_counter()
    h_tar = _targets(h_tar, client, gen)
    alpha = cfg.tv_weight("gan", 3 * gen.size * gen.size)
    w = np.array(w_0, dtype=h_tar.dtype, copy=True)
    depth = gen.depth
    traces, best_traces, radii_used = {}, {}, {}
    violation = 0.0
    with read_only(client, gen):
        if depth == 0:
            x = gen.synthesize(w)
            loss = per_target_mse(client(x), h_tar)
            return AttackResult("pfo", x, loss, wall_clock=time.perf_counter() - t0, config=cfg.echo())
        hf = gen.block_forward(1, None, w)[0]
        for stage in range(1, depth + 1):
            hf0, w0 = hf, w
            r_hf, r_w = stage_radii(cfg, stage, depth, hf0, w0)
            radii_used[stage] = (r_hf, r_w)
            opt = nn.Adam(cfg.lr)
            best = BestTracker(len(w))
            trace = []
            hf, w = hf0.copy(), w0.copy()
            for step in range(cfg.iterations + 1):
                if on_iterate is not None:
                    on_iterate(stage, step, hf, w, hf0, w0, r_hf, r_w)
                violation = max(violation, float(np.max(l1_distance(hf, hf0) - r_hf)),
                                float(np.max(l1_distance(w, w0) - r_w)))
                x, caches = gen.remain_forward(stage, hf, w)
                h, cc = client.forward(x)
                loss = per_target_mse(h, h_tar)
                check_finite(loss, "progressive optimization", step, trace, stage)
                trace.append(loss)
                best.update(loss, hf=hf, w=w, x=x)
                if step == cfg.iterations:
                    break
                gx = _image_grad(client, cc, h, h_tar, x, alpha)
                dhf, dw, _ = gen.remain_backward(stage, caches, gx)
                new = opt.step({"hf": hf, "w": w}, {"hf": dhf, "w": dw})
                hf = project_l1_ball_rows(new["hf"], hf0, r_hf)
                w = project_l1_ball_rows(new["w"], w0, r_w)
            trace = np.array(trace)
            traces[f"stage{stage}"] = trace
            best_traces[f"stage{stage}"] = np.minimum.accumulate(trace, axis=0)
            w = best["w"]
            if stage < depth:
                hf = gen.block_forward(stage + 1, best["hf"], w)[0]
    return AttackResult("pfo", best["x"], best.loss, traces, best_traces, time.perf_counter() - t0,
                        cfg.echo(), extras={"w": w, "radii": radii_used, "max_violation": violation})


def attack_latent_only(h_tar, client: nn.Stack, gen, cfg: AttackConfig | None = None) -> AttackResult:
    """Initial selection followed by w optimization (no feature stages)."""
    cfg = cfg or AttackConfig()
    t0 = time.perf_counter()
    h_tar = _targets(h_tar, client, gen)
    sel = pfo_initial_selection(h_tar, client, gen, cfg)
    with read_only(client, gen):
        fit = _fit_latent(sel.w_init, h_tar, client, gen, cfg)
    traces = {"select": sel.trace, "w": fit.trace}
    best = {k: np.minimum.accumulate(v, axis=0) for k, v in traces.items()}
    return AttackResult("latent-only", fit.image, fit.loss, traces, best, time.perf_counter() - t0,
                        cfg.echo(), extras={"w": fit.w, "z": sel.z})


def attack_pfo(h_tar, client: nn.Stack, gen, cfg: AttackConfig | None = None,
               on_iterate=None) -> AttackResult:
    """Full pipeline: initial selection, w optimization, progressive stages.

    ``extras['latent_image']`` is the w-only reconstruction from the same run,
    identical to :func:`attack_latent_only` under the same config.
    """
    cfg = cfg or AttackConfig()
    t0 = time.perf_counter()
    latent = attack_latent_only(h_tar, client, gen, cfg)
    h_tar = _targets(h_tar, client, gen)
    res = pfo_progressive(latent.extras["w"], h_tar, client, gen, cfg, on_iterate=on_iterate)
    res.traces = {**latent.traces, **res.traces}
    res.best_traces = {**latent.best_traces, **res.best_traces}
    res.extras.update(latent_image=latent.images, latent_loss=latent.final_loss, w0=latent.extras["w"])
    res.wall_clock = time.perf_counter() - t0
    return res
