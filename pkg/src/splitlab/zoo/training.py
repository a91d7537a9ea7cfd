"""Seeded single-threaded training loops for the zoo models."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import jensenshannon

from splitlab import nn
from splitlab.defenses import DefenseConfig, distance_correlation_grad, siamese_batch_loss
from splitlab.nn.regularizers import sigmoid, softmax_cross_entropy, softplus
from splitlab.zoo.corpus import SyntheticCorpus
from splitlab.zoo.models import Autoencoder, Generator, InverseNet, SplitModel, make_discriminator

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, what: str, step: int, trace):
        super().__init__(f"{what}: non-finite loss at step {step}")
        self.step = step
        self.trace = list(trace)


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class GanConfig:
    steps: int = 3000
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = 32
    seed: int = 0
    log_every: int = 100
    window: int = 200
    collapse_floor: float = 0.02
    js_bound: float = 0.35     # pixel-histogram JS distance expected of a usable prior


@dataclass
class History:
    loss: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check(loss, what, step, trace):
    if not np.isfinite(loss):
        raise TrainingDiverged(what, step, trace)


def train_target(corpus: SyntheticCorpus, cfg: TrainConfig | None = None,
                 defense: DefenseConfig | None = None, split_point: int = 1,
                 widths=(8, 12, 16, 16, 32)) -> tuple[SplitModel, History]:
    """Train the split classifier on the private set.

    ``nopeek`` adds ``lambda2 * dCor(x, h)`` and ``siamese`` adds
    ``lambda3 * contrastive(h)``, with h taken at ``split_point``.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    model = SplitModel(corpus.n_classes, corpus.size, widths, split_point, rng=rng)
    xtr, ytr, xte, yte = corpus.private_split()
    opt = nn.Adam(cfg.lr)
    hist = History()
    defended = defense is not None and defense.at_training
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(xtr), cfg.batch_size, rng):
            x, y = xtr[idx], ytr[idx]
            client, server = model.client(), model.server()
            h, cc = client.forward(x)
            logits, sc = server.forward(h)
            loss, g = softmax_cross_entropy(logits, y)
            gs = server.backward(sc, g)
            gh = gs.input
            if defended and len(idx) > 1:
                if defense.kind == "nopeek":
                    extra, gd = distance_correlation_grad(x, h)
                    weight = defense.lambda2
                else:
                    extra, gd = siamese_batch_loss(h, y, defense.margin)
                    weight = defense.lambda3
                loss += weight * extra
                gh = gh + weight * gd
            gc = client.backward(cc, gh)
            _check(loss, "train_target", step, hist.loss)
            n_client = len(client.layers)
            grads = dict(gc.params)
            grads.update({f"{int(k.split('.', 1)[0]) + n_client}.{k.split('.', 1)[1]}": v
                          for k, v in gs.params.items()})
            model.set_params(opt.step(model.params(), grads))
            losses.append(loss)
            step += 1
        hist.loss.append(float(np.mean(losses)))
        log.info("target epoch %d loss %.4f", epoch, hist.loss[-1])
    hist.extra["test_accuracy"] = accuracy(model, xte, yte)
    return model, hist


def accuracy(model: SplitModel, x, y) -> float:
    return float((model.forward(x).argmax(axis=1) == y).mean())


def pixel_js_distance(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """Jensen-Shannon distance between pixel-value histograms on [0, 1]."""
    pa, _ = np.histogram(a, bins=bins, range=(0, 1))
    pb, _ = np.histogram(b, bins=bins, range=(0, 1))
    return float(jensenshannon(pa, pb, base=2))


def train_gan(public: np.ndarray, cfg: GanConfig | None = None,
              gen_kwargs: dict | None = None) -> tuple[Generator, History]:
    """Non-saturating adversarial training of the generator on D_A.

    ``History.extra['d_fake']`` is the mean discriminator probability on
    samples over the last ``cfg.window`` steps.
    """
    cfg = cfg or GanConfig()
    rng = np.random.default_rng(cfg.seed)
    gen = Generator(rng=rng, size=public.shape[-1], **(gen_kwargs or {}))
    disc = make_discriminator(public.shape[-1], rng=rng)
    opt_g = nn.Adam(cfg.lr, cfg.beta1, cfg.beta2)
    opt_d = nn.Adam(cfg.lr, cfg.beta1, cfg.beta2)
    hist = History()
    hist.extra["d_fake_trace"] = []
    d_fake_window = []
    n, bs = len(public), cfg.batch_size
    g_losses = []
    for step in range(cfg.steps):
        # discriminator step
        real = public[rng.integers(0, n, bs)]
        z = rng.standard_normal((bs, gen.z_dim)).astype(np.float32)
        w = gen.map(z)
        fake = gen.synthesize(w)
        # real and fake go through separately: the discriminator sees batch statistics
        lr_, dc_r = disc.forward(real)
        lf, dc_f = disc.forward(fake)
        lr_, lf = lr_[:, 0], lf[:, 0]
        d_loss = float(softplus(-lr_).mean() + softplus(lf).mean())
        gr = disc.backward(dc_r, (-sigmoid(-lr_)[:, None] / bs).astype(np.float32)).params
        gf = disc.backward(dc_f, (sigmoid(lf)[:, None] / bs).astype(np.float32)).params
        disc.set_params(opt_d.step(disc.params(), {k: gr[k] + gf[k] for k in gr}))

        # generator step
        z = rng.standard_normal((bs, gen.z_dim)).astype(np.float32)
        w, mc = gen.mapping.forward(z)
        fake, caches = gen.remain_forward(0, None, w)
        logits, dc = disc.forward(fake)
        lf = logits[:, 0]
        g_loss = float(softplus(-lf).mean())
        _check(g_loss + d_loss, "train_gan", step, g_losses)
        gx = disc.backward(dc, (-sigmoid(-lf)[:, None] / bs).astype(np.float32), need_params=False).input
        _, dw, pg = gen.remain_backward(0, caches, gx, need_params=True)
        gm = gen.mapping.backward(mc, dw)
        pg.update({f"map.{k}": v for k, v in gm.params.items()})
        gen.set_params(opt_g.step(gen.params(), pg))

        g_losses.append(g_loss)
        d_fake_window.append(float(sigmoid(lf).mean()))
        d_fake_window = d_fake_window[-cfg.window:]
        if (step + 1) % cfg.log_every == 0:
            hist.loss.append(float(np.mean(g_losses[-cfg.log_every:])))
            hist.extra["d_fake_trace"].append(float(np.mean(d_fake_window)))
            log.info("gan step %d g %.3f d %.3f", step + 1, hist.loss[-1], d_loss)
    hist.extra["d_fake"] = float(np.mean(d_fake_window))
    samples = gen.sample(256, np.random.default_rng(cfg.seed + 1))
    spread = float(samples.std(axis=0).mean())
    hist.extra["sample_std"] = spread
    if spread < cfg.collapse_floor:
        warnings.warn(f"generator samples nearly identical (std {spread:.4f}); possible mode collapse")
    hist.extra["pixel_js"] = pixel_js_distance(samples, public)
    if hist.extra["pixel_js"] > cfg.js_bound:
        log.warning("sample pixel histogram far from the data (JS %.3f > %.3f)", hist.extra["pixel_js"], cfg.js_bound)
    return gen, hist


def _fit_decoder(stack: nn.Stack, inputs, targets, cfg: TrainConfig, what: str) -> History:
    rng = np.random.default_rng(cfg.seed + 7)
    opt = nn.Adam(cfg.lr)
    hist = History()
    step = 0
    for _ in range(cfg.epochs):
        losses = []
        for idx in _batches(len(inputs), cfg.batch_size, rng):
            out, cache = stack.forward(inputs[idx])
            diff = out - targets[idx]
            loss = float((diff * diff).mean())
            _check(loss, what, step, hist.loss)
            g = stack.backward(cache, (2.0 * diff / diff.size).astype(out.dtype))
            stack.set_params(opt.step(stack.params(), g.params))
            losses.append(loss)
            step += 1
        hist.loss.append(float(np.mean(losses)))
    return hist


def train_autoencoder(public: np.ndarray, cfg: TrainConfig | None = None,
                      holdout: float = 0.1, width: int = 32) -> tuple[Autoencoder, History]:
    cfg = cfg or TrainConfig(epochs=30)
    n_test = int(len(public) * holdout)
    train, test = public[n_test:], public[:n_test]
    ae = Autoencoder(size=public.shape[-1], width=width, rng=np.random.default_rng(cfg.seed))
    hist = _fit_decoder(ae.stack, train, train, cfg, "train_autoencoder")
    hist.extra["holdout_mse"] = float(((ae(test) - test) ** 2).mean())
    return ae, hist


def train_inverse_net(public: np.ndarray, client: nn.Stack, split_point: int,
                      cfg: TrainConfig | None = None, holdout: float = 0.1,
                      defense: DefenseConfig | None = None, width: int = 32) -> tuple[InverseNet, History]:
    """Fit M^-1 on pairs (M_C(x_pub), x_pub)."""
    cfg = cfg or TrainConfig(epochs=30)
    n_test = int(len(public) * holdout)
    h = client(public)
    if defense is not None and defense.at_wire:
        from splitlab.defenses import apply_wire_defense

        h = apply_wire_defense(h, defense, seed=cfg.seed + 11)
    inv = InverseNet(h.shape[1:], size=public.shape[-1], width=width, split_point=split_point,
                     rng=np.random.default_rng(cfg.seed))
    hist = _fit_decoder(inv.stack, h[n_test:], public[n_test:], cfg, "train_inverse_net")
    hist.extra["holdout_mse"] = float(((inv(h[:n_test]) - public[:n_test]) ** 2).mean())
    return inv, hist
