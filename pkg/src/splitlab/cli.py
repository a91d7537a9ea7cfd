"""Command-line entry point: ``splitlab <subcommand> --config FILE [--set key=value ...]``.

Exit codes: 0 success, 1 runtime failure (trace written to
``<out_dir>/error-trace.txt``), 2 invalid configuration, 3 missing checkpoint.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
import traceback

import numpy as np

from splitlab.checkpoint import MissingCheckpoint, load_checkpoint, save_checkpoint
from splitlab.config import ConfigError, ExperimentConfig, load_config
from splitlab.defenses import DefenseConfig
from splitlab.images import dump_images
from splitlab.metrics import EvalReport, evaluate_attack
from splitlab.seeds import derive_seed

log = logging.getLogger("splitlab")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_CHECKPOINT = 1, 2, 3


def git_hash(path) -> str:
    """Content hash in git's blob form: sha1(b"blob <len>\\0" + bytes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class Run:
    """Paths, seeds and manifest writing for one invocation."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg, self.command = cfg, command
        self.out = cfg.out_dir
        os.makedirs(self.path("models"), exist_ok=True)
        os.makedirs(self.path("reports"), exist_ok=True)
        self.seeds = {}

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def seed(self, label: str) -> int:
        self.seeds[label] = derive_seed(self.cfg.seed, label)
        return self.seeds[label]

    def manifest(self, artifact: str, inputs=(), extra=None):
        doc = {
            "artifact": os.path.basename(artifact),
            "command": self.command,
            "config": self.cfg.model_dump(),
            "seeds": self.seeds,
            "inputs": {os.path.relpath(p, self.out): git_hash(p) for p in inputs if os.path.exists(p)},
            "content_hash": git_hash(artifact) if os.path.isfile(artifact) else None,
        }
        if extra:
            doc.update(extra)
        with open(artifact + ".manifest.json", "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)

    # artifact locations
    def corpus_path(self):
        return self.path("corpus.npz")

    def target_path(self, kind=None):
        kind = kind or self.cfg.target.defense.kind
        return self.path("models", "target.splb" if kind == "none" else f"target-{kind}.splb")

    def model_path(self, name):
        return self.path("models", f"{name}.splb")


def _need(path):
    if not os.path.exists(path):
        raise MissingCheckpoint(f"required artifact missing: {path}")
    return path


def load_corpus(run: Run):
    from splitlab.zoo.corpus import SyntheticCorpus

    with np.load(_need(run.corpus_path())) as z:
        return SyntheticCorpus(z["private_images"], z["private_labels"], z["public_images"], z["public_labels"],
                               size=int(z["size"]), ood=bool(z["ood"]), seed=int(z["seed"]))


def defense_config(section, seed) -> DefenseConfig:
    return DefenseConfig(**section.model_dump(), seed=seed)


def target_images(run: Run, corpus) -> np.ndarray:
    """The attacked private images: the first ``n_targets`` of the held-out split."""
    _, _, xte, _ = corpus.private_split()
    return xte[:run.cfg.n_targets]


# subcommands -------------------------------------------------------------------

def cmd_gen_corpus(run: Run, args):
    from splitlab.zoo import make_corpus

    c = run.cfg.corpus
    corpus = make_corpus(c.n_private, c.n_public, c.size, c.ood, seed=run.seed("corpus"))
    np.savez(run.corpus_path(), private_images=corpus.private_images, private_labels=corpus.private_labels,
             public_images=corpus.public_images, public_labels=corpus.public_labels,
             size=np.int64(corpus.size), ood=np.bool_(corpus.ood), seed=np.int64(corpus.seed))
    run.manifest(run.corpus_path())
    print(run.corpus_path())


def cmd_train_target(run: Run, args):
    from splitlab.zoo import TrainConfig, accuracy, train_target

    corpus = load_corpus(run)
    t = run.cfg.target
    defense = defense_config(t.defense, run.seed("target-defense"))
    tc = TrainConfig(t.epochs, t.lr, t.batch_size, run.seed("target"))
    model, hist = train_target(corpus, tc, defense if defense.at_training else None, run.cfg.split_point, t.widths)
    out = run.target_path()
    save_checkpoint(model, out)
    run.manifest(out, [run.corpus_path()], {"history": {"loss": hist.loss, **hist.extra}})
    print(f"{out} test_accuracy={hist.extra['test_accuracy']:.4f}")


def cmd_train_gan(run: Run, args):
    from splitlab.zoo import GanConfig, train_gan

    corpus = load_corpus(run)
    g = run.cfg.gan
    gc = GanConfig(steps=g.steps, lr=g.lr, beta1=g.beta1, beta2=g.beta2, batch_size=g.batch_size,
                   seed=run.seed("gan"), log_every=max(1, min(100, g.steps)))
    gen, hist = train_gan(corpus.public_images, gc, {"channels": tuple(g.channels), "z_dim": g.z_dim, "w_dim": g.w_dim})
    out = run.model_path("gan")
    save_checkpoint(gen, out)
    run.manifest(out, [run.corpus_path()], {"history": {"g_loss": hist.loss, **hist.extra}})
    print(f"{out} d_fake={hist.extra['d_fake']:.3f} pixel_js={hist.extra['pixel_js']:.3f}")


def _decoder_cfg(section, seed):
    from splitlab.zoo import TrainConfig

    return TrainConfig(section.epochs, section.lr, section.batch_size, seed)


def cmd_train_ae(run: Run, args):
    from splitlab.zoo import train_autoencoder

    corpus = load_corpus(run)
    a = run.cfg.autoencoder
    ae, hist = train_autoencoder(corpus.public_images, _decoder_cfg(a, run.seed("ae")), width=a.width)
    out = run.model_path("ae")
    save_checkpoint(ae, out)
    run.manifest(out, [run.corpus_path()], {"history": {"loss": hist.loss, **hist.extra}})
    print(f"{out} holdout_mse={hist.extra['holdout_mse']:.5f}")


def cmd_train_inverse(run: Run, args):
    from splitlab.zoo import train_inverse_net

    corpus = load_corpus(run)
    target = load_checkpoint(_need(run.target_path()))
    splits = [args.split] if args.split else run.cfg.split_points
    for split in splits:
        s = run.cfg.inverse
        inv, hist = train_inverse_net(corpus.public_images, target.client(split), split,
                                      _decoder_cfg(s, run.seed(f"inverse-{split}")), width=s.width)
        out = run.model_path(f"inverse-split{split}")
        save_checkpoint(inv, out)
        run.manifest(out, [run.corpus_path(), run.target_path()], {"history": {"loss": hist.loss, **hist.extra}})
        print(f"{out} holdout_mse={hist.extra['holdout_mse']:.5f}")


def _address(text: str):
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_serve(run: Run, args):
    from splitlab.wire import run_server

    target = load_checkpoint(_need(run.target_path()))
    split = run.cfg.split_point
    listen = _address(args.listen or run.cfg.server.listen)
    print(f"serving split {split} on {listen[0]}:{listen[1]}", flush=True)
    run_server(target.server(split), listen, target.h_shape(split), capture=args.capture)


def cmd_client(run: Run, args):
    from splitlab.wire import run_client

    corpus = load_corpus(run)
    target = load_checkpoint(_need(run.target_path()))
    images = target_images(run, corpus)
    defense = defense_config(run.cfg.defense, run.seed("wire-defense"))
    logits = run_client(target.client(run.cfg.split_point), images, _address(args.server or run.cfg.server.listen),
                        defense if defense.at_wire else None, seed=run.seed("wire-defense"))
    out = run.path("predictions.json")
    with open(out, "w") as fh:
        json.dump({"predictions": logits.argmax(axis=1).tolist()}, fh)
    print(" ".join(str(p) for p in logits.argmax(axis=1)))


def load_zoo(run: Run, names, splits):
    from splitlab.experiment import Zoo

    zoo = Zoo(load_checkpoint(_need(run.target_path())))
    if any(n in names for n in ("latent-only", "pfo", "pfo-noball", "pfo-blackbox")):
        zoo.gen = load_checkpoint(_need(run.model_path("gan")))
    if "lm" in names:
        zoo.ae = load_checkpoint(_need(run.model_path("ae")))
    if "in" in names:
        zoo.inverse = {s: load_checkpoint(_need(run.model_path(f"inverse-split{s}"))) for s in splits}
    return zoo


def _write_rows(run: Run, report: EvalReport, name: str, inputs):
    out = run.path("reports", f"{name}.csv")
    report.write_csv(out)
    run.manifest(out, inputs, {"failed_runs": {f"{r.attack}@{r.split}": r.failed for r in report.rows}})
    return out


def _inputs(run):
    return sorted(glob.glob(run.path("models", "*.splb"))) + [run.corpus_path()]


def cmd_attack(run: Run, args):
    from splitlab.experiment import PfoCache, attack_config, attack_fn

    corpus = load_corpus(run)
    split = args.split or run.cfg.split_point
    zoo = load_zoo(run, [args.method], [split])
    cfg = attack_config(run.cfg.attack, run.seed("attack"))
    truth = target_images(run, corpus)
    defense = defense_config(run.cfg.defense, run.seed("wire-defense"))
    wire = defense if defense.at_wire else None
    fn = attack_fn(args.method, zoo, split, cfg, PfoCache(zoo, split, cfg))
    first = []

    def keep_first(h, seed):
        out = fn(h, seed)
        if not first:
            first.append(out)
        return out

    if args.capture:
        from splitlab.wire import replay_capture

        replay = replay_capture(args.capture)
        if not replay:
            raise RuntimeError(f"capture {args.capture} holds no decodable records")
        h = np.concatenate([np.asarray(r).reshape((-1,) + r.shape[-3:]) for r in replay])
        n = min(len(h), len(truth))
        row = evaluate_attack(keep_first, truth[:n], None, name=args.method, split=split,
                              defense=wire, seeds=[0], representations=[h[:n]])
    else:
        row = evaluate_attack(keep_first, truth, zoo.target.client(split), name=args.method, split=split,
                              defense=wire, seeds=run.cfg.seeds)
    tag = f"attack-{args.method}-split{split}-{row.defense}"
    out = _write_rows(run, EvalReport([row]), tag, _inputs(run) + ([args.capture] if args.capture else []))
    if first:
        dump_images(np.clip(first[0], 0, 1), run.path("images", tag))
    print(f"{out} psnr={row.psnr:.2f} ssim={row.ssim:.3f} n={row.n}")


def cmd_evaluate(run: Run, args):
    from splitlab.experiment import attack_config, run_evaluation

    corpus = load_corpus(run)
    zoo = load_zoo(run, run.cfg.attacks, run.cfg.split_points)
    defense = defense_config(run.cfg.defense, run.seed("wire-defense"))
    report = run_evaluation(zoo, target_images(run, corpus), run.cfg.attacks, run.cfg.split_points,
                            attack_config(run.cfg.attack, run.seed("attack")),
                            defense if defense.at_wire else None, seeds=run.cfg.seeds)
    print(_write_rows(run, report, f"evaluate-{defense.label()}", _inputs(run)))


def cmd_ablate(run: Run, args):
    from splitlab.experiment import attack_config, run_ablation

    corpus = load_corpus(run)
    zoo = load_zoo(run, ["pfo"], run.cfg.split_points)
    report = run_ablation(zoo, target_images(run, corpus), run.cfg.split_points,
                          attack_config(run.cfg.attack, run.seed("attack")), seeds=run.cfg.seeds)
    print(_write_rows(run, report, "ablate", _inputs(run)))


def cmd_report(run: Run, args):
    merged, seen = EvalReport(), set()
    sources = sorted(glob.glob(run.path("reports", "*.csv")))
    for path in sources:
        for row in EvalReport.read_csv(path).rows:
            # the same result often lands in several reports (attack, evaluate, ablate)
            key = tuple(row.csv_fields())
            if key not in seen:
                seen.add(key)
                merged.add(row)
    out = args.output or run.path("report.csv")
    merged.sorted().write_csv(out)
    run.manifest(out, sources)
    print(out)


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "train-target": cmd_train_target, "train-gan": cmd_train_gan,
    "train-ae": cmd_train_ae, "train-inverse": cmd_train_inverse, "serve": cmd_serve, "client": cmd_client,
    "attack": cmd_attack, "ablate": cmd_ablate, "evaluate": cmd_evaluate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitlab", description="Split-inference reconstruction lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        if name == "attack":
            p.add_argument("--method", required=True,
                           choices=["rmle", "lm", "in", "latent-only", "pfo", "pfo-noball", "pfo-blackbox"])
            p.add_argument("--capture", help="attack representations replayed from a capture file")
            p.add_argument("--split", type=int, choices=[1, 2, 3])
        if name == "train-inverse":
            p.add_argument("--split", type=int, choices=[1, 2, 3])
        if name == "serve":
            p.add_argument("--listen", help="host:port")
            p.add_argument("--capture", help="append every received request to this file")
        if name == "client":
            p.add_argument("--server", help="host:port")
        if name == "report":
            p.add_argument("--output", help="merged CSV path (default <out_dir>/report.csv)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides) + ([f'out_dir="{args.out}"'] if args.out else [])
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = Run(cfg, args.command)
        COMMANDS[args.command](run, args)
    except MissingCheckpoint as exc:
        print(f"missing checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception as exc:  # report, keep a trace, exit non-zero
        os.makedirs(cfg.out_dir, exist_ok=True)
        trace = os.path.join(cfg.out_dir, "error-trace.txt")
        with open(trace, "w") as fh:
            traceback.print_exc(file=fh)
        print(f"error: {exc} (trace in {trace})", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
