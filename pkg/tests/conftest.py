"""Shared fixtures: the trained desk-scale zoo, built once through the CLI and cached on disk.

The cache lives in ``<repo>/.cache/desk-<key>`` where the key hashes the
desk config and every source file that training depends on, so editing a
model or training loop retrains. Set ``SPLITLAB_CACHE`` to move it, or
``SPLITLAB_DESK_DIR`` to use an already built desk directory as is.
"""

import glob
import hashlib
import json
import os
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SRC = os.path.join(ROOT, "src", "splitlab")
DESK_CONFIG = os.path.join(ROOT, "configs", "desk.toml")
TINY_CONFIG = os.path.join(ROOT, "configs", "tiny.toml")
TRAINING_SOURCES = ("nn/*.py", "zoo/*.py", "defenses.py", "checkpoint.py", "seeds.py", "config.py", "cli.py")

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = {}


def _training_key() -> str:
    h = hashlib.sha1()
    files = [DESK_CONFIG] + sorted(p for pat in TRAINING_SOURCES for p in glob.glob(os.path.join(SRC, pat)))
    for path in files:
        h.update(os.path.relpath(path, ROOT).encode())
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()[:16]


def build_desk(out_dir: str) -> str:
    """gen-corpus, targets (plain and NoPeek), GAN, AE and inverse nets, via the CLI."""
    from splitlab.cli import main

    steps = [
        ["gen-corpus"],
        ["train-target"],
        ["train-target", "--set", 'target.defense.kind="nopeek"'],
        ["train-gan"],
        ["train-ae"],
        ["train-inverse"],
    ]
    for step in steps:
        code = main([step[0], "--config", DESK_CONFIG, "--out", out_dir] + step[1:])
        if code != 0:
            raise RuntimeError(f"desk build step {step} exited with {code}")
    return out_dir


@pytest.fixture(scope="session")
def desk_dir():
    if os.environ.get("SPLITLAB_DESK_DIR"):
        return os.environ["SPLITLAB_DESK_DIR"]
    base = os.environ.get("SPLITLAB_CACHE", os.path.join(ROOT, ".cache"))
    out = os.path.join(base, f"desk-{_training_key()}")
    done = os.path.join(out, "COMPLETE")
    if not os.path.exists(done):
        build_desk(out)
        with open(done, "w") as fh:
            fh.write("ok\n")
    return out


@pytest.fixture(scope="session")
def desk_cfg(desk_dir):
    from splitlab.config import load_config

    return load_config(DESK_CONFIG, [f'out_dir="{desk_dir}"'])


@pytest.fixture(scope="session")
def desk(desk_dir, desk_cfg):
    """Loaded desk artifacts: corpus, zoo, nopeek target, attacked targets and training histories."""
    from splitlab.checkpoint import load_checkpoint
    from splitlab.cli import Run, load_corpus, target_images
    from splitlab.experiment import Zoo

    run = Run(desk_cfg, "test")
    corpus = load_corpus(run)
    zoo = Zoo(load_checkpoint(run.target_path("none")), load_checkpoint(run.model_path("gan")),
              load_checkpoint(run.model_path("ae")),
              {s: load_checkpoint(run.model_path(f"inverse-split{s}")) for s in (1, 2, 3)})

    def history(path):
        with open(path + ".manifest.json") as fh:
            return json.load(fh)["history"]

    hist = {name: history(run.model_path(name)) for name in
            ("target", "target-nopeek", "gan", "ae", "inverse-split1", "inverse-split2", "inverse-split3")}
    return {
        "run": run,
        "corpus": corpus,
        "zoo": zoo,
        "nopeek": load_checkpoint(run.target_path("nopeek")),
        "targets": target_images(run, corpus),
        "history": hist,
    }


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
