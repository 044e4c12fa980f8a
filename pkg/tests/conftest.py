"""Session-scoped trained artifacts shared across the test suite.

Everything is trained fresh per session (no on-disk cache) so the recorded
wall times honestly reflect the end-to-end pipeline budget.
"""

import copy
import time
from dataclasses import replace

import pytest
import torch

from robustmark import pipeline
from robustmark.config import DEFAULTS
from robustmark.corpus import generate_corpus
from robustmark.models import init_models, pretrain_base
from robustmark.regeneration import train_denoiser
from robustmark.stage1 import run_stage1, train_eat_baseline, train_jat_baseline

# Wall-clock seconds per pipeline stage, filled in as fixtures materialize.
TIMINGS: dict[str, float] = {}


def _timed(name: str, fn):
    start = time.perf_counter()
    out = fn()
    TIMINGS[name] = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def cfg():
    return copy.deepcopy(DEFAULTS)


@pytest.fixture(scope="session")
def corpus(cfg):
    c = cfg["corpus"]
    full = _timed("gen_corpus", lambda: generate_corpus(
        count=c["count"], height=c["height"], width=c["width"],
        seed=cfg["eval"]["seed"]))
    # first 48 images are the working corpus; the tail stays unseen
    return full[:48]


@pytest.fixture(scope="session")
def holdout(cfg):
    c = cfg["corpus"]
    full = generate_corpus(count=c["count"], height=c["height"],
                           width=c["width"], seed=cfg["eval"]["seed"])
    return full[48:]


@pytest.fixture(scope="session")
def bundle0(cfg, corpus):
    meta = pipeline.arch_meta(cfg)
    pcfg = pipeline.pretrain_config(cfg, seed=42)

    def build():
        b = init_models(meta, seed=42)
        pretrain_base(b, corpus, pcfg)
        return b

    return _timed("pretrain", build)


@pytest.fixture(scope="session")
def bundle1(cfg, corpus, bundle0):
    s1cfg = pipeline.stage1_config(cfg, seed=42)
    return _timed("stage1", lambda: run_stage1(
        copy.deepcopy(bundle0), corpus, s1cfg))


@pytest.fixture(scope="session")
def eat_bundle(cfg, corpus, bundle0):
    # half the Stage-1 epoch budget: the baselines only need to demonstrate
    # the ordering pattern, not full convergence
    s1cfg = pipeline.stage1_config(cfg, seed=43)
    s1cfg = replace(s1cfg, epochs=max(1, s1cfg.epochs // 2))
    return _timed("eat", lambda: train_eat_baseline(
        copy.deepcopy(bundle0), corpus, s1cfg))


@pytest.fixture(scope="session")
def jat_bundle(cfg, corpus, bundle0):
    jcfg = pipeline.jat_config(cfg, seed=44)
    jcfg = replace(jcfg, epochs=max(1, jcfg.epochs // 2))
    return _timed("jat", lambda: train_jat_baseline(
        copy.deepcopy(bundle0), corpus, cfg=jcfg))


@pytest.fixture(scope="session")
def denoiser_corpus(cfg):
    c = cfg["corpus"]
    return generate_corpus(count=160, height=c["height"], width=c["width"],
                           seed=1000)


@pytest.fixture(scope="session")
def denoiser_a(cfg, denoiser_corpus):
    dcfg = pipeline.denoiser_config(cfg, seed=100)
    return _timed("denoiser_a", lambda: train_denoiser(denoiser_corpus, dcfg))


@pytest.fixture(scope="session")
def denoiser_b(cfg, denoiser_corpus):
    dcfg = pipeline.denoiser_config(cfg, seed=200)
    return _timed("denoiser_b", lambda: train_denoiser(denoiser_corpus, dcfg))


@pytest.fixture(scope="session")
def stage2_cfg(cfg):
    return pipeline.stage2_config(cfg, seed=42)


@pytest.fixture(scope="session")
def small_corpus(corpus):
    return corpus[:6]


@pytest.fixture(scope="session")
def messages(bundle0, corpus):
    g = torch.Generator().manual_seed(9)
    return torch.randint(0, 2, (len(corpus), bundle0.meta.n),
                         generator=g).float()
