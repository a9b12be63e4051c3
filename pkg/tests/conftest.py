import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import mhexlab as mx
from mhexlab.models import (ResNetConfig, TransformerConfig, build_resnet,
                            build_transformer, load_checkpoint,
                            save_checkpoint, train)

CACHE = Path(__file__).parent / "_cache"
CACHE.mkdir(exist_ok=True)


@pytest.fixture(scope="session")
def shapes_2000():
    return mx.gen_shapes(2000, seed=0)


@pytest.fixture(scope="session")
def tokens_1000():
    return mx.gen_tokens(1000, seed=0)


def _cached_model(path, builder):
    ckpt = CACHE / path
    if ckpt.exists():
        try:
            return load_checkpoint(ckpt)
        except Exception:
            ckpt.unlink()
    model, log = builder()
    save_checkpoint(model, ckpt)
    with open(CACHE / (path + ".log"), "w") as fh:
        for e in log.entries:
            fh.write(f"{e.epoch} {e.loss} {e.head_accuracy}\n")
    return model


@pytest.fixture(scope="session")
def trained_cnn(shapes_2000):
    """CNN host trained to criterion on the planted-shape set; cached on disk
    so a cold run pays the cost once."""
    def build():
        m = build_resnet(ResNetConfig(n_class=shapes_2000.n_class), seed=0)
        log = train(m, shapes_2000, mode="finetune", epochs=10, lr=3e-3,
                    seed=0, batch_size=64)
        return m, log
    return _cached_model("cnn2000.ckpt", build)


@pytest.fixture(scope="session")
def trained_cnn_log(trained_cnn):
    log_path = CACHE / "cnn2000.ckpt.log"
    rows = []
    if log_path.exists():
        for line in log_path.read_text().splitlines():
            epoch, loss, accs = line.split(" ", 2)
            rows.append((int(epoch), float(loss), eval(accs)))
    return rows


@pytest.fixture(scope="session")
def trained_transformer():
    """Token host trained in two short stages; the optimizer restart between
    them kicks the model off the early loss plateau, which sharpens per-token
    locality of the learned features (picked by a pilot sweep)."""
    def build():
        data = mx.gen_tokens(2000, seed=0)
        cfg = TransformerConfig(vocab_size=data.vocab_size,
                                n_class=data.n_class, max_seq=data.max_seq)
        m = build_transformer(cfg, seed=0)
        train(m, data, mode="finetune", epochs=4, lr=2e-3, seed=0,
              batch_size=64, eval_accuracy=False)
        log = train(m, data, mode="finetune", epochs=4, lr=2e-3, seed=4,
                    batch_size=64)
        return m, log
    return _cached_model("tfm2000.ckpt", build)


@pytest.fixture(scope="session")
def small_cnn():
    """Untrained small host for plumbing tests."""
    return build_resnet(ResNetConfig(), seed=3)


@pytest.fixture(scope="session")
def small_transformer():
    return build_transformer(TransformerConfig(), seed=3)
