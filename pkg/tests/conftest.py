import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from eaclab import bench
from eaclab import editcore as ec
from eaclab import microlm as lm
from eaclab import toyworld as tw

TOY_STEPS = 2000
WORLD_SEED = 0


def _stamp() -> str:
    # retrain whenever the model code or the training recipe changes
    src = Path(lm.__file__).read_bytes() + Path(tw.__file__).read_bytes()
    recipe = json.dumps({"steps": TOY_STEPS, "world": WORLD_SEED, "cfg": lm.LmConfig().__dict__}, sort_keys=True)
    return hashlib.sha256(src + recipe.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def tok():
    return tw.tokenizer()


@pytest.fixture(scope="session")
def corpus(tok):
    return tw.corpus_tokens(tok, tw.world_facts(WORLD_SEED), seed=WORLD_SEED)


@pytest.fixture(scope="session")
def toy_path(request, tok, corpus) -> Path:
    """Trained default toy model, cached in the pytest cache directory across sessions."""
    root = Path(request.config.cache.mkdir("eaclab"))
    path = root / f"toy_{_stamp()}.npz"
    if not path.exists():
        model = lm.init_model(lm.LmConfig())
        lm.train_toy(model, corpus, TOY_STEPS)
        tmp = path.with_suffix(".tmp.npz")
        lm.save_checkpoint(model, tmp)
        tmp.replace(path)
    return path


@pytest.fixture(scope="session")
def toy_model(toy_path) -> lm.MicroLM:
    """Shared read-only trained model; copy before editing."""
    return lm.load_checkpoint(toy_path)


@pytest.fixture
def model(toy_model) -> lm.MicroLM:
    return toy_model.copy()


@pytest.fixture(scope="session")
def facts():
    return bench.load_facts()


@pytest.fixture(scope="session")
def cov_cache():
    """Per-layer key covariances of the unedited toy model, shared by editors."""
    return {}


@pytest.fixture
def editor_factory(tok, corpus, cov_cache):
    def make(model, params=None):
        ed = ec.Editor(model, tok, corpus, params)
        if params is None or (params.seed, params.cov_windows) == (0, ec.EditParams().cov_windows):
            ed._cov = cov_cache
        return ed

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
