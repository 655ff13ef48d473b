import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import pytest

from spinelab.policy import load_checkpoint, save_checkpoint
from spinelab.pretrain import PretrainConfig, pretrain
from spinelab.tasks import generate_instances, make_splits

DATA_SEED = 0
N_PRETRAIN = 8000
CACHE = Path(os.environ.get("SPINELAB_CACHE", Path(__file__).resolve().parent.parent / ".cache"))


def _held_out(pre):
    return generate_instances("modchain", (1, 3), 300, DATA_SEED + 99, "eval",
                              exclude={p.prompt_tokens for p in pre})


@pytest.fixture(scope="session")
def splits():
    pre, adapt, ev = make_splits(DATA_SEED, n_pretrain=N_PRETRAIN)
    return {"pretrain": pre, "adapt": adapt, "eval": ev, "indist": _held_out(pre)}


@pytest.fixture(scope="session")
def pretrained(splits):
    """The toy policy pretrained on short chains, cached on disk by config hash.

    The first session trains it (several minutes on one core); later ones load it.
    """
    cfg = PretrainConfig()
    key = json.dumps({"cfg": asdict(cfg), "data_seed": DATA_SEED, "n": N_PRETRAIN,
                      "trace": "v2"}, sort_keys=True, default=str)
    path = CACHE / f"pretrained-{hashlib.sha256(key.encode()).hexdigest()[:12]}.npz"
    if path.exists():
        return load_checkpoint(path)
    policy, hist = pretrain(splits["pretrain"], cfg, splits["indist"])
    CACHE.mkdir(parents=True, exist_ok=True)
    save_checkpoint(policy, path, extra={"history": hist})
    return policy


# -- acceptance reporting ---------------------------------------------------
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n = mark.args[0]
    ok = rep.passed and _CRITERIA.get(n, (True,))[0]
    _CRITERIA[n] = (ok, _CRITERIA.get(n, (None, []))[1] + [item.name])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, names = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} "
                                    f"({', '.join(dict.fromkeys(names))})")
