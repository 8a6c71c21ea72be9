import numpy as np
import pytest

from yolor.config import Config
from yolor.data import SyntheticWorld, filter_lists, generate
from yolor.irm import RawRequest
from yolor.params import init_params


def small_config(**kw) -> Config:
    base = dict(D=8, m=4, n=4, hidden=(16, 8), user_vocab=50, context_vocab=4, item_vocab=40,
                init_std=0.3, batch_size=64, epochs=2)
    base.update(kw)
    return Config(**base).validate()


def random_params(cfg: Config, seed: int = 0):
    return init_params(cfg, np.random.default_rng(seed), dtype=np.float64)


def make_request(n: int, seed: int = 0, n_beh: int = 3, cfg: Config | None = None) -> RawRequest:
    rng = np.random.default_rng(seed)
    item_vocab = cfg.item_vocab if cfg else 40
    items = rng.choice(item_vocab, size=n, replace=False).tolist()
    return RawRequest([int(rng.integers(50))], [int(rng.integers(4))],
                      rng.integers(item_vocab, size=n_beh).tolist(), items, None, f"q{seed}")


@pytest.fixture
def cfg4():
    return small_config()


@pytest.fixture
def params4(cfg4):
    return random_params(cfg4)


@pytest.fixture(scope="session")
def world():
    return SyntheticWorld.create(3, num_items=40, num_users=50)


@pytest.fixture(scope="session")
def samples4(world):
    return list(filter_lists(generate(world, 300, 4, 4, seed=5, truth_limit=0).samples))


# ------------------------------------------------------------ acceptance reporting

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    num, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if rep.passed else "FAIL"
    prev = _ACCEPTANCE.get(num)
    if prev is None or prev[0] == "PASS":
        _ACCEPTANCE[num] = (status, title, detail)
    line = f"ACCEPTANCE C{num} {status}: {title}" + (f" ({detail})" if detail else "")
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[num]
        terminalreporter.write_line(f"C{num:<2} {status}  {title}" + (f"  [{detail}]" if detail else ""))
