import numpy as np
import pytest

from hdivflow.services.cache import clear_all_caches


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="slow マーカー付きの試験も実行する")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="--runslow を指定した場合のみ実行")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def fresh_caches():
    yield
    clear_all_caches()


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """ログファイルと出力を一時ディレクトリに書く"""
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)
