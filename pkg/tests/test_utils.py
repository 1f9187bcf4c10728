import logging
import math

import pytest

from hdivflow.config import Config
from hdivflow.services.utils import (
    calculate_loglog_slope,
    calculate_observed_order,
    calculate_observed_orders,
    check_order,
    format_order,
    parse_float_list,
    parse_text_list,
    worker_count,
)
from hdivflow.utils import get_logger, setup_logging


class TestObservedOrder:
    def test_second_order(self):
        assert calculate_observed_order(4e-2, 1e-2, 0.5, 0.25) == pytest.approx(2.0)

    def test_equal_mesh_sizes(self):
        assert calculate_observed_order(1.0, 0.5, 0.25, 0.25) is None

    @pytest.mark.parametrize("coarse, fine", [(0.0, 1e-3), (1e-3, 0.0), (float("nan"), 1e-3)])
    def test_nonpositive_errors(self, coarse, fine):
        assert calculate_observed_order(coarse, fine, 0.5, 0.25) is None

    def test_table_orders(self):
        rows = [{"h": 0.5, "e": 8.0}, {"h": 0.25, "e": 1.0}, {"h": 0.125, "e": 0.125}]
        orders = calculate_observed_orders(rows, "e")
        assert orders[0] is None
        assert orders[1:] == [pytest.approx(3.0), pytest.approx(3.0)]

    def test_loglog_slope(self):
        x = [1.0, 2.0, 4.0, 8.0]
        assert calculate_loglog_slope(x, [v ** -1.5 for v in x]) == pytest.approx(-1.5)
        assert calculate_loglog_slope([1.0], [1.0]) is None
        assert calculate_loglog_slope([2.0, 2.0], [1.0, 3.0]) is None


class TestCheckOrder:
    def test_within_band(self):
        assert check_order(2.9, 3.0, 0.2)

    def test_below_band(self):
        assert not check_order(2.7, 3.0, 0.2)

    def test_superconvergence_passes_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert check_order(3.6, 3.0, 0.2)
        assert "超収束" in caplog.text

    @pytest.mark.parametrize("observed", [None, float("nan")])
    def test_undefined(self, observed):
        assert not check_order(observed, 3.0, 0.2)


def test_format_order():
    assert format_order(2.0) == "2.000"
    assert format_order(None) == "n/a"
    assert format_order(math.nan) == "n/a"


def test_parse_lists():
    assert parse_float_list("0.5, 1;2") == [0.5, 1.0, 2.0]
    assert parse_float_list("") == []
    assert parse_text_list("structured:8, mesh/a.mesh ,") == ["structured:8", "mesh/a.mesh"]


def test_worker_count(monkeypatch):
    monkeypatch.setattr(Config, "THREADS", 0)
    assert worker_count(5) == 1
    monkeypatch.setattr(Config, "THREADS", 4)
    assert worker_count(3) == 3
    assert worker_count(10) == 4


def test_setup_logging_writes_file(workdir, monkeypatch):
    monkeypatch.setattr(Config, "LOG_FILE", str(workdir / "run.log"))
    setup_logging(quiet=True)
    get_logger("hdivflow.test").warning("ログ出力の確認")
    for handler in logging.getLogger().handlers:
        handler.flush()
    assert "ログ出力の確認" in (workdir / "run.log").read_text(encoding="utf-8")
