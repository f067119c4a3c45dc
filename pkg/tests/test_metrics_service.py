import os
import sys
from unittest.mock import patch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import pytest

from services import metrics_service
from services.metrics_service import (
    CHECK_COUNT,
    EXPERIMENT_COUNT,
    EXPERIMENT_LATENCY,
    _WorkerGauge,
    record_check,
    track_experiment,
)


# --- _WorkerGauge ---


class TestWorkerGauge:
    def setup_method(self):
        self.gauge = _WorkerGauge()

    def test_set(self):
        self.gauge.set(4)
        assert metrics_service._active_workers == 4

    def test_inc_and_dec(self):
        self.gauge.set(2)
        self.gauge.inc()
        self.gauge.inc(3)
        self.gauge.dec(2)
        assert metrics_service._active_workers == 4

    def test_set_overrides_previous(self):
        self.gauge.set(8)
        self.gauge.set(0)
        assert metrics_service._active_workers == 0


# --- _observe_active_workers ---


class TestObserveActiveWorkers:
    def test_yields_current_value(self):
        metrics_service._active_workers = 3
        from services.metrics_service import _observe_active_workers

        observations = list(_observe_active_workers(None))
        assert len(observations) == 1
        assert observations[0].value == 3


# --- track_experiment ---


class TestTrackExperiment:
    def test_records_success(self):
        @track_experiment("perp-moment")
        def run():
            return "ok"

        with patch.object(EXPERIMENT_LATENCY, "record") as mock_latency, \
             patch.object(EXPERIMENT_COUNT, "add") as mock_count:
            result = run()

        assert result == "ok"
        mock_latency.assert_called_once()
        args = mock_latency.call_args
        assert args[0][1] == {"experiment": "perp-moment"}
        assert isinstance(args[0][0], float)
        mock_count.assert_called_once_with(1, {"experiment": "perp-moment", "status": "success"})

    def test_records_error_and_reraises(self):
        @track_experiment("brw-martingale")
        def run():
            raise ValueError("boom")

        with patch.object(EXPERIMENT_LATENCY, "record") as mock_latency, \
             patch.object(EXPERIMENT_COUNT, "add") as mock_count:
            with pytest.raises(ValueError, match="boom"):
                run()

        mock_latency.assert_called_once()
        mock_count.assert_called_once_with(1, {"experiment": "brw-martingale", "status": "error"})

    def test_passes_args_and_preserves_name(self):
        @track_experiment("spine-identity")
        def spine_run(a, key=None):
            return (a, key)

        with patch.object(EXPERIMENT_LATENCY, "record"), patch.object(EXPERIMENT_COUNT, "add"):
            assert spine_run(1, key="v") == (1, "v")
        assert spine_run.__name__ == "spine_run"


# --- record_check ---


class TestRecordCheck:
    def test_outcome_label(self):
        with patch.object(CHECK_COUNT, "add") as mock_count:
            record_check("rvkit", True)
            record_check("brw", False)
        assert mock_count.call_args_list[0][0] == (1, {"suite": "rvkit", "outcome": "pass"})
        assert mock_count.call_args_list[1][0] == (1, {"suite": "brw", "outcome": "fail"})


# --- Instrument definitions ---


class TestInstrumentDefinitions:
    def test_experiment_names(self):
        assert EXPERIMENT_LATENCY.name == "perpetua.experiment.duration"
        assert EXPERIMENT_COUNT.name == "perpetua.experiment.total"

    def test_replicate_and_check_names(self):
        assert metrics_service.REPLICATE_COUNT.name == "perpetua.replicates.total"
        assert CHECK_COUNT.name == "perpetua.check.total"

    def test_worker_gauge_name(self):
        assert metrics_service.ACTIVE_WORKERS_GAUGE.name == "perpetua.workers.active"
