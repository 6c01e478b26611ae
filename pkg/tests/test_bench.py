"""Bench harness: leg decomposition, derived delays, scale runs, comparisons."""

import json

import pytest

from eaas.bench import (
    CompareReport,
    SCALE_LINK_MS,
    REFERENCE_OVERHEADS,
    derive_link_delays,
    latency_compare,
    measure_overheads,
    scalability_run,
)
from eaas.errors import (
    ConfigError,
    EnvironmentUnstable,
    InsufficientTrials,
    LaunchFailure,
    Overload,
)
from eaas.protocol import Action, ContainerState, Outcome, ServiceResponse
from eaas.runtime import MockScript, RuntimeDelays

ZERO_LINKS = {action: (0.0, 0.0) for action in Action}


class TestDeriveLinkDelays:
    # frozen from the closed-form solution: total = op / (1 - overall/100)
    EXPECTED = {
        Action.LAUNCH: (315.62, 3132.84),
        Action.START: (2.42, 36.76),
        Action.STOP: (3.19, 48.25),
        Action.TERMINATE: (2.82, 45.11),
    }

    def test_matches_hand_computed_values(self):
        derived = derive_link_delays(RuntimeDelays())
        for action, (fe, me) in self.EXPECTED.items():
            assert derived[action][0] == pytest.approx(fe, abs=0.01)
            assert derived[action][1] == pytest.approx(me, abs=0.01)

    def test_back_substitution_reproduces_targets_exactly(self):
        delays = RuntimeDelays()
        derived = derive_link_delays(delays)
        for action, (fe_t, me_t) in REFERENCE_OVERHEADS.items():
            fe, me = derived[action]
            total = delays.for_op(action.value) + fe + me
            assert 100 * fe / total == pytest.approx(fe_t, abs=1e-9)
            assert 100 * me / total == pytest.approx(me_t, abs=1e-9)

    def test_scales_with_delay_profile(self):
        full = derive_link_delays(RuntimeDelays())
        fast = derive_link_delays(RuntimeDelays.fast())
        for action in Action:
            assert fast[action][1] == pytest.approx(full[action][1] / 100, rel=0.01)


@pytest.fixture(scope="module")
def fast_report():
    return measure_overheads(5, RuntimeDelays.fast(), transport="local")


class TestMeasureOverheads:
    def test_insufficient_trials(self):
        with pytest.raises(InsufficientTrials):
            measure_overheads(4, RuntimeDelays.fast())

    def test_fast_profile_reproduces_targets_loosely(self, fast_report):
        for action, (fe_t, me_t) in REFERENCE_OVERHEADS.items():
            o = fast_report.overheads[action]
            assert o.fe_master_pct == pytest.approx(fe_t, abs=1.0)
            assert o.master_edge_pct == pytest.approx(me_t, abs=1.0)
            assert o.overall_pct == pytest.approx(fe_t + me_t, abs=1.0)

    def test_overall_is_sum_of_legs_by_construction(self, fast_report):
        for o in fast_report.overheads.values():
            assert o.overall_pct == pytest.approx(o.fe_master_pct + o.master_edge_pct, abs=1e-9)

    def test_per_trial_decomposition_closure(self, fast_report):
        for _action, fe, me, op, total in fast_report.rows:
            assert fe + me + op == pytest.approx(total, abs=2.0)
            assert min(fe, me, op) >= 0.0

    def test_keygen_cost_puts_launch_on_top(self):
        report = measure_overheads(
            5, RuntimeDelays.fast(), link_delays=ZERO_LINKS, transport="local", keygen_ms=100.0
        )
        launch = report.overheads[Action.LAUNCH].overall_pct
        for action in (Action.START, Action.STOP, Action.TERMINATE):
            assert launch > report.overheads[action].overall_pct

    def test_zero_injected_delay_leaves_negligible_overhead(self):
        report = measure_overheads(
            5, RuntimeDelays.fast(), link_delays=ZERO_LINKS, transport="local"
        )
        # numerator is just the real in-process loop cost against a 550 ms op
        assert report.overheads[Action.LAUNCH].overall_pct < 1.0

    def test_injected_master_edge_delay_raises_its_percentage(self):
        low = measure_overheads(
            5, RuntimeDelays.fast(),
            link_delays={a: (0.0, 2.0) for a in Action}, transport="local",
        )
        high = measure_overheads(
            5, RuntimeDelays.fast(),
            link_delays={a: (0.0, 8.0) for a in Action}, transport="local",
        )
        for action in Action:
            assert (
                high.overheads[action].master_edge_pct
                > low.overheads[action].master_edge_pct
            )

    def test_unstable_environment_detected(self):
        class JitterStack:
            node_id = "fake"
            totals = iter([10.0, 400.0, 10.0, 400.0, 10.0] * 4)

            def submit(self, req):
                total = next(self.totals)
                response = ServiceResponse(
                    request_id=req.request_id,
                    outcome=Outcome.OK,
                    new_state=ContainerState.RUNNING,
                    op_start_ms=1.0,
                    op_end_ms=1.0,
                    fwd_ms=0.5,
                    recv_ms=1.5,
                )
                return response, 0.0, total

        with pytest.raises(EnvironmentUnstable):
            measure_overheads(5, RuntimeDelays.zero(), stack=JitterStack())

    def test_data_rows_format(self, fast_report):
        rows = fast_report.data_rows()
        assert rows[0] == "action,feMs,masterEdgeMs,edgeOpMs,totalMs"
        assert len(rows) == 1 + 5 * 4
        assert rows[1].split(",")[0] == "launch"


class TestScalabilityRun:
    def test_single_container_trivially_passes(self):
        report = scalability_run(1, RuntimeDelays.zero(), transport="local")
        assert report.passed
        assert report.running_records == 1
        assert report.live_handles_after_terminate == 0

    def test_eight_containers_stable_overhead(self):
        report = scalability_run(8, RuntimeDelays.fast(), transport="local")
        assert report.passed
        assert report.running_records == 8
        assert report.max_overhead_ms <= 2 * report.median_overhead_ms
        assert report.live_handles_after_terminate == 0
        assert [row.index for row in report.rows] == list(range(1, 9))

    def test_fault_injection_names_failing_container(self):
        script = MockScript.parse("fail launch scale-3")
        with pytest.raises(LaunchFailure) as err:
            scalability_run(5, RuntimeDelays.zero(), transport="local", script=script)
        assert err.value.index == 3
        assert err.value.container_id == "scale-3"
        assert "3" in str(err.value)

    def test_rejects_out_of_range_n(self):
        with pytest.raises(ConfigError):
            scalability_run(51, RuntimeDelays.zero())
        with pytest.raises(ConfigError):
            scalability_run(0, RuntimeDelays.zero())

    def test_default_link_delays_model_the_lan(self):
        assert SCALE_LINK_MS[1] > 0


class TestLatencyCompare:
    def run(self, **overrides) -> CompareReport:
        params = dict(n_users=64, cloud_rtt_ms=100.0, edge_rtt_ms=10.0,
                      horizon_s=300.0, req_rate_per_user=1.0,
                      sync_period_s=30.0, seed=0)
        params.update(overrides)
        return latency_compare(**params)

    def test_matches_analytic_expectation(self):
        report = self.run()
        # closed form: latency is RTT plus mean service time (1.0 ms), queueing
        # negligible at 6% utilisation
        expected = 100.0 * (1.0 - (10.0 + 1.0) / (100.0 + 1.0))
        assert report.latency_reduction_pct == pytest.approx(expected, abs=5.0)
        assert report.traffic.reduction_pct >= 90.0

    def test_symmetric_rtts_give_no_reduction(self):
        report = self.run(edge_rtt_ms=100.0)
        assert report.latency_reduction_pct == pytest.approx(0.0, abs=5.0)

    def test_traffic_counters_are_analytic(self):
        report = self.run()
        per_request = 256 + 512
        assert report.traffic.bytes_device_cloud_baseline == report.requests * per_request
        assert report.traffic.bytes_device_edge == report.requests * per_request
        syncs = int(300.0 // 30.0)
        assert report.traffic.bytes_edge_cloud == syncs * (1024 + 64 * 64)

    def test_doubling_users_doubles_device_edge_bytes(self):
        small = self.run(n_users=64)
        large = self.run(n_users=128)
        ratio = large.traffic.bytes_device_edge / small.traffic.bytes_device_edge
        assert ratio == pytest.approx(2.0, rel=0.10)

    def test_seed_determinism_byte_identical(self):
        doc_a = json.dumps(self.run(seed=42).to_doc(), sort_keys=True)
        doc_b = json.dumps(self.run(seed=42).to_doc(), sort_keys=True)
        assert doc_a == doc_b

    def test_different_seed_changes_stream(self):
        assert self.run(seed=1).mean_latency_cloud_ms != self.run(seed=2).mean_latency_cloud_ms

    def test_overload_detection(self):
        with pytest.raises(Overload):
            self.run(n_users=4096, req_rate_per_user=50.0, horizon_s=10.0)

    def test_user_pool_bounded(self):
        with pytest.raises(ConfigError):
            self.run(n_users=5000)

    def test_identical_streams_across_topologies(self):
        report = self.run()
        # same request count on both links proves one stream drove both runs
        assert (report.traffic.bytes_device_edge
                == report.traffic.bytes_device_cloud_baseline)
