import json

import numpy as np
import pytest

from moeforge.clustering import GroupAssignment
from moeforge.compression import build_grouped_params
from moeforge.expert_bank import init_bank
from moeforge.memory_manager import (
    GroupStore,
    MemoryConfig,
    MemoryLedger,
    group_payload,
    load_trace,
    peak_memory,
    run_trace,
    tick,
)
from moeforge.numerics import NumericsError


def check_invariants(led):
    assert not (led.resident & led.offloaded)
    assert led.resident | led.offloaded == set(range(led.groups))
    assert led.peak_resident_bytes >= led.resident_bytes()
    assert led.resident_bytes() + led.offloaded_bytes() == sum(led.bytes_of_group)


class TestTick:
    def test_always_active_never_offloaded(self):
        led = run_trace([5, 5], [[0, 1]] * 50, MemoryConfig(s_idle=2))
        assert led.resident == {0, 1} and led.bytes_offloaded == 0

    def test_offloaded_on_step_s_idle(self):
        cfg = MemoryConfig(s_idle=3, lookahead_l=0)
        led = MemoryLedger.all_resident([4, 4])
        for step in (1, 2):
            tick(led, [0], cfg)
            assert 1 in led.resident, step
        tick(led, [0], cfg)
        assert led.offloaded == {1} and led.idle_steps.tolist() == [0, 3]

    def test_ema_update(self):
        cfg = MemoryConfig(ema_rate=0.25)
        led = MemoryLedger.all_resident([1, 1])
        tick(led, [0], cfg)
        tick(led, [0], cfg)
        assert led.activity_score[0] == pytest.approx(0.75 * 0.25 + 0.25, abs=1e-15)
        assert led.activity_score[1] == 0.0

    def test_hand_simulated_period_four(self):
        # groups 0..3 activated in turn, s_idle 2, L 1, eta 0.5
        cfg = MemoryConfig(s_idle=2, ema_rate=0.5, lookahead_l=1, prefetch_min_score=0.05)
        led = MemoryLedger.all_resident([10, 20, 30, 40])
        expected = [
            # (resident after tick, hits, misses)
            ({0, 1, 2, 3}, 0, 0),
            ({0, 1}, 0, 0),  # 2 and 3 idle for 2 steps
            ({1, 2}, 0, 1),  # 2 loaded on demand, 0 evicted; 3 has score 0
            ({0, 2, 3}, 0, 2),  # 3 on demand, 1 evicted, 0 prefetched (score 1/16)
            ({0, 1, 3}, 1, 2),  # 0 was prefetched: hit; 2 evicted, 1 prefetched
            ({0, 1, 2}, 2, 2),
        ]
        for step, (activated, (res, hits, misses)) in enumerate(zip([[0], [1], [2], [3], [0], [1]], expected), 1):
            tick(led, activated, cfg)
            check_invariants(led)
            assert (led.resident, led.prefetch_hits, led.prefetch_misses) == (res, hits, misses), step
        assert led.activity_score.tolist() == [0.53125 / 2, 0.5 + 0.0625 / 2, 0.125 / 2, 0.25 / 2]
        assert led.peak_resident_bytes == 100

    def test_out_of_range(self):
        with pytest.raises(NumericsError):
            tick(MemoryLedger.all_resident([1]), [3])

    @pytest.mark.parametrize("kw", [{"s_idle": 0}, {"ema_rate": 0.0}, {"ema_rate": 1.5}, {"lookahead_l": -1}])
    def test_config_validation(self, kw):
        with pytest.raises(NumericsError):
            MemoryConfig(**kw)


class TestPeak:
    def test_all_resident(self):
        led = run_trace([3, 4, 5], [[0, 1, 2]] * 10)
        assert peak_memory(led) == 12

    def test_steady_state_one_group(self):
        led = run_trace([3, 9, 5], [[1]] * 20, MemoryConfig(s_idle=2, lookahead_l=0))
        assert led.resident == {1} and led.resident_bytes() == 9
        assert peak_memory(led) == 17


@pytest.mark.parametrize("seed", range(10))
def test_invariants_random_traces(seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 100, size=6).tolist()
    cfg = MemoryConfig(s_idle=int(rng.integers(1, 5)), lookahead_l=int(rng.integers(0, 4)))
    led = MemoryLedger.all_resident(sizes)
    trace = [rng.choice(6, size=int(rng.integers(0, 3)), replace=False).tolist() for _ in range(200)]
    for act in trace:
        tick(led, act, cfg)
        check_invariants(led)
        assert 0.0 <= led.hit_rate <= 1.0
    again = run_trace(sizes, trace, cfg)
    assert again.to_dict() == led.to_dict()


@pytest.mark.parametrize("period", [2, 3, 4, 5])
def test_hit_rate_nondecreasing_in_lookahead(period):
    trace = [[t % period] for t in range(300)]
    rates = []
    for l in range(period - 1, period + 3):
        led = run_trace([1] * period, trace, MemoryConfig(s_idle=1, ema_rate=0.3, lookahead_l=l))
        rates.append(led.hit_rate)
    assert all(b >= a for a, b in zip(rates, rates[1:]))
    if period >= 3:
        # a group evicted this tick is not prefetched in the same tick, so period 2 always misses
        assert rates[-1] > 0


class TestStore:
    def test_offload_round_trips_through_files(self, tmp_path):
        bank = init_bank(4, 6, 5, 0)
        gp = build_grouped_params(bank, GroupAssignment.contiguous(4, 2), 2)
        payloads = [group_payload(gp, g) for g in range(2)]
        store = GroupStore(tmp_path / "nvme", payloads)
        led = MemoryLedger.all_resident([len(p) for p in payloads], store)
        for act in [[0], [0], [0], [1], [1]]:
            tick(led, act, MemoryConfig(s_idle=2, lookahead_l=0))
        assert store.writes >= 1 and store.reads >= 1
        assert (tmp_path / "nvme" / "group_0001.bin").read_bytes() == payloads[1]
        assert len(payloads[0]) == 2 * 30 + 13 + (2 * 2 * 11 + 1) // 2

    def test_corruption_detected(self, tmp_path):
        store = GroupStore(tmp_path, [b"abc"])
        store.write(0)
        (tmp_path / "group_0000.bin").write_bytes(b"abd")
        with pytest.raises(NumericsError):
            store.read(0)


class TestTraceFile:
    def test_both_forms(self, tmp_path):
        p = tmp_path / "t.jsonl"
        p.write_text(json.dumps({"groups": [1, 2]}) + "\n\n" + json.dumps([0]) + "\n")
        assert load_trace(p) == [[1, 2], [0]]

    @pytest.mark.parametrize("line", ["{", '{"groups": 3}', "7"])
    def test_malformed(self, tmp_path, line):
        p = tmp_path / "t.jsonl"
        p.write_text(line + "\n")
        with pytest.raises(NumericsError):
            load_trace(p)
