import json
import math
from pathlib import Path

import numpy as np
import pytest

from kvcompact.attention import aggregate_gqa, causal_scores, critical_token_count
from kvcompact.cli.config import parse_config
from kvcompact.cli.main import EXIT_CONFIG, EXIT_OK, EXIT_OOM, EXIT_TRACE, main
from kvcompact.cli.report import Report, parse_report, render_csv, render_json
from kvcompact.cli.trace import read_trace, write_trace
from kvcompact.cli.workload import WorkloadShape, example_workload, generate
from kvcompact.errors import ConfigError, SchemaVersionError, TraceError

FIXTURES = Path(__file__).parent / "fixtures"

SMALL_CONFIG = """\
# tiny synthetic setup
num_requests = 3
arrival_rate = 1.0
prompt_len_min = 12
prompt_len_max = 16
gen_len_min = 4
gen_len_max = 6
layers = 1
kv_heads = 2
head_dim = 16
page_bytes = 256
window = 4
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def gen(tmp_path, config_text=SMALL_CONFIG, seed=1, sub="wl"):
    cfg = write(tmp_path, f"{sub}.conf", config_text)
    assert main(["gen-workload", "--config", str(cfg), "--seed", str(seed), "--out", str(tmp_path / sub)]) == EXIT_OK
    return cfg, tmp_path / sub / "trace.jsonl"


def last_row_critical(wl):
    counts = []
    for r in wl.requests:
        n = r.prompt_len
        for h in range(wl.shape.heads):
            s = aggregate_gqa([causal_scores(r.queries[h, g, :n].astype(float), r.keys[h, :n].astype(float))
                               for g in range(wl.shape.queries_per_kv)])
            counts.append(critical_token_count(s[-1], 0.95))
    return counts


class TestWorkload:
    def test_same_seed_same_bytes(self, tmp_path):
        _, a = gen(tmp_path, sub="a")
        _, b = gen(tmp_path, sub="b")
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_differs(self, tmp_path):
        _, a = gen(tmp_path, seed=1, sub="a")
        _, b = gen(tmp_path, seed=2, sub="b")
        assert a.read_bytes() != b.read_bytes()

    def test_zipf_zero_is_uniform(self):
        wl = generate(3, WorkloadShape(1, 2, 2, 16), 3, (10, 40), (0, 0), zipf=(0.0, 0.0))
        for r in wl.requests:
            for h in range(2):
                s = causal_scores(r.queries[h, 0, : r.prompt_len].astype(float), r.keys[h, : r.prompt_len].astype(float))
                assert np.allclose(s[-1], 1.0 / r.prompt_len, rtol=1e-12)
        assert last_row_critical(wl) == [math.ceil(0.95 * r.prompt_len) for r in wl.requests for _ in range(2)]

    def test_steeper_zipf_concentrates_attention(self):
        shape = WorkloadShape(1, 2, 2, 16)
        flat = last_row_critical(generate(4, shape, 6, (60, 80), (0, 0), zipf=(0.0, 0.0)))
        steep = last_row_critical(generate(4, shape, 6, (60, 80), (0, 0), zipf=(2.0, 2.0)))
        assert np.median(steep) < np.median(flat)

    def test_heads_get_different_exponents(self):
        wl = generate(0, WorkloadShape(2, 4, 1, 8), 1, (5, 5), (0, 0))
        assert len(np.unique(wl.zipf)) == 8

    def test_trace_round_trip(self, tmp_path):
        wl = generate(5, WorkloadShape(1, 2, 2, 8), 2, (4, 6), (1, 3))
        write_trace(wl, tmp_path / "t.jsonl")
        back = read_trace(tmp_path / "t.jsonl")
        for a, b in zip(wl.requests, back.requests):
            assert (a.request_id, a.arrival, a.prompt_len) == (b.request_id, b.arrival, b.prompt_len)
            for x, y in ((a.queries, b.queries), (a.keys, b.keys), (a.values, b.values)):
                assert np.array_equal(x, y)

    def test_example_trace_keeps_forced_classes(self, tmp_path):
        write_trace(example_workload(), tmp_path / "f.jsonl")
        back = read_trace(tmp_path / "f.jsonl")
        assert [c.value for c in back.requests[0].forced[1]] == ["high", "high", "low", "low", "pruned"]


class TestTraceErrors:
    def _trace(self, tmp_path):
        wl = generate(5, WorkloadShape(1, 1, 1, 4), 1, (3, 3), (2, 2))
        p = tmp_path / "t.jsonl"
        write_trace(wl, p)
        return p, p.read_text().splitlines()

    def _expect(self, p, lines, line):
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(TraceError) as exc:
            read_trace(p)
        assert exc.value.line == line
        assert str(exc.value).startswith(f"line {line}:")

    def test_bad_json(self, tmp_path):
        p, lines = self._trace(tmp_path)
        lines[2] = lines[2][:-5]
        self._expect(p, lines, 3)

    def test_step_gap(self, tmp_path):
        p, lines = self._trace(tmp_path)
        del lines[2]
        self._expect(p, lines, 3)

    def test_wrong_shape(self, tmp_path):
        p, lines = self._trace(tmp_path)
        rec = json.loads(lines[1])
        rec["keys"] = [[0.0, 1.0]]
        lines[1] = json.dumps(rec)
        self._expect(p, lines, 2)

    def test_non_finite_inline(self, tmp_path):
        p, lines = self._trace(tmp_path)
        rec = json.loads(lines[3])
        rec["keys"] = [1.0, 2.0, float("nan"), 0.0]
        lines[3] = json.dumps(rec)
        self._expect(p, lines, 4)

    def test_missing_records(self, tmp_path):
        p, lines = self._trace(tmp_path)
        self._expect(p, lines[:-1], len(lines) - 1)

    def test_bad_header(self, tmp_path):
        p, lines = self._trace(tmp_path)
        self._expect(p, ['{"type": "header", "format": "other"}'] + lines[1:], 1)

    def test_exit_code_and_message(self, tmp_path, capsys):
        p, lines = self._trace(tmp_path)
        lines[2] = "{"
        p.write_text("\n".join(lines))
        assert main(["run", "--trace", str(p), "--out", str(tmp_path / "o")]) == EXIT_TRACE
        assert "line 3" in capsys.readouterr().err


class TestConfig:
    def test_parse(self):
        cfg = parse_config("seed = 7\nalpha_h = 2.5  # comment\nlow_precision_enabled = no\n")
        assert (cfg.seed, cfg.alpha_h, cfg.low_precision_enabled) == (7, 2.5, False)

    def test_preset_with_override(self):
        cfg = parse_config("preset = qwen2.5-7b\nalpha_l = 0.01\n")
        p = cfg.policy()
        assert (p.alpha_h, p.alpha_l, p.low_precision_enabled) == (1.0, 0.01, False)

    @pytest.mark.parametrize("text", ["bogus = 1", "seed = x", "seed 1", "seed = 1\nseed = 2", "window = 0",
                                      "alpha_h = 0.01\nalpha_l = 0.5", "preset = gpt", "high = K3V2",
                                      "page_bytes = 8"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_exit_code(self, tmp_path):
        cfg = write(tmp_path, "bad.conf", "arrival_rate = -1\n")
        assert main(["gen-workload", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert main(["gen-workload", "--config", str(tmp_path / "missing.conf"), "--out", str(tmp_path)]) == EXIT_CONFIG
        assert main(["gen-workload", "--threads", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


class TestRun:
    def test_zero_thresholds_prune_nothing(self, tmp_path):
        cfg, trace = gen(tmp_path, SMALL_CONFIG + "alpha_h = 0\nalpha_l = 0\n")
        assert main(["run", "--config", str(cfg), "--trace", str(trace), "--out", str(tmp_path / "r")]) == EXIT_OK
        rep = json.loads((tmp_path / "r" / "run.json").read_text())
        assert rep["breakdown"]["pruned"] == 0.0
        assert math.isclose(sum(rep["breakdown"].values()), 1.0, abs_tol=1e-9)
        assert 0 < rep["memory_fraction"]["payload"] <= 1

    def test_example_scenario(self, tmp_path):
        cfg, trace = gen(tmp_path, "scenario = example\n")
        assert main(["run", "--config", str(cfg), "--trace", str(trace), "--out", str(tmp_path / "r")]) == EXIT_OK
        rep = json.loads((tmp_path / "r" / "run.json").read_text())
        assert rep["memory_fraction"]["payload_exact"] == "33/160"
        assert rep["memory_fraction"]["payload"] == 0.20625
        assert rep["simulation"]["key_fraction"] == 0.275 and rep["simulation"]["value_fraction"] == 0.1375

    def test_thread_count_does_not_change_bytes(self, tmp_path):
        cfg, trace = gen(tmp_path)
        outs = []
        for threads in (1, 3):
            out = tmp_path / f"t{threads}"
            assert main(["run", "--config", str(cfg), "--trace", str(trace), "--threads", str(threads),
                         "--out", str(out)]) == EXIT_OK
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert outs[0] == outs[1]
        assert set(outs[0]) == {"run.json", "run_steps.csv"}

    def test_out_of_memory(self, tmp_path, capsys):
        cfg, trace = gen(tmp_path, SMALL_CONFIG + "total_pages = 3\n")
        assert main(["run", "--config", str(cfg), "--trace", str(trace), "--out", str(tmp_path / "r")]) == EXIT_OOM
        assert "out of memory" in capsys.readouterr().err

    def test_head_dim_conflict(self, tmp_path):
        cfg, trace = gen(tmp_path)
        bad = write(tmp_path, "other.conf", "head_dim = 32\n")
        assert main(["run", "--config", str(bad), "--trace", str(trace), "--out", str(tmp_path)]) == EXIT_CONFIG


class TestReport:
    def test_round_trip(self):
        rep = Report("run", config={"seed": 1}, memory_fraction={"payload": 0.25}, batch_size=[1, 2],
                     bytes_touched=[10, 20], quality_error=0.5)
        assert parse_report(render_json(rep)) == rep

    def test_empty_sections_present(self):
        d = json.loads(render_json(Report("calibrate")))
        assert d["points"] == [] and d["frontier"] == [] and d["breakdown"] == {} and d["batch_size"] == []
        assert list(d)[:2] == ["schema_version", "kind"]
        assert render_csv(Report("calibrate"))["points"] == "alpha_h,alpha_l,memory_fraction,quality_error\n"

    def test_old_schema_fixture(self):
        with pytest.raises(SchemaVersionError):
            parse_report((FIXTURES / "report_v0.json").read_text())

    def test_old_schema_exit_code(self, tmp_path):
        assert main(["report", "--input", str(FIXTURES / "report_v0.json"), "--out", str(tmp_path)]) == EXIT_TRACE

    def test_rerender(self, tmp_path):
        cfg, trace = gen(tmp_path)
        main(["run", "--config", str(cfg), "--trace", str(trace), "--out", str(tmp_path / "r")])
        src = tmp_path / "r" / "run.json"
        assert main(["report", "--input", str(src), "--out", str(tmp_path / "again")]) == EXIT_OK
        assert (tmp_path / "again" / "run.json").read_bytes() == src.read_bytes()
        assert (tmp_path / "again" / "run_steps.csv").read_bytes() == (tmp_path / "r" / "run_steps.csv").read_bytes()

    def test_malformed(self, tmp_path):
        p = write(tmp_path, "x.json", '{"schema_version": 1, "kind": "run"}')
        assert main(["report", "--input", str(p), "--out", str(tmp_path)]) == EXIT_TRACE


class TestCalibrateCommand:
    def test_grid_and_frontier(self, tmp_path):
        cfg, trace = gen(tmp_path)
        assert main(["calibrate", "--config", str(cfg), "--trace", str(trace), "--alpha-h", "0,1,3",
                     "--alpha-l", "0,0.05", "--out", str(tmp_path / "c")]) == EXIT_OK
        rep = json.loads((tmp_path / "c" / "calibrate.json").read_text())
        assert len(rep["points"]) == 5  # (0, 0.05) is skipped
        assert rep["frontier"] and all(p in rep["points"] for p in rep["frontier"])

    def test_bad_grid(self, tmp_path):
        assert main(["calibrate", "--alpha-h", "1,x", "--out", str(tmp_path)]) == EXIT_CONFIG
