import dataclasses
import json

import pytest

from dyncapmoe import analytics as an
from dyncapmoe import cli
from dyncapmoe import harness as hn


@pytest.fixture
def tiny_config_file(tmp_path):
    cfg = hn.gradcheck_default_config()
    cfg = dataclasses.replace(cfg, steps=5, learning_rate=0.02)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_json_dict()))
    return path


@pytest.fixture
def paper_example_spec(tmp_path):
    """Text, then a 120 s clip at 0.5 fps with 3x3 frames, then 120 s audio."""
    spec = {
        "theta": 1,
        "segments": [
            {"kind": "text", "n_tokens": 5},
            {"kind": "video", "duration_s": 120.0, "fps": 0.5,
             "rows": 3, "cols": 3, "f_l": 8, "f_u": 64},
            {"kind": "audio", "duration_s": 120.0},
        ],
    }
    path = tmp_path / "segments.json"
    path.write_text(json.dumps(spec))
    return path


class TestUsageErrors:
    def test_unknown_flag_exits_2(self, capsys):
        assert cli.main(["gradcheck", "--bogus"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_subcommand_exits_2(self, capsys):
        assert cli.main([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand_exits_2(self):
        assert cli.main(["frobnicate"]) == 2

    def test_help_exits_0(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "rope-dump" in capsys.readouterr().out

    def test_missing_required_flag_exits_2(self):
        assert cli.main(["analyze", "--layer", "0", "--out", "x.csv"]) == 2


class TestRopeDump:
    @pytest.mark.parametrize("theta", [1, 2])
    def test_reproduces_worked_triples(self, paper_example_spec, tmp_path, theta):
        out = tmp_path / f"ids_{theta}.jsonl"
        code = cli.main(["rope-dump", "--segments", str(paper_example_spec),
                         "--theta", str(theta), "--out", str(out)])
        assert code == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]
        x, p, per_frame = 5, 2, 9
        video = [r for r in records if r["modality"] == "video"]
        audio = [r for r in records if r["modality"] == "audio"]
        assert len(video) == 60 * per_frame and len(audio) == 800
        assert (video[0]["t"], video[0]["h"], video[0]["w"]) == (x, x, x)
        second = video[per_frame]
        assert (second["t"], second["h"], second["w"]) == (x + 2 * theta, x, x)
        last = video[-1]
        assert (last["t"], last["h"], last["w"]) == (x + 118 * theta, x + p, x + p)
        y = 1 + max(max(r["t"], r["h"], r["w"]) for r in records[:5 + 540])
        assert (audio[0]["t"], audio[0]["h"], audio[0]["w"]) == (y, y, y)
        tail = audio[-1]
        assert (tail["t"], tail["h"], tail["w"]) == (y + 117 * theta,) * 3

    def test_theta_from_spec_file_when_flag_absent(self, tmp_path):
        spec = {"theta": 2, "segments": [{"kind": "audio", "duration_s": 6.0}]}
        path = tmp_path / "seg.json"
        path.write_text(json.dumps(spec))
        out = tmp_path / "ids.jsonl"
        assert cli.main(["rope-dump", "--segments", str(path), "--out", str(out)]) == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert records[-1]["t"] == 6  # second unit at 3*theta with theta=2

    def test_stdout_when_no_out_flag(self, paper_example_spec, capsys):
        assert cli.main(["rope-dump", "--segments", str(paper_example_spec)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 5 + 540 + 800
        assert json.loads(lines[0]) == {"index": 0, "modality": "text",
                                        "t": 0, "h": 0, "w": 0}

    def test_missing_file_exits_1(self, tmp_path, capsys):
        assert cli.main(["rope-dump", "--segments", str(tmp_path / "nope.json")]) == 1
        assert "error" in capsys.readouterr().err

    def test_malformed_spec_exits_1(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"segments": [{"kind": "warp", "n": 1}]}))
        assert cli.main(["rope-dump", "--segments", str(path)]) == 1


class TestGradcheckCommand:
    def test_default_config_passes(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "gradcheck passed" in out and "unbiasedness" in out

    def test_config_file_accepted(self, tiny_config_file):
        assert cli.main(["gradcheck", "--config", str(tiny_config_file)]) == 0

    def test_impossible_tolerance_exits_1(self, capsys):
        assert cli.main(["gradcheck", "--tol", "1e-300"]) == 1
        assert "FAILED" in capsys.readouterr().err

    def test_missing_config_file_exits_1(self, tmp_path):
        assert cli.main(["gradcheck", "--config", str(tmp_path / "no.json")]) == 1


class TestTrainCommand:
    def test_zero_steps_writes_header_only_loss_file(self, tmp_path):
        out = tmp_path / "run"
        code = cli.main(["train", "--steps", "0", "--out", str(out)])
        assert code == 0
        assert (out / "loss.csv").read_text() == "step,loss\n"
        assert (out / "trace.csv").read_text().startswith("step,layer,token_index")

    def test_short_run_writes_curve_and_trace(self, tiny_config_file, tmp_path):
        out = tmp_path / "run"
        code = cli.main(["train", "--config", str(tiny_config_file),
                         "--out", str(out)])
        assert code == 0
        loss_lines = (out / "loss.csv").read_text().splitlines()
        assert loss_lines[0] == "step,loss" and len(loss_lines) == 6
        trace = an.import_trace(out / "trace.csv")
        cfg = hn.ToyModelConfig.from_json_file(tiny_config_file)
        assert len(trace) == 5 * cfg.layers * cfg.batch

    def test_runs_are_byte_identical(self, tiny_config_file, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            assert cli.main(["train", "--config", str(tiny_config_file),
                             "--seed", "11", "--out", str(out)]) == 0
        assert (out1 / "loss.csv").read_bytes() == (out2 / "loss.csv").read_bytes()
        assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()

    def test_seed_changes_the_run(self, tiny_config_file, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        cli.main(["train", "--config", str(tiny_config_file), "--seed", "1",
                  "--out", str(out1)])
        cli.main(["train", "--config", str(tiny_config_file), "--seed", "2",
                  "--out", str(out2)])
        assert (out1 / "loss.csv").read_bytes() != (out2 / "loss.csv").read_bytes()


class TestAnalyzeCommand:
    @pytest.fixture
    def trace_file(self, tiny_config_file, tmp_path):
        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(tiny_config_file),
                         "--out", str(out)]) == 0
        return out / "trace.csv"

    def test_expert_report(self, trace_file, tmp_path):
        out = tmp_path / "report.csv"
        code = cli.main(["analyze", "--trace", str(trace_file), "--layer", "0",
                         "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "group,layer,expert_id,role,proportion"
        props = [float(line.split(",")[-1]) for line in lines[1:]]
        assert abs(sum(props) - 1.0) <= 1e-12

    def test_modality_grouping(self, trace_file, tmp_path):
        out = tmp_path / "by_modality.csv"
        code = cli.main(["analyze", "--trace", str(trace_file), "--layer", "0",
                         "--group-by", "modality", "--out", str(out)])
        assert code == 0
        groups = {line.split(",")[0] for line in out.read_text().splitlines()[1:]}
        assert groups == {"text", "image"}

    def test_count_histogram(self, trace_file, tmp_path):
        out = tmp_path / "hist.csv"
        code = cli.main(["analyze", "--trace", str(trace_file), "--layer", "1",
                         "--group-by", "count", "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "layer,k,fraction"
        fracs = [float(line.split(",")[2]) for line in lines[1:]]
        assert abs(sum(fracs) - 1.0) <= 1e-12

    def test_empty_layer_exits_1(self, trace_file, tmp_path, capsys):
        code = cli.main(["analyze", "--trace", str(trace_file), "--layer", "9",
                         "--out", str(tmp_path / "x.csv")])
        assert code == 1
        assert "error" in capsys.readouterr().err
