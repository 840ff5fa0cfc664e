import json

import pytest

from enat.cli import SUBCOMMANDS, build_parser, run
from enat.config import ConfigError, RunConfig, read_config_file, render, resolve

SMALL = ["--layers", "1", "--d-model", "16", "--heads", "2", "--d-ff", "32"]


def record(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


@pytest.fixture
def toy_dir(tmp_path):
    out = tmp_path / "toy"
    assert run(["gen-toy", "--pairs", "300", "--valid-pairs", "20", "--test-pairs", "30", "--max-len", "6",
                "--seed", "7", "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_every_field_documented(self):
        docs = RunConfig.docs()
        assert all(docs.values()) and set(docs) == {f for f in RunConfig.__dataclass_fields__}

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nmu = 0.5\nlam = 2\nseed = 3\n")
        cfg = resolve(path, {"mu": 0.7})
        assert (cfg.mu, cfg.lam, cfg.seed, cfg.tau) == (0.7, 2.0, 3, 0.3)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("mu = 0.5\nbogus = 1\n")
        with pytest.raises(ConfigError, match=r"run\.cfg:2: unknown configuration key 'bogus'"):
            read_config_file(path)

    def test_render_round_trip(self, tmp_path):
        cfg = RunConfig(mu=0.25, swap=False, decoder_input="embed", out="x")
        path = tmp_path / "run.cfg"
        path.write_text(render(cfg))
        assert resolve(path, {}) == cfg

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        path = tmp_path / "run.cfg"
        path.write_text("nonsense = 1\n")
        assert run(["gen-toy", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


class TestParser:
    def test_subcommands(self):
        assert set(SUBCOMMANDS) == {"gen-toy", "build-table", "lookup", "extract-word-table", "train-teacher",
                                    "distill", "train-nat", "translate", "eval", "latency"}

    def test_spec_flags(self):
        args = build_parser().parse_args(["train-nat", "--decoder-input", "embed", "--mu", "0.2", "--lambda", "0.5",
                                          "--tau", "0.4", "--alpha", "1.1", "--window-B", "4", "--beam", "3",
                                          "--seed", "9"])
        assert (args.decoder_input, args.mu, args.lam, args.tau, args.alpha, args.window_B, args.beam,
                args.seed) == ("embed", 0.2, 0.5, 0.4, 1.1, 4, 3, 9)

    def test_bad_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run(["gen-toy", "--no-such-flag"])
        assert exc.value.code == 2

    def test_bad_value_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run(["gen-toy", "--pairs", "many"])
        assert exc.value.code == 2

    def test_missing_required_exits_2(self, capsys):
        assert run(["lookup", "--input", "x.txt"]) == 2
        assert "--table" in capsys.readouterr().err

    def test_pipeline_failure_exits_1(self, tmp_path, capsys):
        assert run(["build-table", "--corpus", str(tmp_path / "absent.tsv"), "--out", str(tmp_path / "t")]) == 1


class TestGenToy:
    def test_same_bytes_per_seed(self, tmp_path):
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        for d, seed in ((a, "7"), (b, "7"), (c, "8")):
            assert run(["gen-toy", "--pairs", "50", "--seed", seed, "--out", str(d)]) == 0
        for name in ("train.tsv", "valid.tsv", "test.tsv", "lexicon.tsv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        assert (a / "train.tsv").read_bytes() != (c / "train.tsv").read_bytes()

    def test_counts(self, toy_dir):
        assert len((toy_dir / "train.tsv").read_text().splitlines()) == 300
        assert len((toy_dir / "test.tsv").read_text().splitlines()) == 30


class TestTables:
    def test_lookup_line_aligned(self, toy_dir, tmp_path, capsys):
        table = tmp_path / "t.tsv"
        assert run(["build-table", "--corpus", str(toy_dir / "train.tsv"), "--out", str(table)]) == 0
        src = tmp_path / "src.txt"
        lines = [line.split("\t")[0] for line in (toy_dir / "test.tsv").read_text().splitlines()]
        src.write_text("\n".join(lines + ["unknownword", ""]) + "\n")
        capsys.readouterr()
        assert run(["lookup", "--table", str(table), "--input", str(src)]) == 0
        out = capsys.readouterr().out.split("\n")[:-1]
        assert len(out) == len(lines) + 2 and out[-2:] == ["", ""]
        assert run(["lookup", "--table", str(table), "--input", str(src), "--out", str(tmp_path / "o.txt")]) == 0
        assert (tmp_path / "o.txt").read_text().split("\n")[:-1] == out

    def test_word_table_and_idempotence(self, toy_dir, tmp_path):
        for name in ("t1", "t2"):
            assert run(["build-table", "--corpus", str(toy_dir / "train.tsv"), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "t1").read_bytes() == (tmp_path / "t2").read_bytes()
        assert run(["extract-word-table", "--table", str(tmp_path / "t1"), "--out", str(tmp_path / "w")]) == 0
        assert all(len(line.split("\t")[0].split()) == 1 for line in (tmp_path / "w").read_text().splitlines())

    def test_moses_input(self, tmp_path, capsys):
        pt = tmp_path / "pt.txt"
        pt.write_text("a b ||| X Y ||| 0.5 0.2 0.7 0.1 2.718\nc ||| Z ||| 1 1 1 1 1\n")
        src = tmp_path / "src.txt"
        src.write_text("a b c\n")
        assert run(["lookup", "--table", str(pt), "--moses", "--input", str(src)]) == 0
        assert capsys.readouterr().out == "X Y Z\n"


class TestPipeline:
    def test_end_to_end(self, toy_dir, tmp_path, capsys):
        w = tmp_path
        teacher, student = str(w / "teacher.npz"), str(w / "student.npz")
        steps = [
            ["train-teacher", "--train", str(toy_dir / "train.tsv"), "--valid", str(toy_dir / "valid.tsv"),
             "--epochs", "2", "--out", teacher, "--loss-log", str(w / "teacher.jsonl"), *SMALL],
            ["distill", "--teacher", teacher, "--corpus", str(toy_dir / "train.tsv"), "--out", str(w / "kd.tsv")],
            ["build-table", "--corpus", str(w / "kd.tsv"), "--out", str(w / "table.tsv")],
            ["train-nat", "--train", str(w / "kd.tsv"), "--valid", str(toy_dir / "valid.tsv"), "--teacher", teacher,
             "--decoder-input", "phrase", "--table", str(w / "table.tsv"), "--epochs", "1", "--out", student,
             "--report-dir", str(w / "report"), *SMALL],
            ["eval", "--student", student, "--teacher", teacher, "--table", str(w / "table.tsv"),
             "--test", str(toy_dir / "test.tsv"), "--window-B", "4", "--report-dir", str(w / "report")],
        ]
        for argv in steps:
            assert run(argv) == 0, argv
        summary = record(capsys)
        assert summary["system"] == "nat-phrase-B4" and 0 <= summary["bleu"] <= 100
        assert sum(r["count"] for r in summary["buckets"]) == 30
        for name in ("losses.png", "buckets.png", "eval.json"):
            assert (w / "report" / name).stat().st_size > 0
        losses = [json.loads(line) for line in (w / "student.losses.jsonl").read_text().splitlines()]
        assert {"step", "l_neg", "l_align", "l_adv", "v_word", "total"} <= set(losses[0])

        src = w / "src.txt"
        src.write_text("".join(line.split("\t")[0] + "\n" for line in (toy_dir / "test.tsv").read_text().splitlines()))
        assert run(["translate", "--student", student, "--table", str(w / "table.tsv"), "--input", str(src),
                    "--out", str(w / "hyp.txt")]) == 0
        assert len((w / "hyp.txt").read_text().splitlines()) == 30

        assert run(["latency", "--student", student, "--teacher", teacher, "--table", str(w / "table.tsv"),
                    "--test", str(toy_dir / "test.tsv"), "--latency-sentences", "10",
                    "--report-dir", str(w / "report")]) == 0
        modes = {m["mode"]: m for m in record(capsys)["modes"]}
        assert set(modes) == {"at-greedy", "nat-b0", "nat-b4"} and modes["nat-b0"]["mean_passes"] == 1.0
        assert (w / "report" / "latency.png").stat().st_size > 0

    def test_rescoring_without_teacher_exits_2(self, toy_dir, tmp_path):
        student = str(tmp_path / "s.npz")
        assert run(["train-nat", "--train", str(toy_dir / "train.tsv"), "--epochs", "1", "--out", student,
                    *SMALL]) == 0
        assert run(["eval", "--student", student, "--test", str(toy_dir / "test.tsv"), "--window-B", "2"]) == 2

    def test_wrong_checkpoint_kind_exits_1(self, toy_dir, tmp_path):
        student = str(tmp_path / "s.npz")
        assert run(["train-nat", "--train", str(toy_dir / "train.tsv"), "--epochs", "1", "--out", student,
                    "--decoder-input", "embed", *SMALL]) == 0
        assert run(["distill", "--teacher", student, "--corpus", str(toy_dir / "train.tsv"),
                    "--out", str(tmp_path / "kd.tsv")]) == 1
