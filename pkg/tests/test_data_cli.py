import json

import pytest

from deformer.cli import main, read_config_file, resolve_config, build_parser
from deformer.data import (Example, SyntheticTaskSpec, check_example, gen_data, generate,
                           read_jsonl)
from deformer.errors import ConfigurationError
from deformer.evaluation import retention, score_spans, span_f1

TINY = ["--n-train", "60", "--n-dev", "20", "--n-layers", "2", "--hidden-dim", "8",
        "--n-heads", "2", "--ffn-dim", "16", "--k", "1", "--teacher-steps", "4",
        "--finetune-steps", "4", "--batch-size", "4", "--eval-every", "2",
        "--analysis-passages", "4", "--analysis-questions", "2"]


class TestData:
    def test_deterministic_files(self, tmp_path):
        spec = SyntheticTaskSpec(n_train=50, n_dev=10, seed=3)
        a, b = gen_data(spec, tmp_path / "a"), gen_data(spec, tmp_path / "b")
        for name in a:
            assert a[name].read_bytes() == b[name].read_bytes()

    def test_split_sizes(self):
        splits = generate(SyntheticTaskSpec(n_train=75, n_dev=10))
        assert len(splits["tune"]) == round(0.1 * 75) == 8
        assert len(splits["train"]) == 67 and len(splits["dev"]) == 10
        assert not {e.id for e in splits["tune"]} & {e.id for e in splits["train"]}

    def test_every_record_checks_out(self, tmp_path):
        spec = SyntheticTaskSpec(n_train=300, n_dev=100, span_range=(1, 3), seed=9)
        for path in gen_data(spec, tmp_path).values():
            for ex in read_jsonl(path):
                check_example(ex)
                value_tokens = ex.passage[ex.answer_start:ex.answer_end + 1]
                assert all(t.startswith("v") for t in value_tokens)
                assert ex.passage[ex.answer_start - 1] == ex.question[0]

    def test_record_format(self, tmp_path):
        path = gen_data(SyntheticTaskSpec(n_train=10, n_dev=2), tmp_path)["dev"]
        rec = json.loads(path.read_text().splitlines()[0])
        assert set(rec) == {"id", "question", "passage", "answer_start", "answer_end"}

    def test_check_example_rejects(self):
        with pytest.raises(ValueError):
            check_example(Example("x", ("k1",), ("k1", "v2", "v3"), 1, 1))

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(n_keys=2, pairs_range=(1, 3))


class TestMetrics:
    def test_perfect(self):
        assert score_spans([(1, 2), (3, 3)], [(1, 2), (3, 3)]) == {"em": 100.0, "f1": 100.0,
                                                                    "n": 2}

    def test_half_overlap(self):
        assert span_f1((1, 2), (2, 3)) == 0.5

    def test_disjoint(self):
        assert span_f1((1, 1), (3, 4)) == 0.0

    def test_retention(self):
        assert retention(45.0, 50.0) == 90.0


class TestConfig:
    def test_file_then_cli(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nhidden-dim = 16\nk = 1\nuse_tuned_weights = yes\n")
        args = build_parser().parse_args(["profile", "--config", str(cfg), "--k", "2"])
        config = resolve_config(args)
        assert (config.hidden_dim, config.k, config.use_tuned_weights) == (16, 2, True)

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c").write_text("wings = 2\n")
        with pytest.raises(ConfigurationError):
            read_config_file(tmp_path / "c")

    def test_malformed_line(self, tmp_path):
        (tmp_path / "c").write_text("hidden_dim 16\n")
        with pytest.raises(ConfigurationError):
            read_config_file(tmp_path / "c")


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("run")
    assert main(["pipeline", "--run-dir", str(path)] + TINY) == 0
    return path


class TestPipeline:
    def test_reports_written(self, run_dir):
        for name in ("eval", "profile", "analyze", "cost", "finetune"):
            assert (run_dir / "reports" / f"{name}.txt").exists()
            assert (run_dir / "reports" / f"{name}.jsonl").exists()
        profile = json.loads((run_dir / "reports" / "profile.jsonl").read_text().splitlines()[0])
        assert profile["analytic_matches"] is True

    def test_rerun_skips(self, run_dir, capsys):
        assert main(["pipeline", "--run-dir", str(run_dir)] + TINY) == 0
        out = capsys.readouterr().out
        assert out.count("up to date, skipped") == 9

    def test_cached_eval_matches(self, run_dir):
        lines = (run_dir / "reports" / "eval.jsonl").read_text().splitlines()
        recs = {r["model"]: r for r in map(json.loads, lines)}
        plain, cached = recs["deformer"], recs["deformer+cache"]
        assert (plain["em"], plain["f1"]) == (cached["em"], cached["f1"])

    def test_stale_k(self, run_dir, capsys):
        # the last --k wins, so this asks for k=2 over artifacts built with k=1
        assert main(["eval", "--run-dir", str(run_dir)] + TINY + ["--k", "2"]) == 2
        assert "StaleArtifactError" in capsys.readouterr().err

    def test_missing_prerequisite(self, tmp_path, capsys):
        assert main(["finetune", "--run-dir", str(tmp_path / "empty")] + TINY) == 2
        err = capsys.readouterr().err
        assert "DependencyError" in err and "train-teacher" in err

    def test_tampered_artifact(self, run_dir, tmp_path, capsys):
        import shutil
        copy = tmp_path / "copy"
        shutil.copytree(run_dir, copy)
        raw = bytearray((copy / "student.dfwt").read_bytes())
        raw[-1] ^= 1
        (copy / "student.dfwt").write_bytes(bytes(raw))
        assert main(["eval", "--run-dir", str(copy), "--force"] + TINY) == 2
        assert "StaleArtifactError" in capsys.readouterr().err

    def test_determinism(self, run_dir, tmp_path):
        other = tmp_path / "again"
        assert main(["pipeline", "--run-dir", str(other)] + TINY) == 0
        for name in ("teacher.dfwt", "student.dfwt", "cache.dfrm", "data/train.jsonl"):
            assert (other / name).read_bytes() == (run_dir / name).read_bytes()
        for name in ("eval.jsonl", "profile.jsonl"):
            assert (other / "reports" / name).read_text() == \
                (run_dir / "reports" / name).read_text()
