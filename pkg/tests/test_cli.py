import json

import pytest

from conftest import FIXTURES, GOLDEN, Q_BASE, Q_EKA, read_records, write_corpus
from ekarag.cli import main
from ekarag.info_theory import pointer_world

CASE = ["--corpus", str(FIXTURES / "case_study_corpus.jsonl"),
        "--script", str(FIXTURES / "case_study_script.jsonl"), "--strict"]
MULTI = ["--corpus", str(FIXTURES / "multihop_corpus.jsonl"), "--backend", "evidence-mock"]
MULTI_DS = str(FIXTURES / "multihop.jsonl")


def test_index_banner_and_force(tmp_path, capsys):
    corpus = write_corpus(tmp_path / "c.jsonl", [("a", "alpha beta gamma"), ("b", "delta epsilon")])
    idx = tmp_path / "i.json"
    assert main(["index", "--corpus", str(corpus), "--index", str(idx)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("2 documents, 2 chunks")
    assert main(["index", "--corpus", str(corpus), "--index", str(idx)]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(["index", "--corpus", str(corpus), "--index", str(idx), "--force"]) == 0


def test_index_missing_corpus(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert main(["index", "--corpus", str(missing), "--index", str(tmp_path / "i.json")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_run_from_saved_index(tmp_path, capsys):
    idx = tmp_path / "i.json"
    assert main(["index", "--corpus", str(FIXTURES / "case_study_corpus.jsonl"), "--index", str(idx)]) == 0
    assert main(["run", "--index", str(idx), "--script", str(FIXTURES / "case_study_script.jsonl"),
                 "--strict", "--question", Q_EKA]) == 0
    assert "answer: Saranggola" in capsys.readouterr().out


@pytest.mark.parametrize("question,eka,golden,answer", [
    (Q_EKA, "on", "case_study_eka.json", "Saranggola"),
    (Q_BASE, "off", "case_study_baseline.json", "I'Ll Tell The World"),
])
def test_run_golden(tmp_path, capsys, question, eka, golden, answer):
    dump = tmp_path / "t.json"
    assert main(["run", *CASE, "--eka", eka, "--question", question, "--dump-trajectory", str(dump)]) == 0
    assert f"answer: {answer}" in capsys.readouterr().out
    assert dump.read_bytes() == (GOLDEN / golden).read_bytes()


def test_run_unanswerable_budget(tmp_path, capsys):
    script = tmp_path / "s.jsonl"
    turn = {"question": "unanswerable?", "expect_substring": "",
            "emit": '<think>hm</think><query>{"query": "nothing here"}</query>', "uniform_top": 5}
    script.write_text((json.dumps(turn) + "\n") * 3)
    rc = main(["run", "--corpus", str(FIXTURES / "case_study_corpus.jsonl"), "--script", str(script),
               "--max-turns", "3", "--question", "unanswerable?"])
    out = capsys.readouterr().out
    assert rc == 0 and "termination: budget_exhausted" in out and "answer: -" in out


def test_run_fixture_mismatch_is_user_error(capsys):
    assert main(["run", *CASE, "--question", "not in the script"]) == 1


def test_eval_golden_report(tmp_path, capsys):
    rep = tmp_path / "r.jsonl"
    assert main(["eval", *CASE, "--eka", "on", "--dataset", str(FIXTURES / "case_study.jsonl"),
                 "--report", str(rep)]) == 0
    for suffix in ("", ".txt", ".entropy.csv"):
        assert (tmp_path / f"r.jsonl{suffix}").read_bytes() == \
            (GOLDEN / f"case_study_report.jsonl{suffix}").read_bytes()
    assert "mean" in capsys.readouterr().out


def test_eval_empty_dataset(tmp_path, capsys):
    ds = tmp_path / "empty.jsonl"
    ds.write_text("")
    assert main(["eval", *MULTI, "--dataset", str(ds), "--report", str(tmp_path / "r.jsonl")]) == 1
    assert "empty" in capsys.readouterr().err


def test_eval_groups_match_advantage_oracle(tmp_path):
    from test_rollout import zscore_oracle

    rep = tmp_path / "r.jsonl"
    assert main(["eval", *MULTI, "--dataset", MULTI_DS, "--group-size", "4", "--guess-rate", "0.5",
                 "--seed", "3", "--report", str(rep)]) == 0
    groups = read_records(f"{rep}.groups.jsonl")
    assert len(groups) == len(read_records(MULTI_DS))
    for g in groups:
        assert len(g["advantages"]) == 4
        assert g["advantages"] == pytest.approx(zscore_oracle(g["rewards"]), abs=1e-12)
        assert g["objective"] is not None
    assert any(len(set(g["rewards"])) > 1 for g in groups)


def test_compare_eka_vs_baseline(tmp_path, capsys):
    a, b = tmp_path / "base.jsonl", tmp_path / "eka.jsonl"
    assert main(["eval", *MULTI, "--eka", "off", "--dataset", MULTI_DS, "--report", str(a)]) == 0
    assert main(["eval", *MULTI, "--eka", "on", "--dataset", MULTI_DS, "--report", str(b)]) == 0
    capsys.readouterr()
    assert main(["compare", str(a), str(b), "--base-label", "baseline", "--other-label", "EKA"]) == 0
    out = capsys.readouterr().out
    row = next(line for line in out.splitlines() if line.startswith("avg_turns"))
    assert float(row.split()[-1]) < 0
    assert main(["compare", str(a), str(a)]) == 0
    out = capsys.readouterr().out
    assert all(line.split()[-1] in ("+0.0000", "-") for line in out.splitlines()[1:])


def test_compare_mismatch(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["eval", *MULTI, "--dataset", MULTI_DS, "--report", str(a)]) == 0
    assert main(["eval", *CASE, "--dataset", str(FIXTURES / "case_study.jsonl"), "--report", str(b)]) == 0
    capsys.readouterr()
    assert main(["compare", str(a), str(b)]) == 1
    assert "fingerprint" in capsys.readouterr().err


def test_verify_theory_bundled(capsys):
    assert main(["verify-theory"]) == 0
    assert "8 worlds, 0 failed checks" in capsys.readouterr().out


def test_verify_theory_corrupted(tmp_path, capsys):
    d = pointer_world(2, 3, 2, 1, name="bad").to_dict()
    d["joint"][0] += 0.25
    (tmp_path / "bad.json").write_text(json.dumps(d))
    assert main(["verify-theory", "--worlds", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_verify_theory_empty(tmp_path, capsys):
    assert main(["verify-theory", "--worlds", str(tmp_path)]) == 1
    assert "no worlds" in capsys.readouterr().err


def test_config_precedence(tmp_path, capsys):
    rec = read_records(MULTI_DS)[0]
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'seed = 1\n[corpus]\npath = "{FIXTURES / "multihop_corpus.jsonl"}"\n'
                   '[rollout]\nmax_turns = 1\neka = false\n[backend]\nkind = "evidence-mock"\n')
    base = ["--config", str(cfg), "run", "--dataset", MULTI_DS, "--question", rec["question"]]
    assert main(base) == 0
    assert "termination: budget_exhausted" in capsys.readouterr().out
    assert main([*base, "--max-turns", "8"]) == 0
    assert "termination: answered" in capsys.readouterr().out


def test_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("this is = = not toml")
    assert main(["--config", str(cfg), "verify-theory"]) == 1
    assert main(["--config", str(tmp_path / "missing.toml"), "verify-theory"]) == 1


def test_seed_determinism(tmp_path):
    outs = []
    for n in range(2):
        rep = tmp_path / f"r{n}.jsonl"
        assert main(["eval", *MULTI, "--dataset", MULTI_DS, "--guess-rate", "0.5", "--seed", "7",
                     "--group-size", "3", "--report", str(rep), "--dump-dir", str(tmp_path / f"d{n}")]) == 0
        outs.append(rep)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert (tmp_path / "r0.jsonl.groups.jsonl").read_bytes() == (tmp_path / "r1.jsonl.groups.jsonl").read_bytes()
    for f in sorted((tmp_path / "d0").iterdir()):
        assert f.read_bytes() == (tmp_path / "d1" / f.name).read_bytes()


def test_http_backend_unreachable_is_env_error(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[backend]\nmax_retries = 0\n")
    rc = main(["--config", str(cfg), "run", "--corpus", str(FIXTURES / "case_study_corpus.jsonl"), "--backend", "http-endpoint",
               "--endpoint", "http://127.0.0.1:9", "--model", "m", "--question", "q?"])
    assert rc == 2
