"""Regenerate tests/golden/ from the bundled case-study fixtures via the CLI."""

from pathlib import Path

from ekarag.cli import main

ROOT = Path(__file__).resolve().parents[1]
FIX = ROOT / "src" / "ekarag" / "data" / "fixtures"
GOLD = ROOT / "tests" / "golden"

Q_EKA = "Which film has the director born later, I'll Tell The World or Saranggola?"
Q_BASE = "Which film has the director born later, I'Ll Tell The World or Saranggola?"


def run():
    common = ["--corpus", str(FIX / "case_study_corpus.jsonl"), "--script", str(FIX / "case_study_script.jsonl"),
              "--strict"]
    assert main(["run", *common, "--eka", "on", "--question", Q_EKA,
                 "--dump-trajectory", str(GOLD / "case_study_eka.json")]) == 0
    assert main(["run", *common, "--eka", "off", "--question", Q_BASE,
                 "--dump-trajectory", str(GOLD / "case_study_baseline.json")]) == 0
    assert main(["eval", *common, "--eka", "on", "--dataset", str(FIX / "case_study.jsonl"),
                 "--report", str(GOLD / "case_study_report.jsonl")]) == 0


if __name__ == "__main__":
    run()
