"""Evaluation report assembly, serialization and EKA-vs-baseline comparison."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

from . import metrics
from .io import atomic_write_text, dumps, read_jsonl
from .protocol import Tag
from .rollout import Trajectory

POLICY_REGIONS = (Tag.THINK, Tag.QUERY, Tag.ANSWER)
REPORT_VERSION = 1


def fingerprint(obj) -> str:
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()


def dataset_fingerprint(records: Sequence[dict]) -> str:
    """Hash of questions and gold answers, in order."""
    return fingerprint([[r["question"], list(r.get("golden_answers", []))] for r in records])


@dataclass
class QuestionResult:
    question: str
    golden_answers: list[str]
    prediction: str | None
    em: float
    f1: float
    rs: float | None
    rs_excluding_early: float | None
    turns: int | None
    searches: int | None
    feedback: int | None
    termination: str | None
    error: str | None = None

    def to_dict(self) -> dict:
        return {"type": "question", **self.__dict__}


@dataclass
class EvalReport:
    n_questions: int
    aggregates: dict
    region_entropy: dict
    per_question: list[QuestionResult]
    config_fingerprint: str
    dataset_fingerprint: str
    config: dict
    embedder: str
    entropy_rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "type": "summary",
            "version": REPORT_VERSION,
            "n_questions": self.n_questions,
            "aggregates": self.aggregates,
            "region_entropy": self.region_entropy,
            "config_fingerprint": self.config_fingerprint,
            "dataset_fingerprint": self.dataset_fingerprint,
            "config": self.config,
            "embedder": self.embedder,
        }

    def to_jsonl(self) -> str:
        lines = [dumps(self.summary())] + [dumps(q.to_dict()) for q in self.per_question]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = ["#", "EM", "F1", "R-S", "R-S(-EKA)", "turns", "answer"]
        rows = []
        for i, q in enumerate(self.per_question):
            rows.append([str(i), _fmt(q.em), _fmt(q.f1), _fmt(q.rs), _fmt(q.rs_excluding_early),
                         "-" if q.turns is None else str(q.turns),
                         q.prediction if q.prediction is not None else f"<{q.termination or 'failed'}>"])
        a = self.aggregates
        rows.append(["mean", _fmt(a["em"]), _fmt(a["f1"]), _fmt(a["rs"]), _fmt(a["rs_excluding_early"]),
                     _fmt(a["avg_turns"]), ""])
        out = _align([header] + rows)
        ent = ", ".join(f"{k}={_fmt(v['mean_entropy'])}" for k, v in self.region_entropy.items())
        return out + f"region entropy (nats, {self.aggregates['entropy_note']}): {ent}\n"

    def to_entropy_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["question", "turn", "region", "mean_entropy", "tokens"],
                           lineterminator="\n")
        w.writeheader()
        for row in self.entropy_rows:
            w.writerow({**row, "mean_entropy": repr(row["mean_entropy"])})
        return buf.getvalue()

    def write(self, path: str) -> None:
        """Write ``path`` (JSONL), ``path.txt`` (table) and ``path.entropy.csv``."""
        atomic_write_text(path, self.to_jsonl())
        atomic_write_text(f"{path}.txt", self.to_table())
        atomic_write_text(f"{path}.entropy.csv", self.to_entropy_csv())


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def _align(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def _rs(text: str, gold: str | None, embedder) -> float | None:
    if gold is None:
        return None
    if not metrics.normalize(text):
        # nothing retrieved: no similarity to credit
        return 0.0
    return metrics.retrieval_similarity(text, gold, embedder)


def assemble_report(trajectories: Sequence[Trajectory | None], records: Sequence[dict], config: dict,
                    *, embedder=None, errors: Sequence[str | None] | None = None) -> EvalReport:
    """Score one trajectory per dataset record.

    A ``None`` trajectory is a failed rollout and scores 0 on EM and F1.
    R-S is computed only for records carrying ``gold_context``, both over all
    retrieved text and with the early-knowledge block left out.
    """
    if len(trajectories) != len(records):
        raise ValueError(f"{len(trajectories)} trajectories for {len(records)} records")
    embedder = embedder or metrics.HashingEmbedder()
    errors = list(errors) if errors is not None else [None] * len(records)
    results, entropy_rows = [], []
    region_vals: dict[Tag, list[float]] = {r: [] for r in POLICY_REGIONS}
    top_n = 0
    for qi, (traj, rec) in enumerate(zip(trajectories, records)):
        golds = list(rec.get("golden_answers", []))
        gold_ctx = rec.get("gold_context")
        if traj is None:
            results.append(QuestionResult(rec["question"], golds, None, 0.0, 0.0,
                                          0.0 if gold_ctx is not None else None,
                                          0.0 if gold_ctx is not None else None,
                                          None, None, None, None, errors[qi] or "rollout failed"))
            continue
        pred = traj.final_answer
        answered = pred is not None
        results.append(QuestionResult(
            question=rec["question"],
            golden_answers=golds,
            prediction=pred,
            em=float(metrics.exact_match(pred, golds)) if answered else 0.0,
            f1=metrics.f1(pred, golds) if answered else 0.0,
            rs=_rs(traj.retrieved_text(include_early=True), gold_ctx, embedder),
            rs_excluding_early=_rs(traj.retrieved_text(include_early=False), gold_ctx, embedder),
            turns=traj.turn_count,
            searches=traj.search_count,
            feedback=traj.feedback_count,
            termination=traj.termination,
            error=errors[qi],
        ))
        top_n = max(top_n, max((len(t.top) for t in traj.tokens), default=0))
        for region in POLICY_REGIONS:
            region_vals[region] += metrics.region_token_entropies(traj, region)
        entropy_rows += _entropy_rows(qi, traj)

    note = f"top-{top_n} renormalized" if top_n else "no alternatives recorded"
    region_entropy = {}
    for region, vals in region_vals.items():
        region_entropy[region.value] = {
            "mean_entropy": math.fsum(vals) / len(vals) if vals else None,
            "token_count": len(vals),
        }
    turns = [q.turns for q in results if q.turns is not None]
    aggregates = {
        "em": _mean(q.em for q in results),
        "f1": _mean(q.f1 for q in results),
        "rs": _mean(q.rs for q in results),
        "rs_excluding_early": _mean(q.rs_excluding_early for q in results),
        "avg_turns": math.fsum(turns) / len(turns) if turns else None,
        "failed": sum(1 for q in results if q.error is not None and q.turns is None),
        "entropy_note": note,
    }
    return EvalReport(
        n_questions=len(records),
        aggregates=aggregates,
        region_entropy=region_entropy,
        per_question=results,
        config_fingerprint=fingerprint(config),
        dataset_fingerprint=dataset_fingerprint(records),
        config=config,
        embedder=type(embedder).__name__,
        entropy_rows=entropy_rows,
    )


def _entropy_rows(qi: int, traj: Trajectory) -> list[dict]:
    rows = []
    for seg in traj.policy_segments:
        if seg.token_span is None:
            continue
        toks = traj.tokens[seg.token_span[0]:seg.token_span[1]]
        if not toks:
            continue
        ents = [metrics.token_entropy(t.top) for t in toks]
        rows.append({"question": qi, "turn": toks[0].turn, "region": seg.kind.value,
                     "mean_entropy": math.fsum(ents) / len(ents), "tokens": len(ents)})
    return rows


@dataclass
class LoadedReport:
    summary: dict
    questions: list[dict]


def read_report(path: str) -> LoadedReport:
    rows = read_jsonl(path)
    if not rows or rows[0].get("type") != "summary":
        raise ValueError(f"{path}: not a report file (missing summary line)")
    return LoadedReport(rows[0], [r for r in rows[1:] if r.get("type") == "question"])


COMPARE_ROWS = ("em", "f1", "rs", "rs_excluding_early", "avg_turns")


def compare_reports(base: LoadedReport, other: LoadedReport) -> list[tuple[str, float | None, float | None, float | None]]:
    """Rows of ``(metric, base, other, other - base)``.

    Reports must cover the same dataset.
    """
    if base.summary["dataset_fingerprint"] != other.summary["dataset_fingerprint"]:
        raise ValueError("reports were produced on different datasets (fingerprint mismatch)")
    rows = []
    for key in COMPARE_ROWS:
        rows.append((key, base.summary["aggregates"].get(key), other.summary["aggregates"].get(key)))
    for region in (r.value for r in POLICY_REGIONS):
        rows.append((f"entropy_{region}",
                     base.summary["region_entropy"].get(region, {}).get("mean_entropy"),
                     other.summary["region_entropy"].get(region, {}).get("mean_entropy")))
    return [(k, a, b, None if a is None or b is None else b - a) for k, a, b in rows]


def format_comparison(rows, base_label: str = "base", other_label: str = "other") -> str:
    table = [["metric", base_label, other_label, "Δ"]]
    for key, a, b, d in rows:
        table.append([key, _fmt(a), _fmt(b), "-" if d is None else f"{d:+.4f}"])
    return _align(table)
