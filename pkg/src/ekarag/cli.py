"""Command-line entry point: index, run, eval, compare, verify-theory.

Exit codes: 0 success, 1 user error (bad input, missing file, fixture
mismatch, failed check), 2 environment or transport failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import info_theory, rl_math
from .backends import (EVIDENCE, HTTP, SCRIPTED, BackendConfig, BackendError, FixtureMismatch,
                       make_backend)
from .io import atomic_write_text, dumps, read_jsonl, write_jsonl
from .report import assemble_report, compare_reports, format_comparison, read_report
from .retrieval import (EMBEDDING, LEXICAL, EndpointError, RetrievalError, RetrieverConfig,
                        build_index, ingest_corpus, load_index, save_index)
from .rollout import RolloutConfig, RolloutError, run_group, run_rollout

log = logging.getLogger("ekarag")

EXIT_OK, EXIT_USER, EXIT_ENV = 0, 1, 2


class UserError(Exception):
    pass


# -- configuration ---------------------------------------------------------

def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise UserError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UserError(f"{path}: invalid TOML ({exc})") from None


def _pick(flag, cfg: dict, key: str, default=None):
    """Flag value if given, else config value, else ``default``."""
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _on_off(value) -> bool | None:
    if value is None or isinstance(value, bool):
        return value
    return value == "on"


def retriever_config(args, cfg: dict) -> RetrieverConfig:
    sec = cfg.get("retriever", {})
    return RetrieverConfig(
        backend=_pick(getattr(args, "retriever", None), sec, "backend", LEXICAL),
        k=_pick(getattr(args, "k", None), sec, "k", 5),
        k1=sec.get("k1", 1.2),
        b=sec.get("b", 0.75),
        endpoint=sec.get("endpoint"),
        model=sec.get("model"),
        early_k=_pick(getattr(args, "early_k", None), sec, "early_k"),
        timeout=sec.get("timeout", 30.0),
    )


def backend_config(args, cfg: dict) -> BackendConfig:
    sec = cfg.get("backend", {})
    script = _pick(getattr(args, "script", None), sec, "script")
    kind = _pick(getattr(args, "backend", None), sec, "kind", SCRIPTED if script else EVIDENCE)
    return BackendConfig(
        kind=kind,
        endpoint=_pick(getattr(args, "endpoint", None), sec, "endpoint"),
        model=_pick(getattr(args, "model", None), sec, "model"),
        api_key_env=sec.get("api_key_env", "OPENAI_API_KEY"),
        timeout=sec.get("timeout", 60.0),
        max_retries=sec.get("max_retries", 3),
        script=script,
        parallelism=_pick(getattr(args, "parallelism", None), sec, "parallelism", 4),
        guess_rate=_pick(getattr(args, "guess_rate", None), sec, "guess_rate", 0.0),
        top_logprobs=sec.get("top_logprobs", 5),
    )


def rollout_config(args, cfg: dict, retriever: RetrieverConfig, backend: BackendConfig) -> RolloutConfig:
    sec = cfg.get("rollout", {})
    return RolloutConfig(
        max_turns=_pick(getattr(args, "max_turns", None), sec, "max_turns", 8),
        eka_enabled=_pick(_on_off(getattr(args, "eka", None)), sec, "eka", True),
        strict_query_format=_pick(True if getattr(args, "strict", False) else None, sec, "strict_query_format", False),
        retriever=retriever,
        backend=backend,
        temperature=sec.get("temperature", 0.0),
        group_temperature=sec.get("group_temperature", 1.0),
        max_tokens_per_turn=sec.get("max_tokens_per_turn", 1024),
        max_total_tokens=sec.get("max_total_tokens", 4096),
        top_logprobs=backend.top_logprobs,
        reward=sec.get("reward", "em"),
        seed=_pick(getattr(args, "seed", None), cfg, "seed", 0),
    )


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise UserError(f"no {what} given")
    if not Path(path).exists():
        raise UserError(f"{what} not found: {path}")
    return path


def open_index(args, cfg: dict, retriever: RetrieverConfig):
    """Load a saved index, or ingest and index a corpus on the fly."""
    sec = cfg.get("corpus", {})
    index_path = _pick(getattr(args, "index", None), sec, "index")
    corpus_path = _pick(getattr(args, "corpus", None), sec, "path")
    if index_path and Path(index_path).exists() and not corpus_path:
        index, _ = load_index(index_path)
        return index
    corpus = ingest_corpus(_require_file(corpus_path, "corpus"),
                           chunk_size=_pick(getattr(args, "chunk_size", None), sec, "chunk_size", 256),
                           overlap=_pick(getattr(args, "overlap", None), sec, "overlap", 32))
    api_key = os.environ.get(cfg.get("retriever", {}).get("api_key_env", "OPENAI_API_KEY"))
    return build_index(corpus, retriever, api_key=api_key)


def load_dataset(path: str) -> list[dict]:
    """Line-delimited QA records; ``golden_answers`` may also be given as ``answer``/``answers``."""
    rows = read_jsonl(_require_file(path, "dataset"))
    out = []
    for i, r in enumerate(rows, start=1):
        if not isinstance(r, dict) or not str(r.get("question", "")).strip():
            raise UserError(f"{path}:{i}: record has no question")
        golds = r.get("golden_answers", r.get("answers", r.get("answer")))
        if golds is None:
            raise UserError(f"{path}:{i}: record has no golden_answers")
        r = dict(r)
        r["golden_answers"] = [golds] if isinstance(golds, str) else list(golds)
        out.append(r)
    if not out:
        raise UserError(f"dataset is empty: {path}")
    return out


# -- commands --------------------------------------------------------------

def cmd_index(args, cfg: dict) -> int:
    retriever = retriever_config(args, cfg)
    if retriever.backend != LEXICAL:
        raise UserError("only lexical indexes can be persisted")
    sec = cfg.get("corpus", {})
    out = _pick(args.index, sec, "index")
    if not out:
        raise UserError("no --index output path given")
    if Path(out).exists() and not args.force:
        raise UserError(f"index already exists: {out} (use --force to rebuild)")
    corpus = ingest_corpus(_require_file(_pick(args.corpus, sec, "path"), "corpus"),
                           chunk_size=_pick(args.chunk_size, sec, "chunk_size", 256),
                           overlap=_pick(args.overlap, sec, "overlap", 32))
    index = build_index(corpus, retriever)
    save_index(index, out, retriever)
    st = index.stats()
    print(f"{st['documents']} documents, {st['chunks']} chunks, {st['terms']} terms -> {out}")
    return EXIT_OK


def _record_for(args, question: str) -> dict:
    if getattr(args, "dataset", None):
        for r in load_dataset(args.dataset):
            if r["question"] == question:
                return r
        raise UserError(f"question not found in {args.dataset}")
    return {"question": question}


def cmd_run(args, cfg: dict) -> int:
    retriever = retriever_config(args, cfg)
    backend_cfg = backend_config(args, cfg)
    config = rollout_config(args, cfg, retriever, backend_cfg)
    index = open_index(args, cfg, retriever)
    record = _record_for(args, args.question)
    backend = make_backend(backend_cfg, record, seed=config.seed)
    traj = run_rollout(config, args.question, index, backend, seed=config.seed)
    if args.dump_trajectory:
        atomic_write_text(args.dump_trajectory, dumps(traj.to_dict()) + "\n")
    print(f"answer: {traj.final_answer if traj.final_answer is not None else '-'}")
    print(f"turns: {traj.turn_count} (searches: {traj.search_count}, feedback: {traj.feedback_count})")
    print(f"termination: {traj.termination}; pipeline: {'ok' if traj.pipeline.ok else traj.pipeline.detail}")
    return EXIT_OK


def _group_summary(group) -> dict:
    """Advantages plus the on-policy GRPO objective value for one group.

    Rollouts are sampled from the current policy, so old and reference
    log-probabilities equal the current ones and the ratio is 1.
    """
    members, advs = [], []
    for traj, adv in zip(group.trajectories, group.advantages):
        if traj is None or not traj.tokens:
            continue
        members.append([rl_math.TokenProbRecord(t.logprob, t.logprob, t.logprob) for t in traj.tokens])
        advs.append(adv)
    out = group.to_dict()
    out["objective"] = rl_math.grpo_objective(members, advs).to_dict() if members else None
    return out


def cmd_eval(args, cfg: dict) -> int:
    retriever = retriever_config(args, cfg)
    backend_cfg = backend_config(args, cfg)
    config = rollout_config(args, cfg, retriever, backend_cfg)
    records = load_dataset(_pick(args.dataset, cfg, "dataset"))
    index = open_index(args, cfg, retriever)
    G = args.group_size

    def one(rec):
        try:
            backend = make_backend(backend_cfg, rec, seed=config.seed)
            return run_rollout(config, rec["question"], index, backend, seed=config.seed), None
        except RolloutError as exc:
            if _is_env_failure(exc):
                raise
            log.warning("rollout failed: %s", exc)
            return None, str(exc)

    with ThreadPoolExecutor(max_workers=max(1, backend_cfg.parallelism)) as pool:
        results = list(pool.map(one, records))
    trajs = [r[0] for r in results]
    report = assemble_report(trajs, records, config.to_dict(), errors=[r[1] for r in results])
    out = args.report or str(Path(cfg.get("output_dir", ".")) / "report.jsonl")
    report.write(out)
    if args.dump_dir:
        for i, t in enumerate(trajs):
            if t is not None:
                atomic_write_text(Path(args.dump_dir) / f"q{i:04d}.json", dumps(t.to_dict()) + "\n")
    if G > 1:
        groups = [run_group(config, rec["question"], G, index, rec["golden_answers"], record=rec)
                  for rec in records]
        write_jsonl(f"{out}.groups.jsonl", [_group_summary(g) for g in groups])
    sys.stdout.write(report.to_table())
    return EXIT_OK


def cmd_compare(args, cfg: dict) -> int:
    base = read_report(_require_file(args.base, "report"))
    other = read_report(_require_file(args.other, "report"))
    rows = compare_reports(base, other)
    sys.stdout.write(format_comparison(rows, args.base_label, args.other_label))
    return EXIT_OK


def cmd_verify_theory(args, cfg: dict) -> int:
    path = _pick(args.worlds, cfg.get("theory", {}), "worlds") or str(info_theory.bundled_family_path())
    _require_file(path, "worlds path")
    worlds = info_theory.load_family(path)
    if not worlds:
        raise UserError(f"no worlds found in {path}")
    failed = 0
    for world in worlds:
        for check in info_theory.check_world(world, tol=args.tol):
            failed += not check.ok
            status = "ok" if check.ok else "FAIL"
            print(f"{status:4}  {check.world:24} {check.name:20} {check.detail}")
    print(f"{len(worlds)} worlds, {failed} failed checks")
    return EXIT_OK if failed == 0 else EXIT_USER


# -- plumbing --------------------------------------------------------------

def _is_env_failure(exc: BaseException) -> bool:
    cause = exc.__cause__ or exc.__context__
    if isinstance(exc, RolloutError) and cause is not None:
        return _is_env_failure(cause)
    if isinstance(exc, FixtureMismatch):
        return False
    return isinstance(exc, (BackendError, EndpointError, OSError)) and not isinstance(exc, FileNotFoundError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ekarag", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="TOML config file; flags override its values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def corpus_flags(sp):
        sp.add_argument("--corpus", help="line-delimited corpus {id,title,text}")
        sp.add_argument("--index", help="saved lexical index")
        sp.add_argument("--chunk-size", type=int)
        sp.add_argument("--overlap", type=int)
        sp.add_argument("--retriever", choices=[LEXICAL, EMBEDDING])
        sp.add_argument("--k", type=int)
        sp.add_argument("--early-k", type=int)

    def rollout_flags(sp):
        sp.add_argument("--eka", choices=["on", "off"])
        sp.add_argument("--strict", action="store_true", default=False,
                        help="reject non-JSON query payloads with format feedback")
        sp.add_argument("--backend", choices=[SCRIPTED, EVIDENCE, HTTP])
        sp.add_argument("--script", help="scripted-mock script file")
        sp.add_argument("--endpoint")
        sp.add_argument("--model")
        sp.add_argument("--max-turns", type=int)
        sp.add_argument("--guess-rate", type=float)
        sp.add_argument("--parallelism", type=int)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("index", help="ingest a corpus and persist a lexical index")
    corpus_flags(sp)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_index)

    sp = sub.add_parser("run", help="run one question")
    corpus_flags(sp)
    rollout_flags(sp)
    sp.add_argument("--question", required=True)
    sp.add_argument("--dataset", help="dataset holding the question's record (evidence-mock)")
    sp.add_argument("--dump-trajectory", help="write the trajectory as JSON")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="evaluate a dataset and write a report")
    corpus_flags(sp)
    rollout_flags(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--group-size", type=int, default=1)
    sp.add_argument("--report", help="report path (JSONL); .txt and .entropy.csv written alongside")
    sp.add_argument("--dump-dir", help="directory for per-question trajectory dumps")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare", help="print delta rows between two reports")
    sp.add_argument("base")
    sp.add_argument("other")
    sp.add_argument("--base-label", default="base")
    sp.add_argument("--other-label", default="other")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("verify-theory", help="check information-theory invariants on a world family")
    sp.add_argument("--worlds", help="directory of world files (default: bundled family)")
    sp.add_argument("--tol", type=float, default=1e-12)
    sp.set_defaults(func=cmd_verify_theory)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "eval" and args.group_size < 1:
            raise UserError("--group-size must be >= 1")
        return args.func(args, cfg)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (RolloutError, BackendError, RetrievalError, OSError) as exc:
        code = EXIT_ENV if _is_env_failure(exc) else EXIT_USER
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
