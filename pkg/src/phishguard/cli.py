"""Operator command line: ingest, index, classify, evaluate, serve.

Exit codes for `classify`: 0 legitimate, 3 phishing, 4 fallback used,
5 pipeline error (mail filters branch on these). `ingest` exits 2 on
unreadable or empty input. Secrets travel via environment variables
only (LLM_*, VT_*, EMBED_*), never flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import emailcore, evaluation, gateway, service
from .embedding import provider_from_spec
from .errors import PhishGuardError
from .index import VectorIndex
from .pipeline import ClassifyOptions, Engine, classify, index_corpus
from .threatintel import ReputationClient

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PHISHING = 3
EXIT_FALLBACK = 4
EXIT_PIPELINE_ERROR = 5


def _add_provider_flags(parser):
    parser.add_argument("--provider", default="hash", choices=["hash", "remote"],
                        help="embedding provider (hash needs no network)")
    parser.add_argument("--dim", type=int, default=384)
    parser.add_argument("--embed-seed", type=int, default=0)


def _add_engine_flags(parser):
    parser.add_argument("--index", required=True, help="path to .pgix index")
    parser.add_argument("--corpus", help="canonical corpus JSONL; needed to "
                        "render retrieved context bodies")
    parser.add_argument("--model", default="llama4-scout")
    parser.add_argument("--backend", default="scripted:rules.json",
                        help="remote or scripted:PATH")
    parser.add_argument("--k", type=int, default=5)
    parser.add_argument("--no-rag", action="store_true")
    parser.add_argument("--no-threat-intel", action="store_true")
    parser.add_argument("--threat-fixtures",
                        help="JSON file mapping element -> verdict fields")
    parser.add_argument("--no-fallback", action="store_true",
                        help="raise instead of failing closed")
    parser.add_argument("--budget-chars", type=int, default=None)
    _add_provider_flags(parser)


def _build_backend(spec_arg: str, model_spec):
    if spec_arg == "remote":
        return gateway.RemoteChatBackend(model_spec)
    if spec_arg.startswith("scripted:"):
        return gateway.ScriptedBackend.from_json_file(
            spec_arg.split(":", 1)[1], model_spec=model_spec)
    raise ValueError(f"unknown backend {spec_arg!r} (use remote or scripted:PATH)")


def _build_threat_client(args):
    if args.no_threat_intel:
        return None
    if args.threat_fixtures:
        return ReputationClient.from_fixture_file(args.threat_fixtures)
    return ReputationClient()


def _build_engine(args) -> tuple[Engine, ClassifyOptions]:
    provider = provider_from_spec(args.provider, dim=args.dim,
                                  seed=args.embed_seed)
    idx = VectorIndex.load(args.index, expected_dim=args.dim)
    store = {}
    if args.corpus:
        store = {e.id: e for e in emailcore.load_corpus_jsonl(args.corpus)}
    model_spec = gateway.lookup(args.model)
    engine = Engine(provider=provider, index=idx, context_store=store,
                    backend=_build_backend(args.backend, model_spec),
                    model_spec=model_spec,
                    threat_client=_build_threat_client(args))
    options = ClassifyOptions(rag=not args.no_rag,
                              threat=not args.no_threat_intel,
                              k=args.k,
                              fallback_enabled=not args.no_fallback,
                              budget_chars=args.budget_chars)
    return engine, options


# --- subcommands --------------------------------------------------------------

def cmd_ingest(args) -> int:
    in_path = Path(args.input)
    if in_path.is_dir():
        eml_files = sorted(in_path.glob("*.eml"))
        if not eml_files:
            print(f"error: no .eml files in {in_path}", file=sys.stderr)
            return EXIT_USAGE
        raws = [emailcore.RawEmail(data=p.read_bytes(), source_id=p.stem)
                for p in eml_files]
        labels = {r.source_id: args.label for r in raws} if args.label else None
        emails, report = emailcore.preprocess_corpus(raws, labels)
    elif in_path.is_file():
        try:
            with open(in_path, "r", encoding="utf-8") as fh:
                records = [json.loads(line) for line in fh if line.strip()]
        except (OSError, ValueError) as exc:
            print(f"error: cannot read {in_path}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if not records:
            print(f"error: {in_path} is empty", file=sys.stderr)
            return EXIT_USAGE
        emails, report = emailcore.preprocess_records(records)
    else:
        print(f"error: {in_path} does not exist", file=sys.stderr)
        return EXIT_USAGE

    if args.anonymize:
        emails = emailcore.anonymize_corpus(emails)
    if emails or report.input:
        emailcore.save_corpus_jsonl(args.out, emails)
        report_path = Path(args.report) if args.report \
            else Path(args.out).with_suffix(".report.json")
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(json.dumps(report.to_dict(), indent=2),
                               encoding="utf-8")
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_index(args) -> int:
    emails = emailcore.load_corpus_jsonl(args.corpus)
    provider = provider_from_spec(args.provider, dim=args.dim,
                                  seed=args.embed_seed)
    only_label = None if args.all_labels else args.only_label
    idx, _ = index_corpus(provider, emails, only_label=only_label)
    idx.save(args.out)
    print(json.dumps({"indexed": len(idx), "dim": idx.dim,
                      "out": str(args.out)}))
    return EXIT_OK


def _read_query_email(args) -> emailcore.CleanEmail:
    if args.eml:
        raw = emailcore.RawEmail(data=Path(args.eml).read_bytes(),
                                 source_id=Path(args.eml).stem)
        decoded = emailcore.decode_message(raw.data)
        subject, sender, body = emailcore.extract_features(decoded)
        record_id = raw.source_id
    else:
        source = Path(args.json).read_text(encoding="utf-8") if args.json \
            else sys.stdin.read()
        payload = json.loads(source)
        subject = payload.get("subject", "")
        sender = payload["sender"]
        body = payload["body"]
        record_id = str(payload.get("id", "query-stdin"))
    cleaned = emailcore.clean_record(record_id, subject, sender, body)
    if cleaned is None or not cleaned.body:
        raise PhishGuardError("query email failed validation "
                              "(sender needs '@', body must be non-empty)")
    return cleaned


def cmd_classify(args) -> int:
    try:
        engine, options = _build_engine(args)
        cleaned = _read_query_email(args)
        result = classify(engine, cleaned, options)
    except (PhishGuardError, OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": str(exc), "kind": type(exc).__name__}))
        return EXIT_PIPELINE_ERROR
    print(result.to_json(include_timings=True))
    if result.fallback_used:
        return EXIT_FALLBACK
    if result.verdict.classification_decision == "phishing":
        return EXIT_PHISHING
    return EXIT_OK


def cmd_evaluate(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for mode in modes:
        if mode not in (evaluation.MODE_RAG, evaluation.MODE_NORAG):
            print(f"error: unknown mode {mode!r}", file=sys.stderr)
            return EXIT_USAGE
    corpus = emailcore.load_corpus_jsonl(args.corpus)
    provider = provider_from_spec(args.provider, dim=args.dim,
                                  seed=args.embed_seed)
    registry = gateway.registry_default()
    model_keys = [k.strip() for k in args.models.split(",") if k.strip()]
    models = [gateway.lookup(key, registry) for key in model_keys]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    threat_client = _build_threat_client(args)
    config = evaluation.EvalConfig(
        k=args.k,
        threat=not args.no_threat_intel,
        parallelism=args.parallelism,
        eval_on="all" if args.eval_on_all else "test",
        audit_path=str(out_dir / "audit.jsonl") if args.audit else None,
    )
    if args.threat_fixtures:
        config.fixtures["threat_fixtures"] = evaluation.file_sha256(
            args.threat_fixtures)
    if args.backend.startswith("scripted:"):
        config.fixtures["scripted_rules"] = evaluation.file_sha256(
            args.backend.split(":", 1)[1])

    split = evaluation.SplitSpec(train_fraction=args.train_fraction,
                                 seed=args.seed)
    report = evaluation.run_matrix(
        corpus, models, modes, split, provider,
        backend_factory=lambda spec: _build_backend(args.backend, spec),
        threat_client=threat_client, config=config)
    paths = evaluation.emit_report(report, args.out)
    print(json.dumps({"written": {k: str(p) for k, p in paths.items()}}))
    return EXIT_OK


def cmd_serve(args) -> int:
    try:
        engine, options = _build_engine(args)
    except (PhishGuardError, OSError, ValueError) as exc:
        print(f"error: invalid service config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    host, _, port = args.listen.rpartition(":")
    service.serve(engine, options, host or "127.0.0.1", int(port))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phishguard",
        description="Personalized phishing detection: RAG context + "
                    "reputation evidence + LLM verdicts.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build the canonical corpus JSONL")
    p.add_argument("--input", required=True,
                   help="directory of .eml files or a raw JSONL corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="ingestion report path "
                   "(default: <out>.report.json)")
    p.add_argument("--anonymize", action="store_true")
    p.add_argument("--label", choices=[emailcore.LABEL_LEGITIMATE,
                                       emailcore.LABEL_PHISHING],
                   help="label applied to every ingested .eml")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="embed a corpus into a .pgix index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--only-label", default=emailcore.LABEL_LEGITIMATE)
    p.add_argument("--all-labels", action="store_true",
                   help="admit every label (ablation)")
    _add_provider_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("classify", help="classify one email")
    _add_engine_flags(p)
    p.add_argument("--eml", help="query email as an .eml file")
    p.add_argument("--json", help="query email as JSON "
                   "{subject, sender, body}; defaults to stdin")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="run the with/without-RAG matrix")
    p.add_argument("--corpus", required=True)
    p.add_argument("--models", default="llama4-scout")
    p.add_argument("--modes", default="rag,norag")
    p.add_argument("--backend", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--eval-on-all", action="store_true",
                   help="classify the whole corpus, not just the test split")
    p.add_argument("--audit", action="store_true",
                   help="also write audit.jsonl, one result per line")
    p.add_argument("--no-threat-intel", action="store_true")
    p.add_argument("--threat-fixtures")
    _add_provider_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="HTTP classification service")
    _add_engine_flags(p)
    p.add_argument("--listen", default="127.0.0.1:8080")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
