"""Command-line entry point: ``atc-coder <subcommand> ...``.

Every flag can also come from a flat JSON object passed with ``--config``;
flags given on the command line win over config values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict, deque
from pathlib import Path

from . import __version__
from .backend import AdversarialBackend, ChatBackend, GenerationParams, HttpChatBackend, OracleBackend
from .data import ColumnMapping, LoadedDataset, dataset_to_csv, load_dataset, stratified_split, substring_overlap_rate
from .engine import HierarchicalCoder
from .errors import AtcError, ConfigError
from .export import export_sft, write_manifest
from .io import atomic_write_text, atomic_writer, read_jsonl
from .knowledge import EMPTY_DEFINITIONS, DefinitionStore, GroundingSetting, load_definitions
from .metrics import build_report, format_table
from .ontology import AtcCode, Ontology, load_ontology, parse_code

logger = logging.getLogger("atc_coder")

# config keys that would put a credential into a shareable file
_SECRET_KEYS = {"token", "api_key", "apikey", "password", "secret", "authorization"}


def _add_dataset_flags(p: argparse.ArgumentParser, generic: bool = False) -> None:
    p.add_argument("--mention-col", default="mention", help="column holding the drug mention")
    p.add_argument("--gold-col", default="gold", help="column holding the gold ATC code")
    p.add_argument("--generic-col", default="generic_name" if generic else None,
                   help="column holding the generic name")
    p.add_argument("--granularity-col", default=None, help="column holding the granularity level (0-5)")
    p.add_argument("--lenient", action="store_true", help="skip invalid rows instead of failing")


def _add_ontology_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ontology", help="ontology TSV (code<TAB>name)")
    p.add_argument("--definitions", help="definitions TSV (code<TAB>definition)")
    p.add_argument("--grounding", default="with-name", choices=[g.value for g in GroundingSetting])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atc-coder", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file of flag defaults")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("code", parents=[common], help="code drug mentions level by level")
    p.add_argument("input", nargs="?", help="text file, one mention per line")
    _add_ontology_flags(p)
    p.add_argument("--backend", default="http", choices=["http", "oracle", "adversarial"])
    p.add_argument("--model", default="default", help="model id sent to the server")
    p.add_argument("--base-url", help="server root, e.g. http://localhost:8000/v1")
    p.add_argument("--token-env", help="name of the environment variable holding the bearer token")
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--max-attempts", type=int, default=3, help="HTTP attempts per request")
    p.add_argument("--retries", type=int, default=2, help="re-asks per level after an unusable reply")
    p.add_argument("--auto-select", action=argparse.BooleanOptionalAction, default=True,
                   help="descend through single-option levels without a model call")
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--gold", help="labeled CSV used by the oracle backend")
    p.add_argument("--script", help="adversarial replies: JSON list or one reply per line")
    p.add_argument("--script-cycle", action="store_true", help="wrap around when the script runs out")
    _add_dataset_flags(p)
    p.add_argument("--out", help="trace JSONL path (default: standard output)")
    p.set_defaults(func=cmd_code)

    p = sub.add_parser("eval", parents=[common], help="score trace predictions against a labeled dataset")
    p.add_argument("--predictions", action="append", default=None,
                   help="trace JSONL, optionally NAME=PATH; repeat for several runs")
    p.add_argument("--dataset", help="labeled CSV/TSV")
    _add_dataset_flags(p)
    p.add_argument("--min-granularity", type=int, default=None,
                   help="exclude items annotated below this granularity")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("split", parents=[common], help="stratified train/test split by level-1 group")
    p.add_argument("--dataset")
    _add_dataset_flags(p)
    p.add_argument("--ratio", type=float, default=0.9, help="training fraction")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--train-out")
    p.add_argument("--test-out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("export-sft", parents=[common], help="export chat-format fine-tuning records")
    p.add_argument("--dataset")
    _add_dataset_flags(p)
    _add_ontology_flags(p)
    p.add_argument("--include-single-child", action="store_true")
    p.add_argument("--out", help="records JSONL path")
    p.add_argument("--manifest", help="manifest JSON path (default: <out>.manifest.json)")
    p.set_defaults(func=cmd_export_sft)

    p = sub.add_parser("ontology-stats", parents=[common], help="entry counts and branching statistics")
    p.add_argument("--ontology")
    p.add_argument("--json", action="store_true", help="print JSON instead of text")
    p.set_defaults(func=cmd_ontology_stats)

    p = sub.add_parser("analyze-overlap", parents=[common], help="mention/generic-name substring rate")
    p.add_argument("--dataset")
    _add_dataset_flags(p, generic=True)
    p.set_defaults(func=cmd_analyze_overlap)

    return parser


def _load_config(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    config = {}
    for key, value in raw.items():
        dest = key.replace("-", "_")
        if dest.lower() in _SECRET_KEYS:
            raise ConfigError(f"config key {key!r} looks like a secret; pass it via --token-env instead")
        config[dest] = value
    return config


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        config = _load_config(args.config)
        sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        subparser = sub.choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(config) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
        subparser.set_defaults(**config)
        args = parser.parse_args(argv)
    return args


def _mapping(args) -> ColumnMapping:
    return ColumnMapping(args.mention_col, args.gold_col, args.generic_col, args.granularity_col)


def _dataset(args, path: str | None = None) -> LoadedDataset:
    path = path or args.dataset
    if not path:
        raise ConfigError("--dataset is required")
    loaded = load_dataset(path, _mapping(args), strict=not args.lenient)
    if loaded.skipped:
        print(f"skipped {len(loaded.skipped)} invalid row(s) in {path}", file=sys.stderr)
    return loaded


def _ontology(args) -> Ontology:
    if not args.ontology:
        raise ConfigError("--ontology is required")
    return load_ontology(args.ontology)


def _grounding(args) -> tuple[GroundingSetting, DefinitionStore]:
    setting = GroundingSetting.parse(args.grounding)
    if setting is GroundingSetting.WITH_UMLS and not args.definitions:
        raise ConfigError("--grounding with-umls requires --definitions")
    defs = load_definitions(args.definitions) if args.definitions else EMPTY_DEFINITIONS
    return setting, defs


def _read_script(path: str) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        replies = json.loads(text)
        if not all(isinstance(r, str) for r in replies):
            raise ConfigError("script JSON must be a list of strings")
        return replies
    return text.splitlines()


def _backend(args) -> ChatBackend:
    if args.backend == "oracle":
        if not args.gold:
            raise ConfigError("--backend oracle requires --gold")
        gold: dict[str, AtcCode] = {}
        for item in _dataset(args, args.gold):
            prev = gold.get(item.mention)
            if prev is not None and prev != item.gold:
                logger.warning("mention %r has conflicting gold codes %s and %s", item.mention, prev, item.gold)
            gold[item.mention] = item.gold
        return OracleBackend(gold)
    if args.backend == "adversarial":
        if not args.script:
            raise ConfigError("--backend adversarial requires --script")
        return AdversarialBackend(_read_script(args.script), cycle=args.script_cycle)
    if not args.base_url:
        raise ConfigError("--backend http requires --base-url")
    return HttpChatBackend(args.base_url, args.token_env, max_attempts=args.max_attempts,
                           max_in_flight=max(1, args.concurrency))


def _read_mentions(path: str | None) -> list[str]:
    if path is None:
        raise ConfigError("an input mentions file is required")
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def cmd_code(args) -> int:
    if args.concurrency < 1:
        raise ConfigError("--concurrency must be >= 1")
    if args.retries < 0:
        raise ConfigError("--retries must be >= 0")
    ontology = _ontology(args)
    setting, defs = _grounding(args)
    params = GenerationParams(args.temperature, args.seed, args.max_tokens, args.model)
    mentions = _read_mentions(args.input)
    with _backend(args) as backend:
        coder = HierarchicalCoder(ontology, backend, params, setting, defs, args.retries, args.auto_select)
        traces = coder.code_batch(mentions, args.concurrency)

    rows = [json.dumps(t.to_dict(), ensure_ascii=False) + "\n" for t in traces]
    if args.out:
        with atomic_writer(args.out) as fh:
            fh.writelines(rows)
        summary_stream = sys.stdout
    else:
        sys.stdout.writelines(rows)
        summary_stream = sys.stderr
    coded = sum(t.final is not None for t in traces)
    abstained = sum(t.abstained for t in traces)
    errored = sum(t.error is not None for t in traces)
    print(f"mentions={len(traces)} coded={coded} abstained={abstained} errored={errored}", file=summary_stream)
    return 0


def _predictions(path: str) -> dict[str, deque]:
    by_mention: dict[str, deque] = defaultdict(deque)
    for row in read_jsonl(path):
        if "mention" not in row:
            raise ConfigError(f"{path}: prediction rows need a 'mention' field")
        final = row.get("final")
        by_mention[row["mention"].strip()].append(parse_code(final) if final else None)
    return by_mention


def cmd_eval(args) -> int:
    if not args.predictions:
        raise ConfigError("--predictions is required")
    dataset = _dataset(args)
    reports = {}
    for spec in args.predictions:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        preds = _predictions(path)
        pairs = []
        for item in dataset:
            queue = preds.get(item.mention.strip())
            if not queue:
                raise ConfigError(f"{path}: no prediction for mention {item.mention!r}")
            pairs.append((item, queue.popleft()))
        reports[name] = build_report(pairs, min_granularity=args.min_granularity)

    if args.out:
        if len(reports) == 1:
            payload = next(iter(reports.values())).to_dict()
        else:
            payload = {name: r.to_dict() for name, r in reports.items()}
        atomic_write_text(args.out, json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    sys.stdout.write(format_table(reports))
    excluded = {r.n_excluded for r in reports.values()}
    print(f"excluded={'/'.join(str(e) for e in sorted(excluded))}")
    return 0


def cmd_split(args) -> int:
    if not (args.train_out and args.test_out):
        raise ConfigError("--train-out and --test-out are required")
    data = _dataset(args).mentions
    result = stratified_split(data, args.ratio, args.seed)
    atomic_write_text(args.train_out, dataset_to_csv(result.train))
    atomic_write_text(args.test_out, dataset_to_csv(result.test))
    print(f"train={len(result.train)} test={len(result.test)} ratio={args.ratio} seed={args.seed}")
    return 0


def cmd_export_sft(args) -> int:
    if not args.out:
        raise ConfigError("--out is required")
    ontology = _ontology(args)
    setting, defs = _grounding(args)
    data = _dataset(args).mentions
    exported = export_sft(data, ontology, setting, defs, args.include_single_child)
    with atomic_writer(args.out) as fh:
        for rec in exported.records:
            fh.write(rec.to_json() + "\n")
    manifest_path = args.manifest or f"{args.out}.manifest.json"
    write_manifest(
        manifest_path,
        setting=setting,
        ontology=ontology,
        record_count=len(exported.records),
        skipped_count=len(exported.skipped),
        mention_count=len(data),
        include_single_child=args.include_single_child,
    )
    for item in exported.skipped:
        logger.warning("gold %s for %r is not in the ontology; skipped", item.gold, item.mention)
    print(f"records={len(exported.records)} mentions={len(data)} skipped={len(exported.skipped)}")
    return 0


def cmd_ontology_stats(args) -> int:
    ontology = _ontology(args)
    stats = ontology.option_stats()
    payload = {
        "entries": len(ontology),
        "roots": len(ontology.roots),
        "per_level": ontology.level_counts(),
        "mean_branching": stats.mean_branching,
        "max_branching": stats.max_branching,
        "fingerprint": ontology.fingerprint(),
    }
    if args.json:
        print(json.dumps(payload, indent=2))
        return 0
    print(f"entries: {payload['entries']}")
    print(f"roots: {payload['roots']}")
    for level, n in payload["per_level"].items():
        print(f"level {level}: {n}")
    print(f"mean options per node: {stats.mean_branching:.2f}")
    print(f"max options per node: {stats.max_branching}")
    return 0


def cmd_analyze_overlap(args) -> int:
    if not args.generic_col:
        raise ConfigError("--generic-col is required")
    data = _dataset(args).mentions
    rate = substring_overlap_rate(data)
    eligible = sum(1 for it in data if it.generic_name)
    print(f"substring_overlap_rate={rate:.4f} ({rate * 100:.1f}%) eligible={eligible}")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"atc-coder: config error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"atc-coder: config error: {exc}", file=sys.stderr)
        return 2
    except (AtcError, OSError, ValueError) as exc:
        print(f"atc-coder: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
