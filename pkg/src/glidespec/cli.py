"""Command-line entry point: ``glidespec <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import checks
from .bench import ExperimentConfig, report_json, run_experiment, sweep, train_from_config
from .errors import ContractError
from .model import GlideDraft, TargetModel, load_checkpoint
from .speculation import SpeculationConfig, trace_line
from .training import generate_corpus, write_corpus
from .verification import GREEDY, SAMPLING, decode_session


def _read_prompt(path) -> list[int]:
    text = Path(path).read_text().replace(",", " ").split()
    if not text:
        raise ContractError(f"prompt file {path} is empty")
    return [int(t) for t in text]


def cmd_train(args) -> int:
    summary = train_from_config(ExperimentConfig.from_file(args.config))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_decode(args) -> int:
    target, draft = load_checkpoint(args.target), load_checkpoint(args.draft)
    if not isinstance(target, TargetModel) or not isinstance(draft, GlideDraft):
        raise ContractError("--target must be a target checkpoint and --draft a draft checkpoint")
    cfg = SpeculationConfig(gamma=args.gamma, max_verify_tokens=args.max_verify_tokens)
    result = decode_session(_read_prompt(args.prompt_file), draft, target, args.strategy, cfg,
                            max_new=args.max_new, cape=args.cape == "on", seed=args.seed,
                            eos=args.eos)
    if args.trace:
        with open(args.trace, "w") as fh:
            for rec in result.trace:
                fh.write(trace_line(rec) + "\n")
    print(" ".join(map(str, result.generated)))
    print(f"rounds={result.rounds} tokens_per_step={result.tokens_per_step:.4f}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    report = run_experiment(cfg, args.out)
    if args.out is None:
        sys.stdout.write(report_json(report))
    agg = report["aggregate"]
    lossless = agg.get("lossless")
    print(f"alpha={report['alpha']:.4f} cost={report['cost']:.4f} "
          f"tokens/step={agg['empirical_tokens_per_step']['mean']:.4f} lossless={lossless}",
          file=sys.stderr)
    return 0 if lossless in (True, None) else 1


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    values = [int(v) for v in args.values.split(",") if v.strip()]
    rows = sweep(cfg, args.axis, values)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=["value", "alpha", "cost", "expected_speedup", "error"])
        w.writeheader()
        for row in rows:
            w.writerow(asdict(row))
    finally:
        if args.out:
            out.close()
    return 0


def cmd_gen_corpus(args) -> int:
    seqs = generate_corpus(args.kind, args.vocab, args.len, args.count, args.seed)
    write_corpus(args.out, seqs, args.vocab)
    print(f"wrote {args.count} sequences of length {args.len} to {args.out}", file=sys.stderr)
    return 0


def cmd_check(args) -> int:
    results = []
    if args.table1:
        results += checks.check_table1()
    if args.masks:
        results += checks.check_masks(n_cases=args.mask_cases)
    if args.lossless:
        results += checks.check_lossless(n_instances=args.instances)
    for r in results:
        print(r.line())
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glidespec", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train the target (if needed) and the drafters")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("decode", help="speculative decoding from checkpoints")
    s.add_argument("--target", required=True)
    s.add_argument("--draft", required=True)
    s.add_argument("--strategy", choices=[GREEDY, SAMPLING], default=GREEDY)
    s.add_argument("--cape", choices=["on", "off"], default="off")
    s.add_argument("--gamma", type=int, default=5)
    s.add_argument("--max-verify-tokens", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prompt-file", required=True, help="whitespace-separated token ids")
    s.add_argument("--max-new", type=int, default=32)
    s.add_argument("--eos", type=int, default=None)
    s.add_argument("--trace", default=None, help="write one JSON line per round")
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("bench", help="run an experiment and write a JSON report")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("sweep", help="grid over one architecture or decoding axis")
    s.add_argument("--axis", required=True, choices=["n_layers", "d_D", "gamma"])
    s.add_argument("--values", required=True, help="comma-separated integers")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="CSV output (default stdout)")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("gen-corpus", help="write a synthetic corpus file")
    s.add_argument("--kind", choices=["markov2", "grammar"], required=True)
    s.add_argument("--vocab", type=int, required=True)
    s.add_argument("--len", type=int, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_corpus)

    s = sub.add_parser("check", help="formula regression, mask oracles and losslessness")
    s.add_argument("--table1", action="store_true",
                   help="published speedup triples plus the mask and losslessness suites")
    s.add_argument("--mask-cases", type=int, default=1000)
    s.add_argument("--instances", type=int, default=20)
    s.set_defaults(fn=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "check":
        if not args.table1:
            build_parser().error("check needs --table1")
        args.masks = args.lossless = True
    try:
        return args.fn(args)
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
