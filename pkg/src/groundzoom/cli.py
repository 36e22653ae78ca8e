"""Command-line entry point.

Exit codes: 0 success, 1 partial rollout failure, 2 configuration or input
error, 3 training aborted on non-finite values, 4 every rollout episode
failed at the transport layer.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import JoinError
from .llm_client import EpisodeConfig, run_batch
from .metrics import (
    DEFAULT_WINDOW,
    curves_from_stats,
    curves_to_csv,
    curves_to_wide_csv,
    load_golds,
    score_benchmark,
    zoom_distribution,
    zoom_to_csv,
)
from .reward import GoldAnswer, QuestionType, RewardConfig, RewardMode, total_reward
from .toylab import ToyConfig, TrainingAborted, train
from .trace import parse_trace

log = logging.getLogger("groundzoom")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_NONFINITE, EXIT_TRANSPORT = 0, 1, 2, 3, 4

MODES = ("ground-r1", "ground-r1-bbox", "ground-r1-kl", "vanilla-r1")

# flag dest -> ToyConfig field
_TOY_FLAGS = {"steps": "steps", "batch": "batch", "g1": "G1", "g2": "G2", "epsilon": "epsilon",
              "kl_coef": "kl_coef", "mode": "mode", "lr": "lr", "k": "K", "v": "V",
              "combine": "combine_ground_reward", "alpha": "alpha"}


class ConfigError(Exception):
    pass


def _read_jsonl(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
            if not isinstance(rows[-1], dict):
                raise ConfigError(f"{path}:{n}: expected an object")
    return rows


def _write(out_dir, name, text) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    return name


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    # a run manifest carries its resolved configuration under "config"
    return data.get("config", data)


def write_manifest(out_dir, command, config, seed, artifacts) -> str:
    manifest = {"command": command, "config": config, "seed": seed,
                "artifacts": artifacts, "version": __version__}
    return _write(out_dir, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_train_toy(args) -> int:
    file_cfg = _load_config_file(args.config)
    fields = {f.name for f in dataclasses.fields(ToyConfig)}
    unknown = set(file_cfg) - fields - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    resolved = {k: v for k, v in file_cfg.items() if k in fields}
    for flag, name in _TOY_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            resolved[name] = value
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    try:
        cfg = ToyConfig(**resolved)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    os.makedirs(args.out_dir, exist_ok=True)
    snapshot = dict(cfg.to_dict(), seed=seed)
    status = EXIT_OK
    try:
        result = train(cfg, seed)
    except TrainingAborted as exc:
        log.error("training aborted: %s", exc)
        result = exc.result
        status = EXIT_NONFINITE
    stats = [s.to_dict() for s in result.stats]
    artifacts = {"stats": _write(args.out_dir, "stats.jsonl", _jsonl(stats))}
    buf = io.StringIO()
    if stats:
        w = csv.DictWriter(buf, fieldnames=list(stats[0]), lineterminator="\n")
        w.writeheader()
        w.writerows({k: repr(v) if isinstance(v, float) else v for k, v in row.items()} for row in stats)
    artifacts["stats_csv"] = _write(args.out_dir, "stats.csv", buf.getvalue())
    np.savez(os.path.join(args.out_dir, "params.npz"),
             **{f: getattr(result.params, f) for f in result.params.FIELDS})
    artifacts["params"] = "params.npz"
    summary = {"final": result.final, "steps_to_threshold": result.steps_to_threshold,
               "aborted": status == EXIT_NONFINITE,
               "trajectories_per_task": cfg.G1 * cfg.G2}
    artifacts["summary"] = _write(args.out_dir, "summary.json",
                                  json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out_dir, "train-toy", snapshot, seed, artifacts)
    if status == EXIT_OK:
        log.info("final %s", json.dumps(result.final, sort_keys=True))
    return status


def _reward_mode(name) -> RewardMode:
    return RewardMode.GROUND_R1 if name == "ground-r1-kl" else RewardMode(name)


def cmd_score_trace(args) -> int:
    if not os.path.exists(args.input):
        raise ConfigError(f"input file not found: {args.input}")
    rows = _read_jsonl(args.input)
    out = []
    for n, row in enumerate(rows, 1):
        try:
            gold = row["gold"]
            if isinstance(gold, str):
                gold = {"text": gold}
            gold = GoldAnswer.from_dict(gold)
            cfg = RewardConfig.for_mode(_reward_mode(row.get("mode", args.mode)),
                                        question_type=QuestionType(row.get("question_type", args.question_type)))
            text = row["trace"]
            if not isinstance(text, str):
                raise TypeError("trace must be a string")
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{args.input}:{n}: bad record ({exc})") from None
        br = total_reward(parse_trace(text), gold, cfg)
        out.append(dict(br.to_dict(), index=n - 1, sample_id=row.get("sample_id"), mode=cfg.mode.value))
    os.makedirs(args.out_dir, exist_ok=True)
    artifacts = {"scores": _write(args.out_dir, "scores.jsonl", _jsonl(out))}
    write_manifest(args.out_dir, "score-trace",
                   {"input": os.path.abspath(args.input), "mode": args.mode,
                    "question_type": args.question_type}, None, artifacts)
    return EXIT_OK


def cmd_rollout(args) -> int:
    if not args.endpoint:
        raise ConfigError("--endpoint is required")
    if not os.path.exists(args.input):
        raise ConfigError(f"input file not found: {args.input}")
    samples = _read_jsonl(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    try:
        cfg = EpisodeConfig(endpoint=args.endpoint, model_name=args.model, max_rounds=args.max_rounds,
                            temperature=args.temperature, max_tokens=args.max_tokens,
                            timeout_ms=args.timeout_ms, retry_limit=args.retries,
                            keep_prior_crops=not args.drop_prior_crops,
                            crop_dir=os.path.join(args.out_dir, "crops"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.parallelism < 1:
        raise ConfigError("--parallelism must be >= 1")
    base = os.path.dirname(os.path.abspath(args.input))
    for s in samples:
        if "image_path" in s and not os.path.isabs(s["image_path"]):
            s["image_path"] = os.path.join(base, s["image_path"])

    n_failed = n_transport = n = 0
    path = os.path.join(args.out_dir, "records.jsonl")
    with open(path, "w", encoding="utf-8") as f:
        for rec in run_batch(cfg, samples, args.parallelism):
            n += 1
            n_failed += rec.error is not None
            n_transport += rec.transport_failed
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    snapshot = {k: v for k, v in dataclasses.asdict(cfg).items()}
    snapshot["prompt_mode"] = cfg.prompt_mode.value
    snapshot["crop_dir"] = "crops"
    snapshot.update(parallelism=args.parallelism, input=os.path.abspath(args.input))
    write_manifest(args.out_dir, "rollout", snapshot, None, {"records": "records.jsonl", "crops": "crops"})
    log.info("%d records, %d failed (%d transport)", n, n_failed, n_transport)
    if n and n_transport == n:
        return EXIT_TRANSPORT
    return EXIT_PARTIAL if n_failed else EXIT_OK


def _require(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"{what} file not found: {path}")


def cmd_report(args) -> int:
    if args.window < 1:
        raise ConfigError("--window must be >= 1")
    if not args.stats and not args.records:
        raise ConfigError("report needs --stats and/or --records")
    for p, what in ((args.stats, "stats"), (args.records, "records"), (args.golds, "golds")):
        if p:
            _require(p, what)
    os.makedirs(args.out_dir, exist_ok=True)
    artifacts = {}
    if args.stats:
        series = curves_from_stats(_read_jsonl(args.stats), args.window)
        artifacts["curves"] = _write(args.out_dir, "curves.csv", curves_to_csv(series))
    if args.records:
        records = _read_jsonl(args.records)
        artifacts["zoom_histogram"] = _write(args.out_dir, "zoom_histogram.csv",
                                             zoom_to_csv(zoom_distribution(records)))
        if args.golds:
            try:
                golds = load_golds(_read_jsonl(args.golds))
                summary = score_benchmark(records, golds)
            except (KeyError, ValueError) as exc:
                if isinstance(exc, JoinError):
                    raise ConfigError(str(exc)) from None
                raise ConfigError(f"bad golds file: {exc}") from None
            artifacts["benchmark"] = _write(args.out_dir, "benchmark.json",
                                            json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out_dir, "report", {"stats": args.stats, "records": args.records,
                                            "golds": args.golds, "window": args.window}, None, artifacts)
    return EXIT_OK


def cmd_emit_plot_data(args) -> int:
    if args.window < 1:
        raise ConfigError("--window must be >= 1")
    _require(args.stats, "stats")
    os.makedirs(args.out_dir, exist_ok=True)
    series = curves_from_stats(_read_jsonl(args.stats), args.window)
    artifacts = {"plot_data": _write(args.out_dir, "plot_data.csv", curves_to_wide_csv(series))}
    write_manifest(args.out_dir, "emit-plot-data", {"stats": args.stats, "window": args.window},
                   None, artifacts)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="groundzoom", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train-toy", help="train the tabular policy on the synthetic grounded-VQA task")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--g1", type=int)
    t.add_argument("--g2", type=int)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--kl-coef", type=float)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--lr", type=float)
    t.add_argument("--k", type=int, help="grid side length")
    t.add_argument("--v", type=int, help="symbol vocabulary size")
    t.add_argument("--combine", choices=("sum", "answer_only"))
    t.add_argument("--alpha", type=float)
    t.add_argument("--config", help="JSON config or a previous run's manifest.json")
    t.add_argument("--out-dir", default="out/train-toy")
    t.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("score-trace", help="score raw traces against gold answers")
    s.add_argument("--input", required=True)
    s.add_argument("--mode", choices=MODES, default="ground-r1")
    s.add_argument("--question-type", choices=[q.value for q in QuestionType], default="multiple_choice")
    s.add_argument("--out-dir", default="out/score-trace")
    s.set_defaults(func=cmd_score_trace)

    r = sub.add_parser("rollout", help="run zoom-in episodes against a chat-completions endpoint")
    r.add_argument("--endpoint")
    r.add_argument("--input", required=True)
    r.add_argument("--model", default="default")
    r.add_argument("--max-rounds", type=int, default=5)
    r.add_argument("--temperature", type=float, default=1.0)
    r.add_argument("--max-tokens", type=int, default=512)
    r.add_argument("--parallelism", type=int, default=4)
    r.add_argument("--timeout-ms", type=int, default=30000)
    r.add_argument("--retries", type=int, default=2)
    r.add_argument("--drop-prior-crops", action="store_true")
    r.add_argument("--out-dir", default="out/rollout")
    r.set_defaults(func=cmd_rollout)

    rp = sub.add_parser("report", help="training curves, zoom histogram and benchmark accuracy")
    rp.add_argument("--stats")
    rp.add_argument("--records")
    rp.add_argument("--golds", help="sample file with gold answers for --records")
    rp.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    rp.add_argument("--out-dir", default="out/report")
    rp.set_defaults(func=cmd_report)

    e = sub.add_parser("emit-plot-data", help="wide per-step CSV of the smoothed training curves")
    e.add_argument("--stats", required=True)
    e.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    e.add_argument("--out-dir", default="out/plot-data")
    e.set_defaults(func=cmd_emit_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"groundzoom: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
