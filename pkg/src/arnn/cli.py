"""Command-line front door: preprocess, synth, train, evaluate, recommend.

Every command resolves its configuration (file plus flag overrides) and
validates it fully before touching the filesystem.  Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import tensor as T
from .config import REQUIRED, parse_config_file, resolve
from .data import SessionDataset, preprocess, read_events
from .errors import (
    ConfigError,
    DataError,
    NumericError,
    VocabularyError,
)
from .evaluate import EvalReport, build_itemknn, evaluate_system, top_k_items
from .models import ArnnModel, GruSessionModel, PnnEncoder, load_checkpoint
from .synth import GeneratorSpec, generate, write_events, write_truth
from .training import STAGES, history_tsv, make_plan, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _resolved(args, known: dict) -> dict:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in known}
    return resolve(known, file_values, overrides)


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    known = {
        "input": (str, REQUIRED),
        "out": (str, REQUIRED),
        "gap_threshold_seconds": (float, 3600.0),
        "item_coverage": (float, 0.5),
        "category_coverage": (float, 0.75),
        "test_window_days": (float, 3.0),
    }
    cfg = _resolved(args, known)
    if not os.path.exists(cfg["input"]):
        raise DataError(f"input file not found: {cfg['input']}")
    events = read_events(cfg["input"])
    train, test, summary = preprocess(
        events,
        gap_threshold=cfg["gap_threshold_seconds"],
        item_coverage=cfg["item_coverage"],
        category_coverage=cfg["category_coverage"],
        test_window=cfg["test_window_days"] * 86400.0,
    )
    os.makedirs(cfg["out"], exist_ok=True)
    train.save(os.path.join(cfg["out"], "train.json"))
    test.save(os.path.join(cfg["out"], "test.json"))
    text = "\n".join(summary.lines()) + "\n"
    with open(os.path.join(cfg["out"], "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    known = {
        "out": (str, REQUIRED),
        "sessions": (int, 2000),
        "items": (int, 60),
        "fields": (int, 6),
        "seed": (int, 0),
        "context_mode": (str, "informative"),
    }
    cfg = _resolved(args, known)
    if cfg["context_mode"] not in ("informative", "random"):
        raise ConfigError(
            f"context_mode must be 'informative' or 'random', got {cfg['context_mode']!r}"
        )
    spec = GeneratorSpec(
        n_sessions=cfg["sessions"], n_items=cfg["items"], n_fields=cfg["fields"],
        informative=cfg["context_mode"] == "informative", seed=cfg["seed"],
    )
    events, truth = generate(spec)
    os.makedirs(cfg["out"], exist_ok=True)
    write_events(events, os.path.join(cfg["out"], "events.tsv"), truth["field_names"])
    write_truth(truth, os.path.join(cfg["out"], "truth.json"))
    c = truth["counts"]
    print(f"wrote {c['n_transactions']} events over {c['n_sessions']} sessions "
          f"({c['n_items']} items) to {cfg['out']}")
    return EXIT_OK


def cmd_train(args) -> int:
    known = {
        "stage": (str, REQUIRED),
        "data": (str, REQUIRED),
        "out": (str, REQUIRED),
        "profile": (str, "synth"),
        "seed": (int, 0),
        "epochs": (int, None),
        "gru_checkpoint": (str, None),
        "pnn_checkpoint": (str, None),
    }
    cfg = _resolved(args, known)
    if cfg["stage"] not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}, got {cfg['stage']!r}")
    overrides = {}
    if cfg["epochs"] is not None:
        overrides["epochs"] = cfg["epochs"]
    plan = make_plan(cfg["stage"], cfg["profile"], cfg["seed"], **overrides)
    if not os.path.exists(cfg["data"]):
        raise DataError(f"dataset not found: {cfg['data']}")
    dataset = SessionDataset.load(cfg["data"])
    gru_ckpt = cfg["gru_checkpoint"] or os.path.join(cfg["out"], "gru.npz")
    pnn_ckpt = cfg["pnn_checkpoint"] or os.path.join(cfg["out"], "pnn.npz")
    result = run_stage(plan, dataset, cfg["out"],
                       gru_checkpoint=gru_ckpt, pnn_checkpoint=pnn_ckpt)
    history_path = os.path.join(cfg["out"], f"{cfg['stage']}_history.tsv")
    with open(history_path, "w", encoding="utf-8") as fh:
        fh.write(history_tsv(result.history, k=plan.eval_k))
    print(f"stage {cfg['stage']}: checkpoint {result.checkpoint_path}, "
          f"best validation recall@{plan.eval_k} "
          f"{result.best_recall if result.history else float('nan'):.4f}")
    return EXIT_OK


def _load_system(name: str, checkpoint_dir: str, schema_hash: str, train_data):
    if name == "itemknn":
        return build_itemknn(train_data)
    kind = {"gru": "gru", "pnn": "pnn", "arnn": "arnn"}.get(name)
    if kind is None:
        raise ConfigError(f"unknown system {name!r}")
    path = os.path.join(checkpoint_dir, "merge.npz" if kind == "arnn"
                        else f"{kind}.npz")
    if not os.path.exists(path):
        raise DataError(f"checkpoint for system {name!r} not found: {path}")
    return load_checkpoint(path, schema_hash, kind)


def cmd_evaluate(args) -> int:
    known = {
        "data": (str, REQUIRED),
        "train_data": (str, None),
        "checkpoints": (str, None),
        "systems": (str, "itemknn,gru,pnn,arnn"),
        "k": (int, 20),
        "out": (str, None),
    }
    cfg = _resolved(args, known)
    systems = [s.strip() for s in cfg["systems"].split(",") if s.strip()]
    if not systems:
        raise ConfigError("no systems requested")
    for name in systems:
        if name not in ("itemknn", "gru", "pnn", "arnn"):
            raise ConfigError(f"unknown system {name!r}")
    if "itemknn" in systems and not cfg["train_data"]:
        raise ConfigError("system 'itemknn' needs --train-data")
    if any(s != "itemknn" for s in systems) and not cfg["checkpoints"]:
        raise ConfigError("model systems need --checkpoints")
    if not os.path.exists(cfg["data"]):
        raise DataError(f"dataset not found: {cfg['data']}")
    test = SessionDataset.load(cfg["data"])
    train = SessionDataset.load(cfg["train_data"]) if cfg["train_data"] else None
    rows = []
    for name in systems:
        system = _load_system(name, cfg["checkpoints"], test.schema.hash(), train)
        rows.append(evaluate_system(system, test, k=cfg["k"], name=name))
    report = EvalReport(rows)
    print(report.format_table())
    if cfg["out"]:
        os.makedirs(os.path.dirname(cfg["out"]) or ".", exist_ok=True)
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            fh.write(report.to_tsv())
    return EXIT_OK


def _parse_attrs(text: str) -> dict[str, list[str]]:
    attrs: dict[str, list[str]] = {}
    if not text:
        return attrs
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"attributes must be field=value pairs, got {part!r}")
        name, _, value = part.partition("=")
        attrs[name.strip()] = [v for v in value.strip().split("|") if v]
    return attrs


def cmd_recommend(args) -> int:
    known = {
        "checkpoint": (str, REQUIRED),
        "data": (str, REQUIRED),
        "items": (str, REQUIRED),
        "attrs": (str, ""),
        "k": (int, 10),
    }
    cfg = _resolved(args, known)
    if not os.path.exists(cfg["data"]):
        raise DataError(f"dataset not found: {cfg['data']}")
    dataset = SessionDataset.load(cfg["data"])
    schema = dataset.schema
    model = load_checkpoint(cfg["checkpoint"], schema.hash())
    item_ids = [s.strip() for s in cfg["items"].split(",") if s.strip()]
    if not item_ids:
        raise ConfigError("need at least one item in the session prefix")
    unknown = [i for i in item_ids if i not in set(schema.item_vocabulary)]
    if unknown:
        raise VocabularyError(f"items not in the vocabulary: {', '.join(unknown)}")
    indices = [schema.item_index(i) for i in item_ids]
    context = schema.encode(_parse_attrs(cfg["attrs"]))

    if isinstance(model, PnnEncoder):
        c = model.encode([context], [indices[-1]], training=False)
        logits = model.scores(c)
    elif isinstance(model, GruSessionModel):
        model.reset(1)
        for step, item in enumerate(indices):
            h = model.step([item], boundaries=[step == 0])
        logits = model.scores(h)
    elif isinstance(model, ArnnModel):
        model.reset(1)
        for step, item in enumerate(indices):
            logits = model.step_scores([item], [context], boundaries=[step == 0])
    else:
        raise ConfigError(f"cannot recommend from a {type(model).__name__}")
    probs = T.softmax(logits).data[0]
    k = min(cfg["k"], len(schema.item_vocabulary))
    for rank, idx in enumerate(top_k_items(probs, k), start=1):
        print(f"{rank}\t{schema.item_vocabulary[int(idx)]}\t{probs[int(idx)]:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arnn",
        description="Session recommender: context-augmented recurrent model tooling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="events file -> train/test datasets")
    p.add_argument("--config")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--gap-threshold-seconds", dest="gap_threshold_seconds", type=float)
    p.add_argument("--item-coverage", dest="item_coverage", type=float)
    p.add_argument("--category-coverage", dest="category_coverage", type=float)
    p.add_argument("--test-window-days", dest="test_window_days", type=float)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate synthetic context-dependent sessions")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--sessions", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--fields", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--context-mode", dest="context_mode",
                   choices=["informative", "random"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one stage (gru, pnn, or merge)")
    p.add_argument("--config")
    p.add_argument("--stage", choices=list(STAGES))
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--profile", choices=["xing", "tmall", "synth"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--gru-checkpoint", dest="gru_checkpoint")
    p.add_argument("--pnn-checkpoint", dest="pnn_checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score systems on a test dataset")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--checkpoints")
    p.add_argument("--systems")
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-k next items for a session prefix")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--items")
    p.add_argument("--attrs")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_recommend)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
