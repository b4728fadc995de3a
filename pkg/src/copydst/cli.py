"""Command line entry point: synth | prepare | train | predict | track | evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import fields
from pathlib import Path

from .corpus import DEFAULT_MAX_LEN, Corpus, CorpusError, build_input, load_corpus, prepare_corpus, save_corpus
from .eval import aggregate, evaluate, train_value_counts
from .ontology import Ontology, SchemaError, default_ontology, load_ontology
from .predictions import PredictionBundle
from .tokenizer import Tokenizer
from .tracker import DialogState, apply_turn, states_to_records

log = logging.getLogger("copydst")

PRED_FORMAT = "copydst-predictions/1"


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("DST_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CLIError(f"DST_SEED must be an integer, got {env!r}") from None


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).resolve().parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(output: str | Path, command: str, config: dict, seed: int | None,
                   inputs: dict, outputs: dict, started: float, extra: dict | None = None) -> Path:
    path = Path(str(output) + ".manifest.json")
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "git_describe": _git_describe(),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _ontology(args) -> Ontology:
    if getattr(args, "ontology", None):
        return load_ontology(_existing(args.ontology, "ontology"))
    return default_ontology()


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} file not found: {p}")
    return p


def _load(path, ontology: Ontology, what: str) -> Corpus:
    return load_corpus(_existing(path, what), ontology)


def _write_jsonl(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path, what: str) -> list[dict]:
    out = []
    with open(_existing(path, what)) as f:
        for i, line in enumerate(f, start=1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise CLIError(f"{path}:{i}: invalid JSON ({e.msg})") from None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    from .synth import SynthSpec, load_templates, synth_corpus, synth_oov_split

    t0 = time.perf_counter()
    ont = _ontology(args)
    seed = _seed(args)
    tpl = load_templates(_existing(args.templates, "templates")) if args.templates else None
    if args.oov_from:
        base = _load(args.oov_from, ont, "base corpus")
        corpus, rep = synth_oov_split(base, ont, seed, tpl)
    else:
        spec = SynthSpec(n_dialogs=args.dialogs, seed=seed, split=args.split, refer=not args.no_refer)
        corpus, rep = synth_corpus(spec, ont, tpl)
    report = rep.to_json()
    save_corpus(corpus, args.output)
    write_manifest(args.output, "synth", {"dialogs": args.dialogs, "split": corpus.split, "no_refer": args.no_refer},
                   seed, {"oov_from": args.oov_from, "templates": args.templates}, {"corpus": args.output}, t0,
                   {"report": report})
    log.info("wrote %d dialogs to %s", len(corpus), args.output)


def cmd_prepare(args) -> None:
    t0 = time.perf_counter()
    ont = _ontology(args)
    corpus = _load(args.input, ont, "input corpus")
    out, report = prepare_corpus(corpus, ont, args.max_len, single_copy=args.single_copy)
    save_corpus(out, args.output)
    rep = report.to_json()
    write_manifest(args.output, "prepare", {"max_len": args.max_len, "single_copy": args.single_copy}, None,
                   {"corpus": args.input}, {"corpus": args.output}, t0, {"report": rep})
    if report.downgraded:
        log.warning("%d span labels not found in the input and downgraded to none", len(report.downgraded))


_OVERRIDES = {
    "lr": "lr", "epochs": "epochs", "batch_size": "batch_size", "dropout": "dropout", "max_len": "max_len",
    "slot_value_dropout": "slot_value_dropout", "d_model": "d_model", "n_layers": "n_layers",
    "patience": "patience",
}


def train_config(args):
    from .model.config import TrainConfig

    obj: dict = {}
    data: dict = {}
    if args.config:
        with open(_existing(args.config, "config")) as f:
            obj = json.load(f)
        for key in ("train", "dev", "ontology"):
            if key in obj:
                data[key] = obj.pop(key)
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            obj[key] = v
    if args.seed is not None or "seed" not in obj:
        obj["seed"] = _seed(args)
    for flag, key, val in (("no_history", "use_history", False), ("no_aux", "use_aux", False),
                           ("no_masking", "mask_history", False), ("single_copy", "single_copy", True)):
        if getattr(args, flag, False):
            obj[key] = val
    known = {f.name for f in fields(TrainConfig)}
    bad = sorted(set(obj) - known)
    if bad:
        raise CLIError(f"unknown config keys: {bad}")
    return TrainConfig.from_json(obj), data


def cmd_train(args) -> None:
    from .model.checkpoint import save_checkpoint
    from .model.train import train

    t0 = time.perf_counter()
    cfg, data = train_config(args)
    if data.get("ontology") and not args.ontology:
        args.ontology = data["ontology"]
    ont = _ontology(args)
    train_path = args.train or data.get("train")
    dev_path = args.dev or data.get("dev")
    if not train_path:
        raise CLIError("train split missing: pass --train or set 'train' in the config")
    if not dev_path:
        raise CLIError("dev split missing: pass --dev or set 'dev' in the config (needed for early stopping)")
    tr = _load(train_path, ont, "train split")
    dv = _load(dev_path, ont, "dev split")
    if not dv.dialogs:
        raise CLIError(f"dev split {dev_path} has no dialogs")
    result = train(tr, dv, ont, cfg, on_epoch=lambda r: log.info("epoch %(epoch)d loss %(loss).4f dev_jga %(dev_jga).4f", r))
    save_checkpoint(result.model, args.output, {"history": result.history, "best_epoch": result.best_epoch})
    write_manifest(args.output, "train", result.model.cfg.to_json(), cfg.seed,
                   {"train": str(train_path), "dev": str(dev_path)}, {"model": args.output}, t0,
                   {"history": result.history, "best_epoch": result.best_epoch,
                    "best_dev_jga": result.best_dev_jga, "downgraded": len(result.label_report.downgraded)})


def cmd_predict(args) -> None:
    from .model.checkpoint import load_checkpoint
    from .model.train import predict_corpus

    t0 = time.perf_counter()
    model, _ = load_checkpoint(_existing(args.model, "model"))
    ont = model.ontology
    corpus = _load(args.input, ont, "input corpus")
    out = predict_corpus(model, corpus)
    c = model.cfg
    header = {"format": PRED_FORMAT, "max_len": c.max_len, "use_history": c.use_history,
              "mask_history": c.mask_history, "vocab": model.vocab}
    records = [header]
    for d in corpus.dialogs:
        for t, pb in enumerate(out.bundles[d.dialog_id], start=1):
            records.append({"dialog_id": d.dialog_id, "turn": t, "slots": pb.to_record(ont)})
    _write_jsonl(args.output, records)
    write_manifest(args.output, "predict", c.to_json(), c.seed, {"model": args.model, "corpus": args.input},
                   {"predictions": args.output}, t0)


def cmd_track(args) -> None:
    t0 = time.perf_counter()
    ont = _ontology(args)
    corpus = _load(args.input, ont, "input corpus")
    if args.oracle:
        from .oracle import oracle_track

        tracked = oracle_track(corpus, ont)
        out = [r for d in corpus.dialogs for r in states_to_records(d.dialog_id, tracked[d.dialog_id])]
    else:
        if not args.predictions:
            raise CLIError("track needs --predictions or --oracle")
        out = _track_predictions(corpus, ont, args.predictions)
    _write_jsonl(args.output, out)
    write_manifest(args.output, "track", {"oracle": args.oracle}, None,
                   {"corpus": args.input, "predictions": args.predictions}, {"states": args.output}, t0)


def _track_predictions(corpus: Corpus, ont: Ontology, path) -> list[dict]:
    recs = _read_jsonl(path, "predictions")
    if not recs or recs[0].get("format") != PRED_FORMAT:
        raise CLIError(f"{path}: missing predictions header record")
    header, rows = recs[0], recs[1:]
    by_key = {(r["dialog_id"], r["turn"]): r["slots"] for r in rows}
    tok = Tokenizer(header["vocab"]) if header.get("vocab") else None
    out = []
    for d in corpus.dialogs:
        ds = DialogState()
        states = []
        for t, turn in enumerate(d.turns):
            key = (d.dialog_id, t + 1)
            if key not in by_key:
                raise CLIError(f"{path}: no prediction for dialog {d.dialog_id!r} turn {t + 1}")
            inp = build_input(turn, d.history(t), header["max_len"], header["mask_history"], tok, header["use_history"])
            pb = PredictionBundle.from_record(by_key[key], ont, len(inp))
            ds = apply_turn(ds, turn, pb, inp, ont)
            states.append(ds)
        out.extend(states_to_records(d.dialog_id, states))
    return out


def _read_states(path, gold: Corpus) -> dict[str, list[DialogState]]:
    pred: dict[str, list] = {d.dialog_id: [] for d in gold.dialogs}
    for r in _read_jsonl(path, "predicted states"):
        if r["dialog_id"] in pred:
            pred[r["dialog_id"]].append((r["turn"], DialogState(r["state"])))
    states = {}
    for d in gold.dialogs:
        got = [s for _, s in sorted(pred[d.dialog_id], key=lambda x: x[0])]
        if len(got) != len(d.turns):
            raise CLIError(f"{path}: dialog {d.dialog_id!r} has {len(got)} predicted states for {len(d.turns)} turns")
        states[d.dialog_id] = got
    return states


def _read_gates(path, gold: Corpus) -> dict[str, list[dict]]:
    gates: dict[str, list] = {d.dialog_id: [] for d in gold.dialogs}
    for r in _read_jsonl(path, "predictions")[1:]:
        if r["dialog_id"] in gates:
            gates[r["dialog_id"]].append((r["turn"], {s: v["gate"] for s, v in r["slots"].items()}))
    return {k: [g for _, g in sorted(v, key=lambda x: x[0])] for k, v in gates.items()}


def cmd_evaluate(args) -> None:
    t0 = time.perf_counter()
    ont = _ontology(args)
    gold = _load(args.gold, ont, "gold corpus")
    preds = args.pred
    gate_files = args.predictions or []
    if gate_files and len(gate_files) != len(preds):
        raise CLIError("--predictions needs one file per --pred file")
    seeds = args.seeds.split(",") if args.seeds else [str(i) for i in range(len(preds))]
    if len(seeds) != len(preds):
        raise CLIError(f"--seeds lists {len(seeds)} seeds for {len(preds)} --pred files")
    counts = train_value_counts(_load(args.train, ont, "train split"), ont, args.count_per_slot) if args.train else None
    reports = {}
    for k, path in enumerate(preds):
        gates = _read_gates(gate_files[k], gold) if gate_files else None
        reports[seeds[k]] = evaluate(_read_states(path, gold), gold, ont, gates, counts)
    report = reports[seeds[0]] if len(preds) == 1 else aggregate(reports)
    text = json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
        write_manifest(args.output, "evaluate", {"seeds": seeds, "count_per_slot": args.count_per_slot}, None,
                       {"gold": args.gold, "pred": preds, "predictions": gate_files, "train": args.train},
                       {"report": args.output}, t0)
    sys.stdout.write(report.table())


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="copydst", description=__doc__)
    p.add_argument("--log-level", default="INFO")
    p.add_argument("--jobs", type=int, default=1, help="bound on intra-command parallelism")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False):
        sp.add_argument("--ontology", help="ontology JSON (default: the shipped one)")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="random seed (fallback: $DST_SEED, then 0)")

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    common(s, seed=True)
    s.add_argument("--dialogs", type=int, default=200)
    s.add_argument("--split", default="train")
    s.add_argument("--no-refer", action="store_true")
    s.add_argument("--oov-from", help="derive an OOV split from this corpus instead")
    s.add_argument("--templates", help="template JSON (default: the shipped one)")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="fill gold gates and span labels")
    common(s)
    s.add_argument("--input", required=True)
    s.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
    s.add_argument("--single-copy", action="store_true")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train the tracker")
    common(s, seed=True)
    s.add_argument("--config")
    s.add_argument("--train")
    s.add_argument("--dev")
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--dropout", type=float)
    s.add_argument("--max-len", type=int)
    s.add_argument("--slot-value-dropout", type=float)
    s.add_argument("--d-model", type=int)
    s.add_argument("--n-layers", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--no-history", action="store_true")
    s.add_argument("--no-aux", action="store_true")
    s.add_argument("--no-masking", action="store_true")
    s.add_argument("--single-copy", action="store_true")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="run the trained model over a corpus")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("track", help="turn a predictions file into dialog states")
    common(s)
    s.add_argument("--input", required=True)
    s.add_argument("--predictions")
    s.add_argument("--oracle", action="store_true", help="replay gold labels instead of predictions")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("evaluate", help="score dialog states against gold")
    common(s)
    s.add_argument("--gold", required=True)
    s.add_argument("--pred", required=True, nargs="+", help="predicted states; several files are aggregated")
    s.add_argument("--predictions", nargs="+", help="predictions files, for gate metrics")
    s.add_argument("--seeds", help="comma-separated seed labels, one per --pred file")
    s.add_argument("--train", help="train split, for recall by seen count")
    s.add_argument("--count-per-slot", action="store_true", help="count training values per (slot, value)")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_evaluate)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (CLIError, CorpusError, SchemaError, FileNotFoundError, json.JSONDecodeError, ValueError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
