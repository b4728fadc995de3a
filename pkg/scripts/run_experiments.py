"""Seed x variant grid over the CLI, the same runs the acceptance suite makes.

    python scripts/run_experiments.py --work runs/grid --seeds 0 1 2

Writes ``summary.json`` and prints mean +- std of test and OOV JGA for the
full model and the --single-copy / --no-history ablations.
"""

from __future__ import annotations

import argparse
import json
import statistics
import subprocess
import sys
import time
from pathlib import Path

SPLITS = {"train": (200, 1000), "dev": (50, 2000), "test": (50, 3000)}
VARIANTS = {"full": [], "single_copy": ["--single-copy"], "no_history": ["--no-history"]}


def cli(*argv):
    cmd = [sys.executable, "-m", "copydst.cli", "--log-level", "WARNING", *map(str, argv)]
    subprocess.run(cmd, check=True, stdout=subprocess.DEVNULL)


def make_data(d: Path, oov_seed: int):
    d.mkdir(parents=True, exist_ok=True)
    for split, (n, seed) in SPLITS.items():
        if not (d / f"{split}.json").exists():
            cli("synth", "--split", split, "--dialogs", n, "--seed", seed, "-o", d / f"{split}.raw.json")
            cli("prepare", "--input", d / f"{split}.raw.json", "-o", d / f"{split}.json")
    if not (d / "test_oov.json").exists():
        cli("synth", "--oov-from", d / "test.json", "--seed", oov_seed, "-o", d / "test_oov.raw.json")
        cli("prepare", "--input", d / "test_oov.raw.json", "-o", d / "test_oov.json")


def one_run(data: Path, out: Path, seed: int, flags: list[str], extra: list[str]) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    cli("train", "--train", data / "train.json", "--dev", data / "dev.json", "--seed", seed, *flags, *extra,
        "-o", out / "model.npz")
    res = {"train_seconds": round(time.perf_counter() - t0, 1)}
    for split in ("test", "test_oov"):
        cli("predict", "--model", out / "model.npz", "--input", data / f"{split}.json", "-o", out / f"{split}.pred.jsonl")
        cli("track", "--input", data / f"{split}.json", "--predictions", out / f"{split}.pred.jsonl",
            "-o", out / f"{split}.states.jsonl")
        cli("evaluate", "--gold", data / f"{split}.json", "--pred", out / f"{split}.states.jsonl",
            "--predictions", out / f"{split}.pred.jsonl", "--train", data / "train.json", "-o", out / f"{split}.eval.json")
        rep = json.loads((out / f"{split}.eval.json").read_text())
        res[split] = {"jga": rep["jga"], "recall_buckets": rep["recall_buckets"]}
    return res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/grid")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--oov-seed", type=int, default=5)
    ap.add_argument("extra", nargs=argparse.REMAINDER, help="extra train flags after --")
    args = ap.parse_args(argv)
    extra = [a for a in args.extra if a != "--"]

    work = Path(args.work)
    make_data(work / "data", args.oov_seed)
    results: dict = {}
    for v in args.variants:
        for s in args.seeds:
            r = one_run(work / "data", work / f"{v}-{s}", s, VARIANTS[v], extra)
            results.setdefault(v, {})[str(s)] = r
            print(f"{v:<12} seed {s}: test {r['test']['jga']:.4f}  oov {r['test_oov']['jga']:.4f}  "
                  f"({r['train_seconds']:.0f}s)", flush=True)

    summary = {"extra_flags": extra, "runs": results, "summary": {}}
    for v, by_seed in results.items():
        row = {}
        for split in ("test", "test_oov"):
            xs = [r[split]["jga"] for r in by_seed.values()]
            row[split] = {"mean": statistics.mean(xs), "std": statistics.stdev(xs) if len(xs) > 1 else 0.0}
        summary["summary"][v] = row
        print(f"{v:<12} test {row['test']['mean']:.4f} +- {row['test']['std']:.4f}   "
              f"oov {row['test_oov']['mean']:.4f} +- {row['test_oov']['std']:.4f}")
    (work / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
