"""Command line entry point: ``reacfuse <command> [--config PATH] [--seed N] [--threads N] [--out DIR]``.

Run layout under ``--out``::

    data/      corpus.jsonl, planted_rule.txt, split.json, vocab files
    models/    checkpoints
    zsl/       embeddings, labeler, probabilities, extended datasets
    reports/   evaluation and comparison tables

Every command writes its outputs atomically, a ``<tag>.manifest.json`` with
input and output hashes and a ``<tag>.config.ini`` holding the fully resolved
configuration. The tag is the command name, suffixed by the variant or model.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from reacfuse import checkpoint, evalkit, synthdata, zsl
from reacfuse import graphormer as G
from reacfuse import pipeline as P
from reacfuse.adapter import (AdapterTrainConfig, LMHashMismatch, ReacLLaMAAdapter, adapter_infer,
                              load_adapter, save_adapter, train_adapter)
from reacfuse.chem import ChemParseError, RscVocab
from reacfuse.config import ConfigError, RunConfig, resolve_threads
from reacfuse.featurize import AtomVocab
from reacfuse.textlm import ElnRecord, load_lm, save_lm

log = logging.getLogger("reacfuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PROC_LM_KIND = "proc-lm/v1"
ZSL_LM_KIND = "zsl-lm/v1"
ZSL_VARIANTS = ("binary", "threshold", "continuous")
EVAL_MODELS = ("baseline", "adapter", *(f"zsl-{v}" for v in ZSL_VARIANTS))


class DataError(RuntimeError):
    pass


DATA_ERRORS = (DataError, FileNotFoundError, ChemParseError, json.JSONDecodeError,
               checkpoint.CheckpointError, LMHashMismatch, P.SplitMismatch, zsl.EmptyCorpus,
               zsl.DegenerateLabels, zsl.WidthMismatch, zsl.AlignmentMismatch, G.EmptyDataset,
               evalkit.UndefinedMetric, evalkit.SingleClass)


# -- run context ---------------------------------------------------------------

class Run:
    """Paths, config and manifest bookkeeping for one command."""

    def __init__(self, command, cfg: RunConfig, out, tag=None):
        self.command = command
        self.tag = tag or command
        self.cfg = cfg
        self.out = Path(out)
        self.inputs = {}
        self.outputs = {}

    def path(self, rel):
        return self.out / rel

    def need(self, rel):
        p = self.path(rel)
        if not p.exists():
            raise DataError(f"missing input {rel} (run the producing command first)")
        self.inputs[rel] = checkpoint.sha256_file(p)
        return p

    def has(self, rel):
        return self.path(rel).exists()

    def wrote(self, rel):
        self.outputs[rel] = checkpoint.sha256_file(self.path(rel))

    def write_text(self, rel, text):
        checkpoint.atomic_write_text(self.path(rel), text)
        self.wrote(rel)

    def write_json(self, rel, obj):
        self.write_text(rel, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self, subdir):
        cfg_rel = f"{subdir}/{self.tag}.config.ini"
        checkpoint.atomic_write_text(self.path(cfg_rel), self.cfg.dumps())
        manifest = {"command": self.command, "config": cfg_rel,
                    "config_sha256": checkpoint.sha256_file(self.path(cfg_rel)),
                    "inputs": dict(sorted(self.inputs.items())),
                    "outputs": dict(sorted(self.outputs.items()))}
        checkpoint.atomic_write_text(self.path(f"{subdir}/{self.tag}.manifest.json"),
                                     json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def verify_manifest(out, rel) -> list:
    """Names of recorded inputs/outputs whose current hash differs (stale or tampered)."""
    out = Path(out)
    m = json.loads((out / rel).read_text(encoding="utf-8"))
    bad = []
    for group in ("inputs", "outputs"):
        for name, digest in m[group].items():
            p = out / name
            if not p.exists() or checkpoint.sha256_file(p) != digest:
                bad.append(name)
    return bad


# -- shared loaders --------------------------------------------------------------

def _read_corpus(run: Run):
    p = run.need("data/corpus.jsonl")
    with open(p, encoding="utf-8") as fh:
        try:
            return [ElnRecord.from_json(json.loads(line)) for line in fh if line.strip()]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"corpus.jsonl: {exc}") from exc


def _split(run: Run, records):
    s = json.loads(run.need("data/split.json").read_text(encoding="utf-8"))
    if max(s["train"] + s["test"], default=-1) >= len(records):
        raise DataError("split.json does not match corpus.jsonl")
    return [records[i] for i in s["train"]], [records[i] for i in s["test"]]


def _featurizer(run: Run, records):
    """Load vocabularies, building them from the corpus on first use."""
    a, r = "data/atom_vocab.txt", "data/rsc_vocab.txt"
    if not (run.has(a) and run.has(r)):
        feat = P.Featurizer.build(records)
        checkpoint.atomic_write_text(run.path(a), feat.atom_vocab.dumps())
        checkpoint.atomic_write_text(run.path(r), feat.rsc_vocab.dumps())
    return P.Featurizer(AtomVocab.from_file(run.need(a)), RscVocab.from_file(run.need(r)))


def _init_graph(run: Run):
    if run.has("models/mlm.ck"):
        return G.load_model(run.need("models/mlm.ck"))
    log.warning("no models/mlm.ck; fine-tuning from random initialisation")
    return None


def _seed(run: Run):
    return run.cfg["data"]["seed"]


# -- commands ------------------------------------------------------------------

def cmd_gen_data(run: Run, args):
    spec = P.generator_spec(run.cfg)
    try:
        rows = synthdata.generate(spec)
    except synthdata.InvalidSpec as exc:
        raise ConfigError(str(exc)) from exc
    run.write_text("data/corpus.jsonl", synthdata.to_jsonl(rows))
    run.write_text("data/planted_rule.txt", synthdata.PlantedRule().describe())
    records = [rec for rec, _, _ in rows]
    train, test = P.split_indices(records, run.cfg["data"]["test_fraction"])
    run.write_json("data/split.json", {"train": train, "test": test,
                                       "test_hash": P.split_hash([records[i] for i in test])})
    run.finish("data")


def cmd_pretrain_mlm(run: Run, args):
    records = _read_corpus(run)
    train, test = _split(run, records)
    feat = _featurizer(run, records)
    model, hist = P.pretrain_graph(feat, train, run.cfg, seed=_seed(run), eval_records=test)
    G.save_model(run.path("models/mlm.ck"), model, {"history": hist})
    run.wrote("models/mlm.ck")
    run.write_json("models/mlm.history.json", hist)
    run.finish("models")


def cmd_pretrain_lm(run: Run, args):
    if args.variant == "proc":
        records = _read_corpus(run)
        train, _ = _split(run, records)
        texts, kind, section = P.proc_lm_texts(train), PROC_LM_KIND, "proc_lm"
    else:
        texts, kind, section = P.zsl_lm_texts(run.cfg), ZSL_LM_KIND, "zsl_lm"
    model, hist = P.train_text_lm(texts, run.cfg, section, seed=_seed(run))
    rel = f"models/{args.variant}-lm.ck"
    save_lm(run.path(rel), model, kind, {"history": hist})
    run.wrote(rel)
    run.finish("models")


def cmd_train_baseline(run: Run, args):
    records = _read_corpus(run)
    train, _ = _split(run, records)
    feat = _featurizer(run, records)
    lab = P.labeled(train)
    model, hist = P.train_graph(feat, lab, [r.label for r in lab], run.cfg, "baseline",
                                seed=_seed(run), init=_init_graph(run))
    G.save_model(run.path("models/baseline.ck"), model, {"history": hist})
    run.wrote("models/baseline.ck")
    run.finish("models")


def cmd_train_adapter(run: Run, args):
    records = _read_corpus(run)
    train, _ = _split(run, records)
    feat = _featurizer(run, records)
    lm = load_lm(run.need("models/proc-lm.ck"), PROC_LM_KIND)
    a = run.cfg["adapter"]
    graph = _init_graph(run)
    gcfg = feat.graph_config(run.cfg) if graph is None else graph.cfg
    n_adapt = min(a["n_adapt_layers"], gcfg.n_layers, lm.cfg.n_layers)
    adapter = ReacLLaMAAdapter(gcfg, lm, n_adapt, seed=_seed(run), graph=graph)
    hist = train_adapter(adapter, feat.items(train), P.proc_lm_texts(train), [r.label for r in train],
                         AdapterTrainConfig(epochs=a["epochs"], batch_size=a["batch_size"], lr=a["lr"],
                                            seed=_seed(run)))
    P.check_finite([{"bce_loss": h["bce"] or 0.0, "ce_loss": h["ce"]} for h in hist], adapter, "adapter")
    save_adapter(run.path("models/adapter.ck"), adapter, {"history": hist})
    run.wrote("models/adapter.ck")
    run.finish("models")


def cmd_zsl_extract(run: Run, args):
    records = _read_corpus(run)
    train, _ = _split(run, records)
    lm = load_lm(run.need("models/zsl-lm.ck"), ZSL_LM_KIND)
    emb, index = zsl.extract_corpus_embeddings(lm, train, shard_size=run.cfg["zsl"]["shard_size"],
                                               shard_dir=run.path("zsl/shards"))
    checkpoint.save(run.path("zsl/embeddings.ck"), zsl.EMB_KIND, {"emb": emb, "rows": index},
                    {"lm": lm.checksum(), "n": len(train)})
    run.wrote("zsl/embeddings.ck")
    run.finish("zsl")


def _train_embeddings(run: Run, train):
    ck = checkpoint.load(run.need("zsl/embeddings.ck"), zsl.EMB_KIND)
    if ck.meta["n"] != len(train):
        raise DataError("embeddings do not match the training split")
    emb = np.empty_like(ck.arrays["emb"])
    emb[ck.arrays["rows"]] = ck.arrays["emb"]
    return emb


def cmd_zsl_train_labeler(run: Run, args):
    records = _read_corpus(run)
    train, _ = _split(run, records)
    emb = _train_embeddings(run, train)
    rows = [i for i, r in enumerate(train) if r.is_labeled]
    lab_records = [train[i] for i in rows]
    labeler, rep = zsl.train_labeler(emb[rows], np.array([r.label for r in lab_records]),
                                     P.labeler_config(run.cfg, seed=_seed(run)))
    zsl.save_labeler(run.path("zsl/labeler.ck"), labeler)
    run.wrote("zsl/labeler.ck")
    p_test = zsl.predict_probs(labeler, emb[rows][rep.test_rows])
    buckets, hist = P.labeler_length_report(lab_records, rep, p_test)
    run.write_json("zsl/labeler_report.json", {
        "train_loss": rep.train_loss, "test_loss": rep.test_loss, "test_metrics": rep.test_metrics,
        "n_train": int(len(rep.train_rows)), "n_test": int(len(rep.test_rows)),
        "share_confident": float(np.mean((p_test <= 0.2) | (p_test >= 0.8))) if len(p_test) else None,
        "history": rep.history})
    run.write_text("zsl/length_buckets.csv", evalkit.buckets_to_csv(buckets))
    run.write_text("zsl/length_histogram.csv", _length_hist_csv(hist))
    run.finish("zsl")


def _length_hist_csv(hist):
    lines = ["bin_lo,bin_hi,count"]
    e = hist["edges"]
    lines += [f"{e[k]!r},{e[k + 1]!r},{c}" for k, c in enumerate(hist["counts"])]
    lines.append(f"{e[-1]!r},inf,{hist['n_above_cutoff']}")
    return "\n".join(lines) + "\n"


def cmd_zsl_label(run: Run, args):
    records = _read_corpus(run)
    train, _ = _split(run, records)
    emb = _train_embeddings(run, train)
    labeler = zsl.load_labeler(run.need("zsl/labeler.ck"))
    rows = [i for i, r in enumerate(train) if not r.is_labeled]
    probs = zsl.predict_probs(labeler, emb[rows]) if rows else np.zeros(0)
    run.write_json("zsl/unlabeled_probs.json", {"train_rows": rows, "probs": [float(p) for p in probs]})
    run.write_text("zsl/label_histogram.csv", evalkit.histogram_to_csv(evalkit.label_histogram(probs, 10)))
    run.finish("zsl")


def cmd_zsl_extend(run: Run, args):
    records = _read_corpus(run)
    train, _ = _split(run, records)
    d = json.loads(run.need("zsl/unlabeled_probs.json").read_text(encoding="utf-8"))
    unl = [train[i] for i in d["train_rows"]]
    if any(r.is_labeled for r in unl):
        raise DataError("unlabeled_probs.json points at labeled records")
    for name, strategy in P.strategies(run.cfg).items():
        ds = zsl.extend_dataset(P.labeled(train), unl, np.asarray(d["probs"]), strategy)
        run.write_text(f"zsl/extended-{name}.jsonl", ds.to_jsonl())
        run.write_text(f"zsl/distribution-{name}.csv", ds.distribution_table())
    run.finish("zsl")


def cmd_train_zsl(run: Run, args):
    records = _read_corpus(run)
    feat = _featurizer(run, records)
    ds = zsl.SoftLabeledDataset.from_jsonl(
        run.need(f"zsl/extended-{args.variant}.jsonl").read_text(encoding="utf-8"))
    model, hist = P.train_graph(feat, ds.records, ds.labels, run.cfg, "zsl_train", seed=_seed(run),
                                init=_init_graph(run))
    rel = f"models/zsl-{args.variant}.ck"
    G.save_model(run.path(rel), model, {"history": hist})
    run.wrote(rel)
    run.finish("models")


def cmd_eval(run: Run, args):
    records = _read_corpus(run)
    _, test = _split(run, records)
    feat = _featurizer(run, records)
    test = P.labeled(test)
    if not test:
        raise DataError("test split has no labeled records")
    items = feat.items(test)
    if args.model == "adapter":
        lm = load_lm(run.need("models/proc-lm.ck"), PROC_LM_KIND)
        scores = adapter_infer(load_adapter(run.need("models/adapter.ck"), lm), items)
    else:
        scores = G.predict(G.load_model(run.need(f"models/{args.model}.ck")), items)
    if not np.isfinite(scores).all():
        raise P.NumericFailure(f"{args.model}: non-finite scores")
    rep = P.evaluate(args.model, scores, test, run.cfg)
    run.write_json(f"reports/eval-{args.model}.json", rep)
    rows = [(args.model, evalkit.MetricReport(**m)) for m in rep["metrics"]]
    run.write_text(f"reports/eval-{args.model}.csv", evalkit.reports_to_csv(rows))
    run.finish("reports")


def _rows_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                    for c in columns])
    return buf.getvalue()


def cmd_report(run: Run, args):
    base = json.loads(run.need("reports/eval-baseline.json").read_text(encoding="utf-8"))
    variants = []
    for name in EVAL_MODELS[1:]:
        rel = f"reports/eval-{name}.json"
        if run.has(rel):
            variants.append(json.loads(run.need(rel).read_text(encoding="utf-8")))
    rows, sweep_rows, best = P.compare_report(base, variants)
    cols = ["model", "subset", "n", *P.DELTA_KEYS, *(f"delta_{k}" for k in P.DELTA_KEYS)]
    run.write_text("reports/comparison.csv", _rows_csv(rows, cols))
    run.write_json("reports/comparison.json", {"rows": rows, "best_combined": best,
                                               "split_hash": base["split_hash"]})
    run.write_text("reports/comparison_sweep.csv", _rows_csv(
        sweep_rows, ["model", "threshold", "sensitivity", "specificity", "balanced_accuracy"]))
    run.finish("reports")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-mlm": cmd_pretrain_mlm,
    "pretrain-lm": cmd_pretrain_lm,
    "train-baseline": cmd_train_baseline,
    "train-adapter": cmd_train_adapter,
    "zsl-extract": cmd_zsl_extract,
    "zsl-train-labeler": cmd_zsl_train_labeler,
    "zsl-label": cmd_zsl_label,
    "zsl-extend": cmd_zsl_extend,
    "train-zsl": cmd_train_zsl,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with run settings")
    common.add_argument("--seed", type=int, help="overrides [data] seed and REACFUSE_SEED")
    common.add_argument("--threads", help="BLAS/numba thread cap; 1 gives deterministic mode")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="reacfuse", description="reaction outcome modelling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "pretrain-lm":
            p.add_argument("--variant", choices=("proc", "zsl"), required=True)
        elif name == "train-zsl":
            p.add_argument("variant", choices=ZSL_VARIANTS)
        elif name == "eval":
            p.add_argument("--model", choices=EVAL_MODELS, required=True)
    return parser


@contextlib.contextmanager
def _thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        try:
            import numba
            old = numba.get_num_threads()
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
        except ImportError:
            old = None
        try:
            yield
        finally:
            if old is not None:
                numba.set_num_threads(old)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        cfg.apply_overrides(seed=args.seed)
        threads = resolve_threads(args.threads)
        variant = getattr(args, "variant", None) or getattr(args, "model", None)
        run = Run(args.command, cfg, args.out, f"{args.command}-{variant}" if variant else None)
        with _thread_limit(threads):
            COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"ConfigError: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except P.NumericFailure as exc:
        print(f"NumericFailure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
