"""Stage functions shared by the command line and the acceptance suite.

Everything here works on in-memory objects; file layout lives in ``cli``.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from reacfuse import evalkit, synthdata, zsl
from reacfuse import graphormer as G
from reacfuse.chem import RscVocab, parse_reaction
from reacfuse.featurize import AtomVocab, tokenize_reaction
from reacfuse.textlm import LMTrainConfig, TextLM, TextLMConfig, format_record, pretrain_lm

# zsl-lm pretraining text comes from an independent draw, never the evaluated corpus
ZSL_LM_SEED_OFFSET = 104_729
SUBSET_TAGS = ("Pd",)


class SplitMismatch(ValueError):
    pass


class NumericFailure(ArithmeticError):
    pass


def agents_of(reaction: str):
    parts = reaction.split(">")
    return [a for a in parts[1].split(".") if a] if len(parts) == 3 else []


class Featurizer:
    """Vocabularies plus a per-reaction-string token cache."""

    def __init__(self, atom_vocab: AtomVocab, rsc_vocab: RscVocab):
        self.atom_vocab = atom_vocab
        self.rsc_vocab = rsc_vocab
        self._cache = {}

    @classmethod
    def build(cls, records):
        rsc = RscVocab(sorted({a for r in records for a in agents_of(r.reaction)}))
        parsed = [parse_reaction(s, rsc) for s in sorted({r.reaction for r in records})]
        return cls(AtomVocab.from_reactions(parsed), rsc)

    def item(self, reaction: str):
        tr = self._cache.get(reaction)
        if tr is None:
            tr = tokenize_reaction(parse_reaction(reaction, self.rsc_vocab), self.atom_vocab, self.rsc_vocab)
            self._cache[reaction] = tr
        return tr

    def items(self, records):
        return [self.item(r.reaction) for r in records]

    def graph_config(self, cfg) -> G.GraphormerConfig:
        g = cfg["graphormer"]
        return G.GraphormerConfig(len(self.atom_vocab), len(self.rsc_vocab), n_layers=g["n_layers"],
                                  n_heads=g["n_heads"], d_model=g["d_model"],
                                  mlm_mask_rate=g["mlm_mask_rate"])


# -- data ----------------------------------------------------------------------

def generator_spec(cfg, seed=None, n_records=None) -> synthdata.GeneratorSpec:
    d = cfg["data"]
    return synthdata.GeneratorSpec(
        n_records=d["n_records"] if n_records is None else n_records,
        unlabeled_fraction=d["unlabeled_fraction"], labeled_pos_fraction=d["labeled_pos_fraction"],
        unlabeled_pos_fraction=d["unlabeled_pos_fraction"], near_empty_fraction=d["near_empty_fraction"],
        noise_rate=d["noise_rate"], pd_fraction=d["pd_fraction"], text_noise=d["text_noise"],
        seed=d["seed"] if seed is None else seed)


def split_indices(records, test_fraction):
    """Temporal split as sorted index lists (train, test)."""
    keyed = list(enumerate(records))
    train, test = synthdata.temporal_split(keyed, test_fraction, timestamp=lambda p: p[1].timestamp)
    return sorted(i for i, _ in train), sorted(i for i, _ in test)


def split_hash(records) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.timestamp}\t{r.reaction}\t{r.label}\n".encode("utf-8"))
    return h.hexdigest()


def labeled(records):
    return [r for r in records if r.is_labeled]


def unlabeled(records):
    return [r for r in records if not r.is_labeled]


# -- numeric guard -----------------------------------------------------------

def check_finite(history, model=None, what="training"):
    for row in history:
        for k, v in row.items():
            if isinstance(v, float) and k.endswith("loss") and not math.isfinite(v):
                raise NumericFailure(f"{what}: non-finite {k} at {row}")
    if model is not None:
        for name, p in model.named_parameters():
            if not np.isfinite(p.data).all():
                raise NumericFailure(f"{what}: non-finite parameter {name}")


# -- graph models ----------------------------------------------------------

def pretrain_graph(feat: Featurizer, records, cfg, seed=0, eval_records=None):
    model = G.GraphormerModel(feat.graph_config(cfg), seed=seed)
    m = cfg["mlm"]
    hist = G.pretrain_mlm(model, feat.items(records), epochs=m["epochs"], batch_size=m["batch_size"],
                          lr=m["lr"], seed=seed,
                          eval_items=feat.items(eval_records) if eval_records else None)
    check_finite(hist, model, "mlm")
    return model, hist


def train_graph(feat: Featurizer, records, labels, cfg, section, seed=0, init=None):
    """Fine-tune (from ``init`` state if given) on soft or hard ``labels``."""
    model = G.GraphormerModel(feat.graph_config(cfg), seed=seed)
    if init is not None:
        model.load_state_dict(init.state_dict())
    s = cfg[section]
    tc = G.TrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"], seed=seed,
                       eval_fraction=0.0, soft_mode=cfg["zsl"]["soft_mode"])
    hist = G.train_classifier(model, feat.items(records), labels, tc)
    check_finite(hist, model, section)
    return model, hist


# -- text models -------------------------------------------------------------

def lm_config(cfg, section) -> TextLMConfig:
    s = cfg[section]
    return TextLMConfig(n_layers=s["n_layers"], n_heads=s["n_heads"], d_text=s["d_text"],
                        context_length=s["context_length"])


def train_text_lm(texts, cfg, section, seed=0):
    s = cfg[section]
    model = TextLM(lm_config(cfg, section), seed=seed)
    hist = pretrain_lm(model, texts, LMTrainConfig(epochs=10**6, batch_size=s["batch_size"], lr=s["lr"],
                                                   seed=seed, max_steps=s["steps"]))
    check_finite(hist, model, section)
    return model, hist


def proc_lm_texts(records):
    return [format_record(r, include_outcome_fields=True) for r in records]


def zsl_lm_texts(cfg, seed=None):
    """Outcome-free texts of an independent synthetic draw."""
    base = cfg["data"]["seed"] if seed is None else seed
    spec = generator_spec(cfg, seed=base + ZSL_LM_SEED_OFFSET, n_records=cfg["zsl_lm"]["corpus_records"])
    return [zsl.zsl_text(rec) for rec, _, _ in synthdata.generate(spec)]


# -- zero-shot labeling -------------------------------------------------------

def labeler_config(cfg, seed=0) -> zsl.LabelerConfig:
    s = cfg["labeler"]
    return zsl.LabelerConfig(lr=s["lr"], batch_size=s["batch_size"], epochs=s["epochs"],
                             test_fraction=s["test_fraction"], seed=seed)


def labeler_length_report(records, report: zsl.LabelerReport, probs_test, edges=None):
    """Held-out labeler metrics per text-length bucket, plus the length histogram."""
    rows = report.test_rows
    texts = [zsl.zsl_text(records[i]) for i in rows]
    y = np.array([records[i].label for i in rows])
    return evalkit.length_bucket_report(texts, probs_test, y, edges or evalkit.DEFAULT_BUCKET_EDGES)


def strategies(cfg):
    z = cfg["zsl"]
    return {"continuous": zsl.Continuous(), "binary": zsl.Binary(),
            "threshold": zsl.Threshold(z["lo"], z["hi"]),
            "threshold-strict": zsl.Threshold(z["strict_lo"], z["strict_hi"])}


# -- evaluation and comparison ------------------------------------------------

def sweep_grid(cfg):
    e = cfg["eval"]
    n = int(round((e["sweep_hi"] - e["sweep_lo"]) / e["sweep_step"]))
    return [round(e["sweep_lo"] + k * e["sweep_step"], 10) for k in range(n + 1)]


def evaluate(name, scores, test_records, cfg):
    """JSON-ready evaluation of one model on labeled test records."""
    y = np.array([r.label for r in test_records])
    thr = cfg["eval"]["threshold"]
    rows = [evalkit.report(scores, y, thr)]
    tags = [r.tags for r in test_records]
    for tag in SUBSET_TAGS:
        try:
            rows.append(evalkit.subset_report(tags, tag, scores, y, thr))
        except (evalkit.EmptySubset, evalkit.UndefinedMetric, evalkit.SingleClass):
            pass
    sweep = evalkit.threshold_sweep(scores, y, sweep_grid(cfg))
    return {
        "model": name,
        "split_hash": split_hash(test_records),
        "threshold": thr,
        "metrics": [r.as_row() for r in rows],
        "sweep": [{"threshold": t, **r.as_row()} for t, r in sweep],
    }


DELTA_KEYS = ("sensitivity", "specificity", "balanced_accuracy", "roc_auc")


def compare_report(baseline: dict, variants):
    """Side-by-side rows with deltas against ``baseline`` per subset.

    Returns ``(rows, sweep_rows, best)`` where ``best`` names the combined-label
    variant with the highest balanced accuracy, or None.
    """
    for v in variants:
        if v["split_hash"] != baseline["split_hash"]:
            raise SplitMismatch(f"{v['model']} was evaluated on a different test split")
    base = {m["subset"]: m for m in baseline["metrics"]}
    rows = []
    for rep in [baseline, *variants]:
        for m in rep["metrics"]:
            ref = base.get(m["subset"])
            row = {"model": rep["model"], **m}
            for k in DELTA_KEYS:
                row[f"delta_{k}"] = (None if ref is None or m[k] is None or ref[k] is None
                                     else m[k] - ref[k])
            rows.append(row)
    zsl_reps = [v for v in variants if v["model"].startswith("zsl-")]
    best = None
    if zsl_reps:
        best = max(zsl_reps, key=lambda v: (_overall(v)["balanced_accuracy"], v["model"]))["model"]
    sweep_rows = []
    for rep in [baseline] + [v for v in variants if v["model"] == best]:
        for s in rep["sweep"]:
            sweep_rows.append({"model": rep["model"], "threshold": s["threshold"],
                               "balanced_accuracy": s["balanced_accuracy"],
                               "sensitivity": s["sensitivity"], "specificity": s["specificity"]})
    return rows, sweep_rows, best


def _overall(rep):
    return next(m for m in rep["metrics"] if m["subset"] == "all")


def sweep_dominance(base_curve, other_curve) -> float:
    """Share of thresholds where ``other`` balanced accuracy >= ``base``."""
    pairs = list(zip(base_curve, other_curve))
    return sum(o >= b for b, o in pairs) / len(pairs)
