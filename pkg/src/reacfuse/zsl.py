"""Zero-shot labeling: frozen-LM text embeddings, a one-hidden-layer labeler,
labeling strategies and the extended (soft-labeled) training set."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from reacfuse import checkpoint, evalkit
from reacfuse import tensor as T
from reacfuse.nn import Linear, Module, param
from reacfuse.textlm import ElnRecord, TextLM, embed_texts, format_record

log = logging.getLogger(__name__)

EMB_KIND = "zsl-embeddings/v1"
LABELER_KIND = "zsl-labeler/v1"


class EmptyCorpus(ValueError):
    pass


class DegenerateLabels(ValueError):
    pass


class WidthMismatch(ValueError):
    pass


class AlignmentMismatch(ValueError):
    pass


def zsl_text(rec: ElnRecord) -> str:
    # outcome fields never reach the embedding model
    return format_record(rec, include_outcome_fields=False)


def _text_digest(texts) -> str:
    h = hashlib.sha256()
    for t in texts:
        b = t.encode("utf-8")
        h.update(len(b).to_bytes(8, "little"))
        h.update(b)
    return h.hexdigest()


def extract_corpus_embeddings(lm: TextLM, records, shard_size=None, shard_dir=None, batch_size=32,
                              shards=None):
    """Last-token embeddings of every record's outcome-free text.

    Returns ``(matrix, index)`` where ``index[i]`` is the record position of
    row ``i``. With ``shard_dir`` each shard is stored as a checkpoint and
    reused when its text digest and LM checksum match (resumable runs).
    ``shards`` restricts work to those shard numbers (for split runs).
    """
    records = list(records)
    if not records:
        raise EmptyCorpus("no records to embed")
    texts = [zsl_text(r) for r in records]
    size = shard_size or len(texts)
    n_shards = (len(texts) + size - 1) // size
    wanted = range(n_shards) if shards is None else shards
    lm_sum = lm.checksum()
    mats, index = [], []
    for k in wanted:
        lo, hi = k * size, min((k + 1) * size, len(texts))
        digest = _text_digest(texts[lo:hi])
        path = None if shard_dir is None else Path(shard_dir) / f"emb-{k:05d}.ck"
        mat = None
        if path is not None and path.exists():
            ck = checkpoint.load(path, EMB_KIND)
            if ck.meta.get("digest") == digest and ck.meta.get("lm") == lm_sum:
                mat = ck.arrays["emb"]
        if mat is None:
            mat = embed_texts(lm, texts[lo:hi], batch_size=batch_size)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                checkpoint.save(path, EMB_KIND, {"emb": mat, "rows": np.arange(lo, hi)},
                                {"digest": digest, "lm": lm_sum, "lo": lo, "hi": hi})
        mats.append(mat)
        index.extend(range(lo, hi))
    return np.concatenate(mats, axis=0), np.asarray(index, dtype=np.int64)


# -- labeler -------------------------------------------------------------------

def _buffer(arr):
    p = param(arr)
    p.requires_grad = False
    return p


class LabelerMLP(Module):
    """Standardise -> Linear -> GELU -> Linear -> sigmoid.

    The standardisation statistics are frozen buffers fitted on the training
    rows; they are an affine map and fold into the first layer.
    """

    def __init__(self, d_text, d_hidden=None, seed=0, zero=False):
        rng = np.random.default_rng(seed)
        d_hidden = d_hidden or d_text
        self.shift = _buffer(np.zeros(d_text))
        self.scale = _buffer(np.ones(d_text))
        self.fc1 = Linear(d_text, d_hidden, rng, std=1.0 / np.sqrt(d_text), zero=zero)
        self.fc2 = Linear(d_hidden, 1, rng, std=1.0 / np.sqrt(d_hidden), zero=zero)

    @property
    def d_in(self):
        return self.fc1.weight.shape[0]

    def fit_standardiser(self, x):
        self.shift.data = x.mean(axis=0).astype(self.shift.data.dtype)
        self.scale.data = (1.0 / (x.std(axis=0) + 1e-6)).astype(self.scale.data.dtype)

    def logits(self, x):
        z = (T._as_tensor(x, self.shift) - self.shift) * self.scale
        return self.fc2(T.gelu(self.fc1(z))).reshape(-1)

    def __call__(self, x):
        return T.sigmoid(self.logits(x))


@dataclass
class LabelerConfig:
    d_hidden: int | None = None
    lr: float = 1e-4
    batch_size: int = 3000
    epochs: int = 200
    test_fraction: float = 0.2
    seed: int = 0


@dataclass
class LabelerReport:
    train_loss: float
    test_loss: float
    test_metrics: dict
    train_rows: np.ndarray = field(repr=False)
    test_rows: np.ndarray = field(repr=False)
    history: list = field(default_factory=list, repr=False)


def _bce(p, y):
    return float(T.hard_bce(p, y))


def train_labeler(embeddings, labels, cfg: LabelerConfig | None = None):
    """Full BCE training on a seeded 80:20 split; no early stopping."""
    cfg = cfg or LabelerConfig()
    x = np.asarray(embeddings, dtype=T.get_dtype())
    y = np.asarray(labels)
    if x.shape[0] != y.shape[0]:
        raise AlignmentMismatch(f"{x.shape[0]} embeddings vs {y.shape[0]} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if np.unique(y).size < 2:
        raise DegenerateLabels("labeler needs both classes")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(y))
    n_test = int(round(cfg.test_fraction * len(y)))
    test_rows, train_rows = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    model = LabelerMLP(x.shape[1], cfg.d_hidden, seed=cfg.seed)
    model.fit_standardiser(x[train_rows])
    opt = T.Adam(model.trainable_parameters(), lr=cfg.lr)
    yf = y.astype(np.float64)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_rows)
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            opt.zero_grad()
            loss = T.soft_target_bce(model(x[sel]), yf[sel])
            T.backward(loss)
            opt.step()
        if epoch % 20 == 0 or epoch == cfg.epochs - 1:
            history.append({"epoch": epoch, "loss": float(loss.data)})
    p_train = predict_probs(model, x[train_rows])
    p_test = predict_probs(model, x[test_rows]) if n_test else np.zeros(0)
    metrics = evalkit.safe_report(p_test, y[test_rows]) if n_test else {}
    report = LabelerReport(_bce(p_train, y[train_rows]),
                           _bce(p_test, y[test_rows]) if n_test else float("nan"),
                           metrics, train_rows, test_rows, history)
    log.info("labeler train %.4f test %.4f %s", report.train_loss, report.test_loss, metrics)
    return model, report


def predict_probs(labeler: LabelerMLP, embeddings) -> np.ndarray:
    x = np.asarray(embeddings)
    if x.ndim != 2 or x.shape[1] != labeler.d_in:
        raise WidthMismatch(f"embedding width {x.shape[-1]} != labeler input {labeler.d_in}")
    with T.no_grad():
        return labeler(x.astype(labeler.fc1.weight.data.dtype)).data.astype(np.float64)


def save_labeler(path, labeler: LabelerMLP, meta=None):
    m = {"d_text": labeler.d_in, "d_hidden": labeler.fc1.weight.shape[1]}
    m.update(meta or {})
    return checkpoint.save(path, LABELER_KIND, labeler.state_dict(), m)


def load_labeler(path) -> LabelerMLP:
    ck = checkpoint.load(path, LABELER_KIND)
    model = LabelerMLP(ck.meta["d_text"], ck.meta["d_hidden"])
    model.load_state_dict(ck.arrays)
    return model


# -- strategies ----------------------------------------------------------------

@dataclass(frozen=True)
class Continuous:
    name = "continuous"


@dataclass(frozen=True)
class Threshold:
    lo: float = 0.2
    hi: float = 0.8
    name = "threshold"

    def __post_init__(self):
        if not 0.0 < self.lo < self.hi < 1.0:
            raise ValueError(f"need 0 < lo < hi < 1, got lo={self.lo} hi={self.hi}")


@dataclass(frozen=True)
class Binary:
    name = "binary"


def strategy_from_name(name, lo=0.2, hi=0.8):
    if name == "continuous":
        return Continuous()
    if name == "binary":
        return Binary()
    if name == "threshold":
        return Threshold(lo, hi)
    raise ValueError(f"unknown strategy {name!r}")


def apply_strategy(probs, strategy):
    """Per-record label or None (dropped)."""
    p = np.asarray(probs, dtype=np.float64)
    if isinstance(strategy, Continuous):
        return [float(v) for v in p]
    if isinstance(strategy, Threshold):
        return [float(v) if (v <= strategy.lo or v >= strategy.hi) else None for v in p]
    if isinstance(strategy, Binary):
        return [1.0 if v >= 0.5 else 0.0 for v in p]
    raise TypeError(f"not a labeling strategy: {strategy!r}")


class Provenance(str, enum.Enum):
    ORIGINAL = "Original"
    ZSL_CONTINUOUS = "ZslContinuous"
    ZSL_THRESHOLDED = "ZslThresholded"
    ZSL_BINARY = "ZslBinary"


_PROVENANCE = {Continuous: Provenance.ZSL_CONTINUOUS, Threshold: Provenance.ZSL_THRESHOLDED,
               Binary: Provenance.ZSL_BINARY}


@dataclass(frozen=True)
class DistributionRow:
    name: str
    n: int
    positive: Fraction
    negative: Fraction


@dataclass
class SoftLabeledDataset:
    records: list
    labels: np.ndarray
    provenance: list

    def __post_init__(self):
        if not len(self.records) == len(self.labels) == len(self.provenance):
            raise AlignmentMismatch("records, labels and provenance differ in length")

    def __len__(self):
        return len(self.records)

    def rows_with(self, *kinds):
        return [i for i, p in enumerate(self.provenance) if p in kinds]

    def distribution(self):
        """Binary label distribution rows: Original, ZSL, Combined (labels >= 0.5 count as positive)."""
        zsl = [p for p in Provenance if p is not Provenance.ORIGINAL]
        rows = []
        for name, idx in (("Original", self.rows_with(Provenance.ORIGINAL)),
                          ("ZSL", self.rows_with(*zsl)),
                          ("Combined", list(range(len(self))))):
            n = len(idx)
            pos = int((self.labels[idx] >= 0.5).sum()) if n else 0
            share = Fraction(pos, n) if n else Fraction(0)
            rows.append(DistributionRow(name, n, share, 1 - share if n else Fraction(0)))
        return rows

    def distribution_table(self) -> str:
        lines = ["source,n,positive,negative"]
        for r in self.distribution():
            lines.append(f"{r.name},{r.n},{float(r.positive):.4f},{float(r.negative):.4f}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        out = []
        for rec, lab, prov in zip(self.records, self.labels, self.provenance):
            d = rec.to_json()
            d["soft_label"] = float(lab)
            d["provenance"] = prov.value
            out.append(json.dumps(d, sort_keys=True, ensure_ascii=False))
        return "\n".join(out) + ("\n" if out else "")

    @classmethod
    def from_jsonl(cls, text):
        recs, labs, provs = [], [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            recs.append(ElnRecord.from_json(d))
            labs.append(d["soft_label"])
            provs.append(Provenance(d["provenance"]))
        return cls(recs, np.asarray(labs, dtype=np.float64), provs)


def extend_dataset(labeled, unlabeled, probs, strategy) -> SoftLabeledDataset:
    """Original hard-labeled records plus strategy-labeled unlabeled records."""
    labeled, unlabeled = list(labeled), list(unlabeled)
    if len(unlabeled) != len(probs):
        raise AlignmentMismatch(f"{len(unlabeled)} unlabeled records vs {len(probs)} probabilities")
    recs, labs, provs = [], [], []
    for r in labeled:
        if r.label is None:
            raise ValueError("labeled input contains an unlabeled record")
        recs.append(r)
        labs.append(float(r.label))
        provs.append(Provenance.ORIGINAL)
    prov = _PROVENANCE[type(strategy)]
    for r, lab in zip(unlabeled, apply_strategy(probs, strategy)):
        if lab is not None:
            recs.append(r)
            labs.append(lab)
            provs.append(prov)
    ds = SoftLabeledDataset(recs, np.asarray(labs, dtype=np.float64), provs)
    log.info("extended dataset\n%s", ds.distribution_table())
    return ds
