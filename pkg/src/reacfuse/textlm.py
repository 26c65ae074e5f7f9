"""ELN records, their tagged text form, a byte tokenizer and a small causal LM."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from reacfuse import tensor as T
from reacfuse.nn import LayerNorm, Linear, Module, TransformerLayer, param

log = logging.getLogger(__name__)

YIELD_CUTOFF = 5.0
BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259

RECORD_FIELDS = ("reaction", "technology", "procedure", "comments", "product_label",
                 "yield_pct", "outcome_label", "timestamp", "tags")


@dataclass(frozen=True)
class ElnRecord:
    reaction: str
    technology: str = ""
    procedure: str = ""
    comments: str = ""
    product_label: str = ""
    yield_pct: float | None = None
    outcome_label: str | None = None
    timestamp: str = ""
    tags: tuple = ()

    def __post_init__(self):
        if self.yield_pct is not None and self.yield_pct < 0:
            raise ValueError("yield_pct must be >= 0")
        if self.outcome_label not in (None, "pos", "neg"):
            raise ValueError(f"bad outcome_label {self.outcome_label!r}")
        object.__setattr__(self, "tags", tuple(sorted(set(self.tags))))

    @property
    def label(self) -> int | None:
        """1/0 success label, or None for unlabeled records."""
        if self.yield_pct is not None:
            return int(self.yield_pct >= YIELD_CUTOFF)
        if self.outcome_label is not None:
            return int(self.outcome_label == "pos")
        return None

    @property
    def is_labeled(self):
        return self.label is not None

    def to_json(self) -> dict:
        d = asdict(self)
        d["tags"] = list(self.tags)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ElnRecord":
        """Build from a JSON object, keeping only schema fields.

        Generator-only fields such as ``ground_truth`` and ``rule_id`` are
        dropped here so no model can see them.
        """
        kw = {k: d[k] for k in RECORD_FIELDS if k in d}
        if "tags" in kw:
            kw["tags"] = tuple(kw["tags"])
        return cls(**kw)


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [ElnRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def records_to_jsonl(records, extra=None) -> str:
    """Serialise records; ``extra`` is an optional list of per-record dicts to merge."""
    lines = []
    for i, rec in enumerate(records):
        d = rec.to_json()
        if extra is not None:
            d.update(extra[i])
        lines.append(json.dumps(d, sort_keys=True, ensure_ascii=False))
    return "\n".join(lines) + ("\n" if lines else "")


def format_record(rec: ElnRecord, include_outcome_fields: bool) -> str:
    text = (f"##technology## {rec.technology} ##procedure## {rec.procedure} "
            f"##comments## {rec.comments} ##product## {rec.product_label}")
    if include_outcome_fields:
        y = "" if rec.yield_pct is None else f"{rec.yield_pct:.1f}%"
        lab = {None: "", 1: "pos", 0: "neg"}[rec.label]
        text += f" ##yield## {y} ##label## {lab}"
    return text


# -- tokenizer ---------------------------------------------------------------

def tokenize_text(s: str, context_length: int = 512) -> list:
    """BOS + utf-8 bytes + EOS, cut to ``context_length`` keeping the EOS."""
    ids = [BOS, *s.encode("utf-8"), EOS]
    if len(ids) > context_length:
        ids = ids[:context_length - 1] + [EOS]
    return ids


def detokenize(ids) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8")


def pad_batch(seqs) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


# -- model -------------------------------------------------------------------

@dataclass
class TextLMConfig:
    vocab_size: int = VOCAB_SIZE
    n_layers: int = 4
    n_heads: int = 4
    d_text: int = 128
    context_length: int = 512

    def __post_init__(self):
        if self.d_text % self.n_heads:
            raise ValueError("d_text must be divisible by n_heads")
        if self.vocab_size < VOCAB_SIZE:
            raise ValueError(f"vocab_size must be >= {VOCAB_SIZE}")


class TextLM(Module):
    def __init__(self, cfg: TextLMConfig, seed=0):
        rng = np.random.default_rng(seed)
        d = cfg.d_text
        self.cfg = cfg
        self.tok_emb = param(rng.normal(0, 0.02, (cfg.vocab_size, d)))
        self.pos_emb = param(rng.normal(0, 0.01, (cfg.context_length, d)))
        self.layers = [TransformerLayer(d, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.vocab_size, rng)

    def embed(self, ids):
        n = ids.shape[1]
        if n > self.cfg.context_length:
            raise ValueError(f"sequence of {n} tokens exceeds context {self.cfg.context_length}")
        return T.embedding(self.tok_emb, ids) + self.pos_emb[:n]

    @staticmethod
    def causal_mask(n):
        return np.tril(np.ones((n, n), dtype=bool))

    def hidden(self, ids):
        """Final-layer states after the closing layer norm, (B, n, d)."""
        x = self.embed(ids)
        mask = self.causal_mask(ids.shape[1])
        for layer in self.layers:
            x = layer(x, mask=mask)
        return self.ln_f(x)

    def logits(self, ids):
        return self.head(self.hidden(ids))


def next_token_loss(logits, ids):
    """Causal next-token CE; targets equal to PAD are ignored."""
    b, n, v = logits.shape
    pred = logits[:, :-1, :].reshape(b * (n - 1), v)
    tgt = ids[:, 1:].reshape(-1)
    return T.cross_entropy(pred, tgt, ignore_index=PAD)


def lm_step(model: TextLM, ids):
    return next_token_loss(model.logits(ids), ids)


def last_token_embedding(model: TextLM, s: str) -> np.ndarray:
    return embed_texts(model, [s])[0]


def embed_texts(model: TextLM, texts, batch_size=32) -> np.ndarray:
    """Last non-PAD hidden state for each text, in input order."""
    ctx = model.cfg.context_length
    toks = [tokenize_text(t, ctx) for t in texts]
    order = np.argsort([len(t) for t in toks], kind="stable")
    out = np.zeros((len(texts), model.cfg.d_text), dtype=np.float32)
    with T.no_grad():
        for lo in range(0, len(order), batch_size):
            sel = order[lo:lo + batch_size]
            ids = pad_batch([toks[i] for i in sel])
            h = model.hidden(ids).data
            last = np.array([len(toks[i]) - 1 for i in sel])
            out[sel] = h[np.arange(len(sel)), last]
    return out


@dataclass
class LMTrainConfig:
    epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    max_steps: int | None = None


def pretrain_lm(model: TextLM, texts, cfg: LMTrainConfig | None = None, callback=None):
    """Next-token pretraining over ``texts``; returns per-epoch history."""
    cfg = cfg or LMTrainConfig()
    ctx = model.cfg.context_length
    toks = [tokenize_text(t, ctx) for t in texts]
    rng = np.random.default_rng(cfg.seed)
    opt = T.Adam(model.trainable_parameters(), lr=cfg.lr)
    lengths = np.array([len(t) for t in toks])
    history, steps = [], 0
    for epoch in range(cfg.epochs):
        idx = rng.permutation(len(toks))
        chunk = cfg.batch_size * 16
        batches = []
        for lo in range(0, len(idx), chunk):
            part = idx[lo:lo + chunk]
            part = part[np.argsort(lengths[part], kind="stable")]
            batches.extend(part[i:i + cfg.batch_size] for i in range(0, len(part), cfg.batch_size))
        losses = []
        for bi in rng.permutation(len(batches)):
            ids = pad_batch([toks[i] for i in batches[bi]])
            opt.zero_grad()
            loss = lm_step(model, ids)
            T.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            steps += 1
            if callback is not None:
                callback(steps, losses[-1])
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "steps": steps})
        log.info("lm epoch %s", history[-1])
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return history


def save_lm(path, model: TextLM, kind: str, meta=None):
    from reacfuse import checkpoint
    m = {"config": asdict(model.cfg), "checksum": model.checksum()}
    m.update(meta or {})
    return checkpoint.save(path, kind, model.state_dict(), m)


def load_lm(path, kind: str | None = None) -> TextLM:
    from reacfuse import checkpoint
    ck = checkpoint.load(path, kind)
    model = TextLM(TextLMConfig(**ck.meta["config"]))
    model.load_state_dict(ck.arrays)
    return model
