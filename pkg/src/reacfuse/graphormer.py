"""Reaction encoder: graph transformer over reactant/product atoms and RSC tokens."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from reacfuse import evalkit
from reacfuse import tensor as T
from reacfuse.featurize import (
    CROSS, D_MAX, NEIGHBOR_CAP, PRODUCT_ATOM, RSC, Batch, collate, mask_batch,
)
from reacfuse.nn import LayerNorm, Linear, Module, TransformerLayer, param

log = logging.getLogger(__name__)

KIND = "graphormer/v1"


class VocabMismatch(ValueError):
    pass


class NoMaskedPositions(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass
class GraphormerConfig:
    atom_vocab_size: int
    rsc_vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_max: int = D_MAX
    neighbor_cap: int = NEIGHBOR_CAP
    mlm_mask_rate: float = 0.15

    def __post_init__(self):
        for name in ("atom_vocab_size", "rsc_vocab_size", "n_layers", "n_heads", "d_model", "d_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_ff(self):
        return 4 * self.d_model

    @classmethod
    def full_scale(cls, atom_vocab_size, rsc_vocab_size):
        return cls(atom_vocab_size, rsc_vocab_size, n_layers=8, n_heads=16, d_model=256)


class GraphormerModel(Module):
    def __init__(self, cfg: GraphormerConfig, seed=0):
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.cfg = cfg
        # +1 row in the token tables for the MASK id
        self.atom_emb = param(rng.normal(0, 0.02, (cfg.atom_vocab_size + 1, d)))
        self.neigh_emb = param(rng.normal(0, 0.02, (cfg.neighbor_cap + 1, d)))
        self.rsc_emb = param(rng.normal(0, 0.02, (cfg.rsc_vocab_size + 1, d)))
        self.product_bias = param(rng.normal(0, 0.02, d))
        # one table shared by all layers; the CROSS code has no slot (bias 0)
        self.dist_bias = param(np.zeros((cfg.n_heads, cfg.d_max + 1)))
        self.layers = [TransformerLayer(d, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.mlm_head = Linear(d, cfg.atom_vocab_size + cfg.rsc_vocab_size, rng)
        self.yield_head = Linear(d, 1, rng, zero=True)

    @property
    def atom_mask_id(self):
        return self.cfg.atom_vocab_size

    @property
    def rsc_mask_id(self):
        return self.cfg.rsc_vocab_size

    # -- forward pieces ---------------------------------------------------
    def embed(self, batch: Batch):
        valid = batch.valid
        is_atom = (batch.kind < RSC) & valid
        is_rsc = (batch.kind == RSC) & valid
        is_prod = (batch.kind == PRODUCT_ATOM) & valid
        try:
            a = T.embedding(self.atom_emb, np.where(is_atom, batch.atom_type, 0))
            nb = T.embedding(self.neigh_emb, np.where(is_atom, batch.neighbor_count, 0))
            r = T.embedding(self.rsc_emb, np.where(is_rsc, batch.rsc_id, 0))
        except T.IndexOutOfVocab as exc:
            raise VocabMismatch(str(exc)) from exc
        dt = self.atom_emb.data.dtype
        am = is_atom[..., None].astype(dt)
        h = (a + nb) * am + r * is_rsc[..., None].astype(dt)
        return h + self.product_bias * is_prod[..., None].astype(dt)

    def attn_bias(self, batch: Batch):
        """(B, H, n, n) additive bias; CROSS codes map to a constant zero row."""
        h = self.cfg.n_heads
        table = T.concat([self.dist_bias.transpose(1, 0),
                          np.zeros((1, h), dtype=self.dist_bias.data.dtype)], axis=0)
        dc = batch.distance_codes
        codes = np.where(dc >= CROSS, self.cfg.d_max + 1, np.minimum(dc, self.cfg.d_max))
        return T.embedding(table, codes).transpose(0, 3, 1, 2)

    def attn_mask(self, batch: Batch):
        return batch.mask[:, None, :, :]

    def encode(self, batch: Batch, record=None, layers_out=None):
        h = self.embed(batch)
        bias = self.attn_bias(batch)
        mask = self.attn_mask(batch)
        for layer in self.layers:
            h = layer(h, bias, mask, record=record)
            if layers_out is not None:
                layers_out.append(h)
        return self.ln_f(h)

    def pool(self, h, valid):
        w = valid.astype(h.data.dtype)
        return (h * w[..., None]).sum(axis=1) / w.sum(axis=1, keepdims=True)

    def yield_logit(self, batch: Batch):
        h = self.encode(batch)
        return self.yield_head(self.pool(h, batch.valid)).reshape(-1)

    def yield_probability(self, batch: Batch):
        return T.sigmoid(self.yield_logit(batch))

    def mlm_logits(self, batch: Batch):
        return self.mlm_head(self.encode(batch))


def as_batch(items):
    if isinstance(items, Batch):
        return items
    if not isinstance(items, (list, tuple)):
        items = [items]
    return collate(items)


def yield_probability(model: GraphormerModel, tr) -> np.ndarray:
    """Success probabilities for one TokenizedReaction or a list of them."""
    with T.no_grad():
        return model.yield_probability(as_batch(tr)).data.copy()


def mlm_loss(logits, rows, cols, targets):
    """Cross-entropy restricted to masked positions of full (B, n, V) logits."""
    if len(rows) == 0:
        raise NoMaskedPositions("batch has no masked positions")
    picked = logits[(rows, cols)]
    loss = T.cross_entropy(picked, targets)
    acc = float((picked.data.argmax(axis=-1) == targets).mean())
    return loss, acc


def mlm_step(model: GraphormerModel, corrupted: Batch, targets):
    """Return (loss tensor, masked-token accuracy) for a corrupted batch."""
    rows, cols, tgt = targets
    return mlm_loss(model.mlm_logits(corrupted), rows, cols, tgt)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    eval_fraction: float = 0.1
    soft_mode: str = "target"   # "target": soft BCE targets; "weight": binarised labels weighted by confidence


def _batches(lengths, batch_size, rng):
    """Length-bucketed shuffled batches (deterministic given ``rng``)."""
    idx = rng.permutation(len(lengths))
    chunk = batch_size * 32
    out = []
    for lo in range(0, len(idx), chunk):
        part = idx[lo:lo + chunk]
        part = part[np.argsort(np.asarray(lengths)[part], kind="stable")]
        out.extend(part[i:i + batch_size] for i in range(0, len(part), batch_size))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def pretrain_mlm(model: GraphormerModel, items, epochs=3, batch_size=32, lr=1e-3, seed=0,
                 mask_rate=None, eval_items=None, log_every=0):
    """Masked-token pretraining; returns per-epoch history dicts."""
    if not items:
        raise EmptyDataset("no reactions to pretrain on")
    rate = model.cfg.mlm_mask_rate if mask_rate is None else mask_rate
    rng = np.random.default_rng(seed)
    opt = T.Adam(model.trainable_parameters(), lr=lr)
    lengths = [len(t) for t in items]
    history = []
    for epoch in range(epochs):
        losses, accs = [], []
        for step, bidx in enumerate(_batches(lengths, batch_size, rng)):
            batch = collate([items[i] for i in bidx])
            corrupted, tgt = mask_batch(batch, rate, rng, model.atom_mask_id, model.rsc_mask_id,
                                        model.cfg.atom_vocab_size)
            if len(tgt[0]) == 0:
                continue
            opt.zero_grad()
            loss, acc = mlm_step(model, corrupted, tgt)
            T.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            accs.append(acc)
            if log_every and step % log_every == 0:
                log.info("mlm epoch %d step %d loss %.4f acc %.3f", epoch, step, losses[-1], acc)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "train_accuracy": float(np.mean(accs))}
        if eval_items:
            row["eval_accuracy"] = mlm_accuracy(model, eval_items, seed=seed + 1000 + epoch, mask_rate=rate)
        history.append(row)
        log.info("mlm epoch %s", row)
    return history


def mlm_accuracy(model: GraphormerModel, items, seed=0, mask_rate=None, batch_size=64):
    """Masked-token accuracy over ``items`` with a fixed corruption seed."""
    rate = model.cfg.mlm_mask_rate if mask_rate is None else mask_rate
    rng = np.random.default_rng(seed)
    hits = total = 0
    with T.no_grad():
        for lo in range(0, len(items), batch_size):
            batch = collate(items[lo:lo + batch_size])
            corrupted, (rows, cols, tgt) = mask_batch(batch, rate, rng, model.atom_mask_id,
                                                      model.rsc_mask_id, model.cfg.atom_vocab_size)
            if len(rows) == 0:
                continue
            logits = model.mlm_logits(corrupted).data[rows, cols]
            hits += int((logits.argmax(axis=-1) == tgt).sum())
            total += len(rows)
    return hits / max(total, 1)


def _targets_and_weights(labels, soft_mode):
    q = np.asarray(labels, dtype=np.float64)
    if soft_mode == "target":
        return q, None
    if soft_mode == "weight":
        hard = (q >= 0.5).astype(np.float64)
        return hard, np.maximum(q, 1.0 - q)
    raise ValueError(f"unknown soft_mode {soft_mode!r}")


def predict(model: GraphormerModel, items, batch_size=128) -> np.ndarray:
    out = []
    with T.no_grad():
        for lo in range(0, len(items), batch_size):
            out.append(model.yield_probability(collate(items[lo:lo + batch_size])).data)
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def train_classifier(model: GraphormerModel, items, labels, cfg: TrainConfig,
                     eval_items=None, eval_labels=None, callback=None):
    """Minimise mean soft-target BCE over ``labels`` in [0, 1].

    Without explicit eval data a seeded ``cfg.eval_fraction`` slice of the
    training data is held out. History rows carry loss and held-out metrics.
    """
    if len(items) == 0:
        raise EmptyDataset("no labelled reactions")
    labels = np.asarray(labels, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    train_idx = np.arange(len(items))
    if eval_items is None and cfg.eval_fraction > 0 and len(items) >= 20:
        perm = rng.permutation(len(items))
        k = int(round(cfg.eval_fraction * len(items)))
        eval_idx, train_idx = perm[:k], np.sort(perm[k:])
        eval_items = [items[i] for i in eval_idx]
        eval_labels = (labels[eval_idx] >= 0.5).astype(int)
    targets, weights = _targets_and_weights(labels, cfg.soft_mode)
    opt = T.Adam(model.trainable_parameters(), lr=cfg.lr)
    lengths = [len(items[i]) for i in train_idx]
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for bidx in _batches(lengths, cfg.batch_size, rng):
            sel = train_idx[bidx]
            batch = collate([items[i] for i in sel])
            opt.zero_grad()
            p = model.yield_probability(batch)
            loss = T.soft_target_bce(p, targets[sel], None if weights is None else weights[sel])
            T.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if eval_items:
            scores = predict(model, eval_items)
            row.update(evalkit.safe_report(scores, np.asarray(eval_labels)))
        history.append(row)
        log.info("classifier epoch %s", row)
        if callback is not None:
            callback(row)
    return history


# -- checkpoint glue ---------------------------------------------------------

def save_model(path, model: GraphormerModel, meta=None):
    from reacfuse import checkpoint
    m = {"config": asdict(model.cfg)}
    m.update(meta or {})
    return checkpoint.save(path, KIND, model.state_dict(), m)


def load_model(path) -> GraphormerModel:
    from reacfuse import checkpoint
    ck = checkpoint.load(path, KIND)
    model = GraphormerModel(GraphormerConfig(**ck.meta["config"]))
    model.load_state_dict(ck.arrays)
    return model
