"""Reaction-conditioned adapter over a frozen causal text LM.

The reaction stream is a full graph encoder with its own yield head. The
last ``n_adapt_layers`` graph layers are upsampled to the text width and read
by the matching top text layers through a second attention stream that
shares the frozen Q/K/V/O projections. A per-head gate, zero at init, scales
that stream, so a fresh adapter is exactly the frozen LM on the text side.
Inference uses the reaction stream only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from reacfuse import tensor as T
from reacfuse.featurize import Batch, collate
from reacfuse.graphormer import GraphormerConfig, GraphormerModel
from reacfuse.nn import Linear, Module, merge_heads, param
from reacfuse.textlm import TextLM, next_token_loss, pad_batch, tokenize_text

KIND = "reacllama-adapter/v1"


class EmptyBatch(ValueError):
    pass


class LMHashMismatch(ValueError):
    pass


@dataclass
class AdapterConfig:
    n_graph_layers: int
    n_frozen_text_layers: int
    n_adapt_layers: int
    d_model: int
    d_text: int
    n_text_heads: int

    def __post_init__(self):
        if self.n_adapt_layers < 1:
            raise ValueError("n_adapt_layers must be >= 1")
        if self.n_frozen_text_layers < 0:
            raise ValueError("n_frozen_text_layers must be >= 0")
        if self.n_adapt_layers > self.n_graph_layers:
            raise ValueError("n_adapt_layers cannot exceed n_graph_layers")

    @classmethod
    def for_models(cls, graph_cfg: GraphormerConfig, lm: TextLM, n_adapt_layers=None):
        n_lm = lm.cfg.n_layers
        n_adapt = min(graph_cfg.n_layers, n_lm) if n_adapt_layers is None else n_adapt_layers
        if n_adapt > n_lm:
            raise ValueError("n_adapt_layers cannot exceed the LM depth")
        return cls(graph_cfg.n_layers, n_lm - n_adapt, n_adapt, graph_cfg.d_model,
                   lm.cfg.d_text, lm.cfg.n_heads)


def lm_content_hash(lm: TextLM) -> str:
    return lm.checksum()


def adapted_mha(attn, x, reac, gate, text_mask, reac_mask):
    """Gated dual-stream attention with frozen projections.

    ``x`` (B, n_t, d_text) is the normalised text input, ``reac`` (B, n_r,
    d_text) the upsampled reaction states, ``gate`` (H,), ``text_mask``
    broadcastable to (B, H, n_t, n_t) and ``reac_mask`` to (B, H, n_t, n_r).
    """
    q = attn.heads(x, attn.wq)
    a_text = T.masked_biased_attention(q, attn.heads(x, attn.wk), attn.heads(x, attn.wv), mask=text_mask)
    a_reac = T.masked_biased_attention(q, attn.heads(reac, attn.wk), attn.heads(reac, attn.wv),
                                       mask=reac_mask)
    g = gate.reshape(1, -1, 1, 1)
    return attn.wo(merge_heads(a_text + a_reac * g))


class ReacLLaMAAdapter(Module):
    """Trainable parts: graph encoder, upsample layers, gates. The LM sits in ``_lm`` (frozen)."""

    def __init__(self, graph_cfg: GraphormerConfig, lm: TextLM, n_adapt_layers=None, seed=0,
                 graph: GraphormerModel | None = None):
        rng = np.random.default_rng(seed + 7919)
        self.cfg = AdapterConfig.for_models(graph_cfg, lm, n_adapt_layers)
        self.graph = graph if graph is not None else GraphormerModel(graph_cfg, seed=seed)
        self.upsample = [Linear(graph_cfg.d_model, lm.cfg.d_text, rng)
                         for _ in range(self.cfg.n_adapt_layers)]
        self.gates = param(np.zeros((self.cfg.n_adapt_layers, lm.cfg.n_heads)))
        self._lm = lm.freeze()
        self._lm_hash = lm_content_hash(lm)

    @property
    def lm(self) -> TextLM:
        return self._lm

    @property
    def lm_hash(self) -> str:
        return self._lm_hash

    def frozen_checksum(self) -> str:
        return self._lm.checksum()

    # -- streams ------------------------------------------------------------
    def reaction_stream(self, batch: Batch):
        """Final reaction states and the per-layer outputs that feed the text side."""
        outs = []
        h = self.graph.encode(batch, layers_out=outs)
        return h, outs[len(outs) - self.cfg.n_adapt_layers:]

    def text_stream(self, ids, taps, reac_valid):
        lm = self._lm
        x = lm.embed(ids)
        causal = lm.causal_mask(ids.shape[1])
        for layer in lm.layers[:self.cfg.n_frozen_text_layers]:
            x = layer(x, mask=causal)
        reac_mask = reac_valid[:, None, None, :]
        for j, layer in enumerate(lm.layers[self.cfg.n_frozen_text_layers:]):
            r = self.upsample[j](taps[j])
            a = adapted_mha(layer.attn, layer.ln1(x), r, self.gates[j], causal, reac_mask)
            h = x + a
            x = h + layer.ffn(layer.ln2(h))
        return lm.head(lm.ln_f(x))

    def forward(self, batch: Batch, ids):
        """(yield probabilities (B,), next-token logits (B, n_t, V))."""
        if len(batch) != ids.shape[0]:
            raise ValueError(f"{len(batch)} reactions vs {ids.shape[0]} texts")
        h, taps = self.reaction_stream(batch)
        p = T.sigmoid(self.graph.yield_head(self.graph.pool(h, batch.valid)).reshape(-1))
        return p, self.text_stream(ids, taps, batch.valid)

    def infer(self, batch: Batch):
        return self.graph.yield_probability(batch)


def adapter_forward(adapter: ReacLLaMAAdapter, reactions, texts):
    """Forward on lists of TokenizedReaction and strings; returns tensors."""
    batch = collate(list(reactions))
    ids = pad_batch([tokenize_text(t, adapter.lm.cfg.context_length) for t in texts])
    return adapter.forward(batch, ids)


def adapter_loss(adapter: ReacLLaMAAdapter, reactions, texts, labels):
    """Total loss tensor plus (bce or None, ce) floats. ``labels`` entries may be None."""
    if len(reactions) == 0:
        raise EmptyBatch("adapter batch is empty")
    p, logits = adapter_forward(adapter, reactions, texts)
    ids = pad_batch([tokenize_text(t, adapter.lm.cfg.context_length) for t in texts])
    ce = next_token_loss(logits, ids)
    lab = np.array([-1.0 if y is None else float(y) for y in labels])
    keep = np.flatnonzero(lab >= 0)
    if keep.size == 0:
        return ce, None, float(ce.data)
    bce = T.soft_target_bce(p[keep], lab[keep])
    return bce + ce, float(bce.data), float(ce.data)


def adapter_train_step(adapter: ReacLLaMAAdapter, opt: T.Adam, reactions, texts, labels):
    """One optimiser step; returns (bce or None, ce)."""
    opt.zero_grad()
    total, bce, ce = adapter_loss(adapter, reactions, texts, labels)
    T.backward(total, params=opt.params)
    opt.step()
    return bce, ce


def adapter_infer(adapter: ReacLLaMAAdapter, reactions) -> np.ndarray:
    """Yield probabilities from structured input only."""
    with T.no_grad():
        return adapter.infer(collate(list(reactions))).data.astype(np.float64)


@dataclass
class AdapterTrainConfig:
    epochs: int = 3
    batch_size: int = 16
    lr: float = 8e-4
    seed: int = 0


def train_adapter(adapter: ReacLLaMAAdapter, reactions, texts, labels, cfg: AdapterTrainConfig,
                  max_steps=None, callback=None):
    """Joint yield + text training; returns per-epoch history."""
    if len(reactions) == 0:
        raise EmptyBatch("no training records")
    rng = np.random.default_rng(cfg.seed)
    opt = T.Adam(adapter.trainable_parameters(), lr=cfg.lr)
    history, steps = [], 0
    n = len(reactions)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        bces, ces = [], []
        for lo in range(0, n, cfg.batch_size):
            sel = perm[lo:lo + cfg.batch_size]
            bce, ce = adapter_train_step(adapter, opt, [reactions[i] for i in sel],
                                         [texts[i] for i in sel], [labels[i] for i in sel])
            if bce is not None:
                bces.append(bce)
            ces.append(ce)
            steps += 1
            if callback is not None:
                callback(steps, bce, ce)
            if max_steps is not None and steps >= max_steps:
                break
        history.append({"epoch": epoch, "bce": float(np.mean(bces)) if bces else None,
                        "ce": float(np.mean(ces)), "steps": steps})
        if max_steps is not None and steps >= max_steps:
            break
    return history


# -- checkpoint ----------------------------------------------------------------

def save_adapter(path, adapter: ReacLLaMAAdapter, meta=None):
    from reacfuse import checkpoint
    m = {"graph_config": asdict(adapter.graph.cfg), "adapter_config": asdict(adapter.cfg),
         "lm_hash": adapter.lm_hash}
    m.update(meta or {})
    return checkpoint.save(path, KIND, adapter.state_dict(), m)


def load_adapter(path, lm: TextLM) -> ReacLLaMAAdapter:
    """Rebuild an adapter bound to ``lm``; fails if ``lm`` is not the LM it was trained on."""
    from reacfuse import checkpoint
    ck = checkpoint.load(path, KIND)
    got = lm_content_hash(lm)
    if got != ck.meta["lm_hash"]:
        raise LMHashMismatch(f"adapter expects LM {ck.meta['lm_hash'][:12]}, got {got[:12]}")
    gcfg = GraphormerConfig(**ck.meta["graph_config"])
    adapter = ReacLLaMAAdapter(gcfg, lm, ck.meta["adapter_config"]["n_adapt_layers"])
    adapter.load_state_dict(ck.arrays)
    return adapter

