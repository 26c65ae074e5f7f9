"""Acceptance gate. One test (or a small group) per criterion, each marked with
its number; conftest prints a pass/fail line per criterion at session end.

Criteria 10-15 train real models at desk scale through ``desk``; expect the
whole module to take tens of minutes on one CPU.
"""

import inspect
import itertools
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

import desk
from helpers import (SMOKE_STEPS, check_model, check_op, fuzz_inputs, isomorphic, reaction_to_nx,
                     run_smoke)
from reacfuse import adapter as A
from reacfuse import evalkit as E
from reacfuse import graphormer as G
from reacfuse import tensor as T
from reacfuse import zsl
from reacfuse.chem import ChemParseError, Molecule, parse_molecule, parse_reaction, write_reaction
from reacfuse.featurize import CROSS, Batch, collate, mask_batch, tokenize_reaction
from reacfuse.textlm import TextLM, TextLMConfig, lm_step, pad_batch, tokenize_text

INSTANCES = 20


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


@pytest.fixture(scope="module")
def small_world():
    """A few hundred synthetic records with vocabularies; cheap, shared by criteria 1-5."""
    from reacfuse import pipeline as P
    from reacfuse import synthdata
    rows = synthdata.generate(synthdata.GeneratorSpec(n_records=300, seed=21))
    records = [r for r, _, _ in rows]
    feat = P.Featurizer.build(records)
    return records, feat


def _randomise(model, rng, scale=0.3):
    for p in model.trainable_parameters():
        p.data = (p.data + rng.normal(0, scale, p.data.shape)).astype(p.data.dtype)
    return model


def _permute_atoms(rxn, rng):
    """Same reaction with every molecule's atoms in a random order."""
    def perm(m):
        order = list(rng.permutation(len(m)))
        inv = {old: new for new, old in enumerate(order)}
        return Molecule.build([m.atoms[i] for i in order], [(inv[i], inv[j], o) for i, j, o in m.bonds])
    return type(rxn)(tuple(perm(m) for m in rxn.reactants), perm(rxn.product), rxn.rsc_ids, rxn.agents)


# -- 1. gradient checks ----------------------------------------------------------------

def _op_cases(rng):
    """(name, build, arrays) for one random instance of every differentiable op."""
    def shape(lo=1, hi=4, nd=2):
        return tuple(int(v) for v in rng.integers(lo, hi + 1, nd))

    s = shape()
    n, d = s
    pos = lambda sh: rng.uniform(0.5, 2.0, sh)
    w = rng.normal(size=(n, d))
    w_ln = rng.normal(size=(n, d + 2))
    mask = rng.random((n, d)) > 0.3
    mask[:, 0] = True
    b, tq, tk, hd = 2, int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
    amask = rng.random((b, tq, tk)) > 0.3
    amask[..., 0] = True
    ids = rng.integers(0, 5, size=shape())
    relu_x = rng.normal(size=s)
    relu_x[np.abs(relu_x) < 1e-3] = 0.5
    targets = rng.integers(0, d, size=n)
    ignore = targets.copy()
    ignore[0] = -100
    q = rng.uniform(0, 1, n)
    cases = [
        ("add", lambda a, c: ((a + c) * T.Tensor(w)).sum(), [rng.normal(size=s), rng.normal(size=(d,))]),
        ("sub", lambda a, c: ((a - c) * (a - c)).sum(), [rng.normal(size=s), rng.normal(size=(n, 1))]),
        ("mul", lambda a, c: (a * c).sum(), [rng.normal(size=s), rng.normal(size=s)]),
        ("div", lambda a, c: (a / c).sum(), [rng.normal(size=s), pos(s)]),
        ("exp", lambda a: (T.exp(a) * T.Tensor(w)).sum(), [rng.normal(size=s)]),
        ("log", lambda a: (T.log(a) * T.Tensor(w)).sum(), [pos(s)]),
        ("tanh", lambda a: (T.tanh(a) * T.Tensor(w)).sum(), [rng.normal(size=s)]),
        ("sigmoid", lambda a: (T.sigmoid(a) * T.Tensor(w)).sum(), [rng.normal(size=s) * 3]),
        ("relu", lambda a: (T.relu(a) * T.Tensor(w)).sum(), [relu_x]),
        ("gelu", lambda a: (T.gelu(a) * T.Tensor(w)).sum(), [rng.normal(size=s) * 2]),
        ("sum", lambda a: (T.tsum(a, axis=1) * T.tsum(a, axis=1)).sum(), [rng.normal(size=s)]),
        ("mean", lambda a: (T.mean(a, axis=0, keepdims=True) * a).sum(), [rng.normal(size=s)]),
        ("reshape", lambda a: (a.reshape(d, n) * T.Tensor(w.T)).sum(), [rng.normal(size=s)]),
        ("transpose", lambda a: (a.transpose(1, 0) * T.Tensor(w.T)).sum(), [rng.normal(size=s)]),
        ("getitem", lambda a: (a[n - 1] * a[0]).sum(), [rng.normal(size=s)]),
        ("concat", lambda a, c: (T.concat([a, c], axis=0) * T.concat([c, a], axis=0)).sum(),
         [rng.normal(size=s), rng.normal(size=s)]),
        ("embedding", lambda t: (T.embedding(t, ids) * T.embedding(t, ids)).sum(), [rng.normal(size=(5, 3))]),
        ("masked_fill", lambda a: (T.masked_fill(a, mask, 0.0) * T.Tensor(w)).sum(), [rng.normal(size=s)]),
        ("matmul", lambda a, c: T.tanh(a @ c).sum(), [rng.normal(size=s), rng.normal(size=(d, 3))]),
        ("linear", lambda x, wt, bs: T.tanh(T.linear(x, wt, bs)).sum(),
         [rng.normal(size=s), rng.normal(size=(d, 3)), rng.normal(size=(3,))]),
        # two features collapse the output to +-1 and the gradient to ~0; use three or more
        ("layer_norm", lambda x, g, bt: (T.layer_norm(x, g, bt) * T.Tensor(w_ln)).sum(),
         [rng.normal(size=(n, d + 2)), rng.normal(size=(d + 2,)), rng.normal(size=(d + 2,))]),
        ("softmax_rows", lambda x: (T.softmax_rows(x, mask) * T.Tensor(w)).sum(), [rng.normal(size=s)]),
        ("attention", lambda qq, kk, vv, bb: T.tanh(T.masked_biased_attention(qq, kk, vv, bb, amask)).sum(),
         [rng.normal(size=(b, tq, hd)), rng.normal(size=(b, tk, hd)), rng.normal(size=(b, tk, hd)),
          rng.normal(size=(b, tq, tk))]),
        ("soft_bce", lambda p: T.soft_target_bce(p, q), [rng.uniform(0.05, 0.95, n)]),
        ("soft_bce_weighted", lambda p: T.soft_target_bce(p, q, rng_w), [rng.uniform(0.05, 0.95, n)]),
        ("cross_entropy", lambda x: T.cross_entropy(x, targets), [rng.normal(size=s)]),
        ("cross_entropy_ignore", lambda x: T.cross_entropy(x, ignore, ignore_index=-100), [rng.normal(size=s)]),
    ]
    rng_w = rng.uniform(0.5, 1.5, n)
    if n == 1:
        cases = [c for c in cases if c[0] != "cross_entropy_ignore"]
    return cases


def _graph_loss_fn(feat, records, rng):
    items = feat.items(records)
    batch = collate(items)
    model = G.GraphormerModel(G.GraphormerConfig(len(feat.atom_vocab), len(feat.rsc_vocab), n_layers=2,
                                                 n_heads=2, d_model=8), seed=int(rng.integers(1 << 30)))
    _randomise(model, rng)
    corrupted, tgt = mask_batch(batch, 0.3, rng, model.atom_mask_id, model.rsc_mask_id,
                                model.cfg.atom_vocab_size)
    q = rng.uniform(0, 1, len(items))

    def loss():
        bce = T.soft_target_bce(model.yield_probability(batch), q)
        return bce + G.mlm_step(model, corrupted, tgt)[0] if len(tgt[0]) else bce
    return loss, model.trainable_parameters()


def _lm_loss_fn(rng):
    model = TextLM(TextLMConfig(n_layers=2, n_heads=2, d_text=8, context_length=16),
                   seed=int(rng.integers(1 << 30)))
    ids = pad_batch([tokenize_text("".join(chr(c) for c in rng.integers(97, 123, int(rng.integers(1, 10)))), 16)
                     for _ in range(2)])
    return (lambda: lm_step(model, ids)), model.trainable_parameters()


def _adapter_loss_fn(feat, records, rng):
    lm = TextLM(TextLMConfig(n_layers=2, n_heads=2, d_text=8, context_length=24),
                seed=int(rng.integers(1 << 30)))
    gcfg = G.GraphormerConfig(len(feat.atom_vocab), len(feat.rsc_vocab), n_layers=2, n_heads=2, d_model=8)
    ad = A.ReacLLaMAAdapter(gcfg, lm, 1, seed=int(rng.integers(1 << 30)))
    _randomise(ad, rng)
    items = feat.items(records)
    texts = [r.procedure[:20] for r in records]
    labels = [r.label for r in records]
    return (lambda: A.adapter_loss(ad, items, texts, labels)[0]), ad.trainable_parameters()


@pytest.mark.criterion(1)
def test_c01_gradient_checks(small_world, request):
    records, feat = small_world
    t0 = time.perf_counter()
    worst = {}
    with T.precision("check-64"):
        for k in range(INSTANCES):
            rng = np.random.default_rng(1000 + k)
            for name, build, arrays in _op_cases(rng):
                worst[name] = max(worst.get(name, 0.0), check_op(build, [np.array(a, dtype=np.float64) for a in arrays]))
        for k in range(INSTANCES):
            rng = np.random.default_rng(2000 + k)
            pick = [records[i] for i in rng.choice(len(records), 2, replace=False)]
            for name, (fn, params) in (("graphormer", _graph_loss_fn(feat, pick, rng)),
                                       ("textlm", _lm_loss_fn(rng)),
                                       ("adapter", _adapter_loss_fn(feat, pick, rng))):
                worst[name] = max(worst.get(name, 0.0), check_model(fn, params, rng, n_coords=6, h=1e-5))
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    _detail(request, f"{len(worst)} ops/models x {INSTANCES}, worst rel err {err:.2e} ({name}), {elapsed:.0f}s")
    assert len(worst) >= 30
    assert err < 1e-4, worst
    assert elapsed < 120


# -- 2. zero-gate identity ---------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c02_zero_gate_identity(small_world, request):
    records, feat = small_world
    rng = np.random.default_rng(2)
    lm = TextLM(TextLMConfig(n_layers=3, n_heads=2, d_text=16, context_length=128), seed=3)
    _randomise(lm, rng, 0.1)
    for p in lm.parameters():
        p.requires_grad = False
    ad = A.ReacLLaMAAdapter(G.GraphormerConfig(len(feat.atom_vocab), len(feat.rsc_vocab), n_layers=2,
                                               n_heads=2, d_model=16), lm, 2, seed=4)
    _randomise(ad.graph, rng)
    texts = ["".join(chr(c) for c in rng.integers(32, 0x24F, int(rng.integers(0, 200)))) for _ in range(100)]
    worst = 0.0
    with T.no_grad():
        for lo in range(0, 100, 10):
            ids = pad_batch([tokenize_text(t, 128) for t in texts[lo:lo + 10]])
            items = feat.items(records[lo:lo + 10])
            _, logits = ad.forward(collate(items), ids)
            ref = lm.logits(ids)
            worst = max(worst, float(np.max(np.abs(logits.data - ref.data))))
    _detail(request, f"max |logit diff| {worst:.1e} over 100 texts")
    assert worst <= 1e-6


# -- 3. frozen-weight conservation -------------------------------------------------------

@pytest.mark.criterion(3)
def test_c03_frozen_checksum_after_training(small_world, request):
    records, feat = small_world
    lm = TextLM(TextLMConfig(n_layers=2, n_heads=2, d_text=16, context_length=96), seed=5)
    ad = A.ReacLLaMAAdapter(G.GraphormerConfig(len(feat.atom_vocab), len(feat.rsc_vocab), n_layers=2,
                                               n_heads=2, d_model=16), lm, 2, seed=6)
    before = ad.frozen_checksum()
    gates0 = ad.gates.data.copy()
    steps = []
    A.train_adapter(ad, feat.items(records), [r.procedure for r in records], [r.label for r in records],
                    A.AdapterTrainConfig(epochs=10, batch_size=4, lr=8e-4), max_steps=200,
                    callback=lambda s, b, c: steps.append(s))
    after = ad.frozen_checksum()
    _detail(request, f"{steps[-1]} steps, checksum {before[:12]} -> {after[:12]}")
    assert steps[-1] == 200
    assert after == before == ad.lm_hash
    assert not np.array_equal(ad.gates.data, gates0)


# -- 4. inference independence -------------------------------------------------------------

class _NoText:
    def __getattr__(self, name):
        raise AssertionError(f"inference touched the text model ({name})")


@pytest.mark.criterion(4)
def test_c04_inference_is_structure_only(small_world, request):
    records, feat = small_world
    assert list(inspect.signature(A.adapter_infer).parameters) == ["adapter", "reactions"]
    assert list(inspect.signature(A.ReacLLaMAAdapter.infer).parameters) == ["self", "batch"]
    assert list(inspect.signature(G.yield_probability).parameters) == ["model", "tr"]
    fields = set(Batch.__dataclass_fields__)
    assert not fields & {"text", "texts", "ids", "procedure", "tokens"}

    rng = np.random.default_rng(4)
    lm = TextLM(TextLMConfig(n_layers=2, n_heads=2, d_text=16, context_length=64), seed=1)
    gcfg = G.GraphormerConfig(len(feat.atom_vocab), len(feat.rsc_vocab), n_layers=2, n_heads=2, d_model=16)
    ad = _randomise(A.ReacLLaMAAdapter(gcfg, lm, 2, seed=2), rng)
    ad.gates.data[:] = 0.8
    base = _randomise(G.GraphormerModel(gcfg, seed=3), rng)
    items = feat.items(records[:20])
    expected = A.adapter_infer(ad, items)
    # the LM is not needed at inference: swap it for an object that fails on any access
    real_lm = ad._lm
    ad._lm = _NoText()
    try:
        np.testing.assert_array_equal(A.adapter_infer(ad, items), expected)
    finally:
        ad._lm = real_lm
    p1, _ = A.adapter_forward(ad, items, [r.procedure for r in records[:20]])
    p2, _ = A.adapter_forward(ad, items, ["unrelated text"] * 20)
    np.testing.assert_array_equal(p1.data, p2.data)

    worst = 0.0
    for rec in records[:20]:
        rxn = parse_reaction(rec.reaction, feat.rsc_vocab)
        a = tokenize_reaction(rxn, feat.atom_vocab, feat.rsc_vocab)
        b = tokenize_reaction(_permute_atoms(rxn, rng), feat.atom_vocab, feat.rsc_vocab)
        worst = max(worst, abs(A.adapter_infer(ad, [a])[0] - A.adapter_infer(ad, [b])[0]),
                    abs(G.yield_probability(base, a)[0] - G.yield_probability(base, b)[0]))
    _detail(request, f"max change under atom permutation {worst:.1e}")
    assert worst < 1e-5


# -- 5. mask exactness ---------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_c05_mask_exactness(small_world, request):
    records, feat = small_world
    rng = np.random.default_rng(5)
    model = _randomise(G.GraphormerModel(G.GraphormerConfig(len(feat.atom_vocab), len(feat.rsc_vocab),
                                                            n_layers=4, n_heads=4, d_model=16)), rng)
    model.dist_bias.data[:] = rng.normal(3.0, 1.0, model.dist_bias.data.shape)
    batch = collate(feat.items(records[:64]))
    rec = []
    model.encode(batch, record=rec)
    pair = (batch.kind < 2)[:, :, None] & (batch.kind == 2)[:, None, :]
    n_pairs = int(pair.sum()) * model.cfg.n_heads * len(rec)
    assert len(rec) == 4 and n_pairs > 0
    for w in rec:
        assert (w.data.transpose(0, 2, 3, 1)[pair] == 0.0).all()
    bias = model.attn_bias(batch).data.transpose(0, 2, 3, 1)
    cross = batch.distance_codes >= CROSS
    assert (bias[cross] == 0.0).all() and (bias[~cross] != 0.0).any()
    _detail(request, f"{n_pairs} atom->RSC weights exactly 0, {int(cross.sum())} CROSS pairs unbiased")


# -- 6. AUC oracle and sweep monotonicity --------------------------------------------------

def _pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0)
               for p, n in itertools.product(pos, neg))
    return float(wins / (len(pos) * len(neg)))


@pytest.mark.criterion(6)
def test_c06_auc_oracle_and_sweep(request):
    rng = np.random.default_rng(6)
    grid = [round(0.2 + 0.05 * k, 10) for k in range(13)]
    n_auc = n_sweep = 0
    while n_auc < 1000:
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            continue
        # coarse scores in half the instances so ties are exercised
        s = rng.integers(0, 10, n) / 10 if n_auc % 2 else rng.random(n)
        assert E.roc_auc(s, y) == _pairwise_auc(s, y)
        n_auc += 1
        curve = E.threshold_sweep(s, y, grid)
        sens = [r.sensitivity for _, r in curve]
        spec = [r.specificity for _, r in curve]
        assert all(b <= a for a, b in zip(sens, sens[1:]))
        assert all(b >= a for a, b in zip(spec, spec[1:]))
        n_sweep += 1
    _detail(request, f"{n_auc} AUC instances exact, {n_sweep} sweeps monotone")


# -- 7. strategy algebra -----------------------------------------------------------------

@pytest.mark.criterion(7)
def test_c07_strategy_algebra(request):
    rng = np.random.default_rng(7)
    strict, loose = zsl.Threshold(0.05, 0.95), zsl.Threshold(0.2, 0.8)
    for _ in range(1000):
        p = rng.random(int(rng.integers(1, 100)))
        p[rng.random(p.size) < 0.1] = 0.5
        ks = {i for i, v in enumerate(zsl.apply_strategy(p, strict)) if v is not None}
        kl = {i for i, v in enumerate(zsl.apply_strategy(p, loose)) if v is not None}
        assert ks <= kl
        cont = zsl.apply_strategy(p, zsl.Continuous())
        assert zsl.apply_strategy(p, zsl.Binary()) == [float(np.floor(c + 0.5)) for c in cont]
    for dtype in ("fast-32", "check-64"):
        with T.precision(dtype):
            for _ in range(200):
                n = int(rng.integers(1, 50))
                p = T.Tensor(rng.uniform(1e-6, 1 - 1e-6, n))
                y = rng.integers(0, 2, n)
                soft = T.soft_target_bce(p, y.astype(float))
                hard = np.asarray(T.hard_bce(p.data, y), dtype=p.data.dtype)
                assert soft.data.tobytes() == hard.tobytes()
    _detail(request, "1000 nesting/rounding instances, 400 bit-exact BCE comparisons")


# -- 8. parser round trip and fuzz -----------------------------------------------------------

@pytest.mark.criterion(8)
def test_c08_corpus_round_trip(request):
    records, _, _ = desk.corpus()
    reactions = sorted({r.reaction for r in records})
    for s in reactions:
        r = parse_reaction(s)
        r2 = parse_reaction(write_reaction(r))
        assert isomorphic(reaction_to_nx(r), reaction_to_nx(r2)), s
    _detail(request, f"{len(records)} records, {len(reactions)} distinct reactions isomorphic after write/parse")


@pytest.mark.criterion(8)
def test_c08_fuzz(request):
    rng = np.random.default_rng(8)
    n = typed = 0
    for s in fuzz_inputs(rng, 100_000):
        assert len(s) <= 4096
        for fn in (parse_molecule, parse_reaction):
            try:
                fn(s)
            except ChemParseError as e:
                assert 0 <= e.offset <= len(s)
                typed += 1
        n += 1
    _detail(request, f"{n} fuzz inputs, {typed} typed rejections, 0 crashes")


# -- 9. determinism -------------------------------------------------------------------------

def _cli(argv):
    return subprocess.run([sys.executable, "-m", "reacfuse.cli", *argv], capture_output=True).returncode


@pytest.mark.criterion(9)
def test_c09_pipeline_is_bit_reproducible(tmp_path, request):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        codes = run_smoke(out, ["--threads", "1"], runner=_cli)
        assert codes == [0] * len(SMOKE_STEPS)
        runs.append(out)
    a, b = runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.suffix in (".csv", ".json"))
    reports = [f for f in files if f.parts[0] == "reports"]
    assert len(reports) >= 10
    differ = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    _detail(request, f"{len(files)} csv/json artifacts ({len(reports)} reports) byte-identical across two runs")
    assert differ == []


# -- 10. MLM capacity -------------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_c10_mlm_accuracy(request):
    _, hist, acc = desk.mlm()
    elapsed = desk.TIMINGS["mlm"]
    _detail(request, f"held-out masked accuracy {acc:.3f} after {len(hist)} epochs on "
                     f"{desk.MLM_RECORDS} reactions, {elapsed / 60:.1f} min")
    assert acc >= 0.90
    assert elapsed < 15 * 60


# -- 11. ZSL labeler quality -------------------------------------------------------------------

@pytest.mark.criterion(11)
def test_c11_labeler(request):
    _, rep, p, _ = desk.labeler(0)
    ba = rep.test_metrics["balanced_accuracy"]
    confident = float(np.mean((p <= 0.2) | (p >= 0.8)))
    _detail(request, f"held-out balanced accuracy {ba:.3f}, {confident:.1%} of probabilities outside (0.2, 0.8)")
    assert ba >= 0.88
    assert confident >= 0.70


# -- 12. length effect -----------------------------------------------------------------------

@pytest.mark.criterion(12)
def test_c12_length_effect(request):
    pairs = [desk.length_effect(s) for s in desk.TRAIN_SEEDS]
    short = desk.median([s for s, _ in pairs])
    long_ = desk.median([l for _, l in pairs])
    _detail(request, f"median specificity shortest quartile {short:.3f} vs longest {long_:.3f}")
    assert long_ < short


# -- 13/14. retraining with extended labels ----------------------------------------------------

@pytest.mark.criterion(13)
def test_c13_specificity_gain(request):
    base = [desk.overall(desk.fine_tuned("baseline", s)) for s in desk.TRAIN_SEEDS]
    ext = [desk.overall(desk.fine_tuned("zsl-continuous", s)) for s in desk.TRAIN_SEEDS]
    spec_b = desk.median([m["specificity"] for m in base])
    spec_z = desk.median([m["specificity"] for m in ext])
    ba_b = desk.median([m["balanced_accuracy"] for m in base])
    ba_z = desk.median([m["balanced_accuracy"] for m in ext])
    slowest = max(v for k, v in desk.TIMINGS.items() if k.startswith(("baseline-", "zsl-continuous-")))
    _detail(request, f"median specificity {spec_b:.3f} -> {spec_z:.3f}, balanced accuracy "
                     f"{ba_b:.3f} -> {ba_z:.3f}, slowest run {slowest / 60:.1f} min")
    assert spec_z > spec_b
    assert ba_z >= ba_b - 0.01
    assert slowest < 30 * 60


@pytest.mark.criterion(14)
def test_c14_threshold_curve(request):
    shares = [desk.sweep_share(s) for s in desk.TRAIN_SEEDS]
    share = desk.median(shares)
    _detail(request, f"median share of thresholds with ZSL >= baseline {share:.2f} (per seed {shares})")
    assert share >= 0.60


# -- 15. label distribution ------------------------------------------------------------------

@pytest.mark.criterion(15)
def test_c15_distribution_interpolates(request):
    ds = desk.extended_continuous()
    rows = {r.name: r for r in ds.distribution()}
    o, z, c = rows["Original"], rows["ZSL"], rows["Combined"]
    assert c.n == o.n + z.n
    assert c.positive == (o.positive * o.n + z.positive * z.n) / c.n
    assert min(o.positive, z.positive) < c.positive < max(o.positive, z.positive)
    assert c.positive + c.negative == 1
    _detail(request, f"Original {o.positive} ({float(o.positive):.3f}), ZSL {z.positive} "
                     f"({float(z.positive):.3f}), Combined {c.positive} ({float(c.positive):.3f})")
