"""Deterministic synthetic ELN corpus with a planted, structure-only success rule.

Each record draws its randomness from its own stream seeded by
``(seed, index)``, so output is independent of generation order and threads.

Success model: a record is built as rule-compatible with probability
``c = (t - eps) / (1 - 2 eps)`` where ``t`` is the target positive share of its
pool (labeled or unlabeled); success is then Bernoulli(1 - eps) when
compatible and Bernoulli(eps) otherwise, so the expected success share is
exactly ``t``.
"""

from __future__ import annotations

import datetime as _dt
import json
from dataclasses import dataclass

import numpy as np

from reacfuse.textlm import ElnRecord

# -- motif library ---------------------------------------------------------------
# Kekule forms only; cores use ring digit 1, partner fragments ring digit 2.

CORES = (
    "C1=CC=C(C=C1)",
    "CC1=CC=C(C=C1)",
    "COC1=CC=C(C=C1)",
    "N1=CC=C(C=C1)",
    "CC(=O)C1=CC=C(C=C1)",
)
HANDLES = {"Cl": "Cl", "Br": "Br", "I": "I", "OTf": "OS(=O)(=O)C(F)(F)F"}

# class -> [(reactant, fragment bonded to the core in the product)]
PARTNERS = {
    "boronic": [("OB(O)C2=CC=CC=C2", "C2=CC=CC=C2"), ("OB(O)C2=CC=C(F)C=C2", "C2=CC=C(F)C=C2")],
    "amine": [("NCCCC", "NCCCC"), ("N2CCOCC2", "N2CCOCC2")],
    "alkyne": [("C#CC2=CC=CC=C2", "C#CC2=CC=CC=C2"), ("C#CCCC", "C#CCCC")],
    "alcohol": [("OCC2=CC=CC=C2", "OCC2=CC=CC=C2"), ("OC(C)C", "OC(C)C")],
    "thiol": [("SCC2=CC=CC=C2", "SCC2=CC=CC=C2"), ("SC(C)(C)C", "SC(C)(C)C")],
}

CATALYSTS = {
    "Pd": ["[Pd]", "Cl[Pd]Cl", "CC(=O)O[Pd]OC(C)=O"],
    "Cu": ["I[Cu]"],
    "Ni": ["Cl[Ni]Cl"],
    "Fe": ["Cl[Fe](Cl)Cl"],
    "Co": ["Cl[Co]Cl"],
}
BASES = ["CCN(CC)CC", "C1CCNCC1"]
SOLVENTS = {"DMF": "CN(C)C=O", "THF": "C1CCOC1", "EtOH": "CCO"}
POISONS = ["CCS", "[Hg]"]

_CAT_NAMES = {"[Pd]": "Pd black", "Cl[Pd]Cl": "PdCl2", "CC(=O)O[Pd]OC(C)=O": "Pd(OAc)2",
              "I[Cu]": "CuI", "Cl[Ni]Cl": "NiCl2", "Cl[Fe](Cl)Cl": "FeCl3", "Cl[Co]Cl": "CoCl2"}
_BASE_NAMES = {"CCN(CC)CC": "triethylamine", "C1CCNCC1": "piperidine"}
_POISON_NAMES = {"CCS": "ethanethiol", "[Hg]": "mercury"}
_CORE_NAMES = ("phenyl", "tolyl", "anisyl", "pyridyl", "acetylphenyl")
_HANDLE_NAMES = {"Cl": "chloride", "Br": "bromide", "I": "iodide", "OTf": "triflate"}
_PARTNER_NAMES = {
    "OB(O)C2=CC=CC=C2": "phenylboronic acid", "OB(O)C2=CC=C(F)C=C2": "4-fluorophenylboronic acid",
    "NCCCC": "butylamine", "N2CCOCC2": "morpholine", "C#CC2=CC=CC=C2": "phenylacetylene",
    "C#CCCC": "1-pentyne", "OCC2=CC=CC=C2": "benzyl alcohol", "OC(C)C": "isopropanol",
    "SCC2=CC=CC=C2": "benzyl mercaptan", "SC(C)(C)C": "tert-butyl thiol",
}

RULE_SEED = 20240417


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    n_records: int = 10_000
    unlabeled_fraction: float = 0.30
    labeled_pos_fraction: float = 0.75
    unlabeled_pos_fraction: float = 0.58
    near_empty_fraction: float = 0.002
    noise_rate: float = 0.05
    pd_fraction: float = 0.0125
    text_noise: float = 0.03
    seed: int = 0

    def validate(self):
        if not isinstance(self.n_records, (int, np.integer)) or self.n_records < 0:
            raise InvalidSpec("n_records must be a non-negative integer")
        for name in ("unlabeled_fraction", "labeled_pos_fraction", "unlabeled_pos_fraction",
                     "near_empty_fraction", "noise_rate", "pd_fraction", "text_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidSpec(f"{name}={v} outside [0, 1]")
        eps = self.noise_rate
        if eps >= 0.5:
            raise InvalidSpec("noise_rate must be < 0.5")
        for name in ("labeled_pos_fraction", "unlabeled_pos_fraction"):
            t = getattr(self, name)
            if not eps <= t <= 1.0 - eps:
                raise InvalidSpec(f"{name}={t} unreachable with noise_rate={eps}")
        return self


@dataclass(frozen=True)
class RuleVerdict:
    compatible: bool
    rule_id: str


class PlantedRule:
    """Compatibility table over (substrate template, partner, catalyst) plus a
    poison set that forces failure.

    Cells come from a thresholded score: main effects per substrate, partner
    and catalyst, interactions handle x partner class and partner class x
    catalyst, and a small per-cell term. The table is learnable from structure
    but needs data to pin down.
    """

    def __init__(self, seed=RULE_SEED):
        rng = np.random.default_rng(seed)
        self.substrates = [(ci, h) for ci in range(len(CORES)) for h in sorted(HANDLES)]
        self.partners = [(cls, r, frag) for cls in sorted(PARTNERS) for r, frag in PARTNERS[cls]]
        self.catalysts = [(fam, smi) for fam in sorted(CATALYSTS) for smi in CATALYSTS[fam]]
        handles, classes = sorted(HANDLES), sorted(PARTNERS)
        n_s, n_p, n_c = len(self.substrates), len(self.partners), len(self.catalysts)
        score = (rng.normal(0, 1, n_s)[:, None, None] + rng.normal(0, 1, n_p)[None, :, None]
                 + rng.normal(0, 1, n_c)[None, None, :])
        hp = rng.normal(0, 1, (len(handles), len(classes)))
        pc = rng.normal(0, 1, (len(classes), n_c))
        for si, (_, h) in enumerate(self.substrates):
            for pi, (cls, _, _) in enumerate(self.partners):
                score[si, pi, :] += hp[handles.index(h), classes.index(cls)] + pc[classes.index(cls)]
        score += rng.normal(0, 0.3, score.shape)
        self.table = score > np.median(score)
        self._sub = {CORES[ci] + HANDLES[h]: i for i, (ci, h) in enumerate(self.substrates)}
        self._partner = {r: i for i, (_, r, _) in enumerate(self.partners)}
        self._cat = {smi: i for i, (_, smi) in enumerate(self.catalysts)}
        self.pd_catalysts = [i for i, (fam, _) in enumerate(self.catalysts) if fam == "Pd"]
        self.other_catalysts = [i for i, (fam, _) in enumerate(self.catalysts) if fam != "Pd"]
        for group in (self.pd_catalysts, self.other_catalysts):
            sub = self.table[:, :, group]
            if sub.all() or not sub.any():
                raise AssertionError("catalyst group without both outcomes")

    def evaluate(self, reaction: str) -> RuleVerdict:
        """Ground truth from the structured reaction string alone."""
        reactants, agents, _ = reaction.split(">")
        sub, partner = reactants.split(".")
        agent_list = agents.split(".")
        si, pi = self._sub[sub], self._partner[partner]
        ci = next(self._cat[a] for a in agent_list if a in self._cat)
        cell = f"s{si}/p{pi}/c{ci}"
        poison = [a for a in agent_list if a in POISONS]
        if poison:
            return RuleVerdict(False, f"poison:{poison[0]}")
        return RuleVerdict(bool(self.table[si, pi, ci]), cell)

    def describe(self) -> str:
        lines = ["# planted success rule", f"# rule_seed {RULE_SEED}",
                 "# compatible iff table[substrate, partner, catalyst] == 1 and no poison agent",
                 f"# poisons: {' '.join(POISONS)}", "", "[substrates] id smiles"]
        lines += [f"s{i} {CORES[ci]}{HANDLES[h]}" for i, (ci, h) in enumerate(self.substrates)]
        lines += ["", "[partners] id class smiles"]
        lines += [f"p{i} {cls} {r}" for i, (cls, r, _) in enumerate(self.partners)]
        lines += ["", "[catalysts] id family smiles"]
        lines += [f"c{i} {fam} {smi}" for i, (fam, smi) in enumerate(self.catalysts)]
        lines += ["", "[table] substrate partner catalyst compatible"]
        for si in range(len(self.substrates)):
            for pi in range(len(self.partners)):
                for ci in range(len(self.catalysts)):
                    lines.append(f"s{si} p{pi} c{ci} {int(self.table[si, pi, ci])}")
        return "\n".join(lines) + "\n"


# -- text templates --------------------------------------------------------------
# No "%" anywhere and no "pos"/"neg" substrings (leak guard on formatted text).

_OPENERS = [
    "{sub} ({m1} mg, {n1} mmol), {partner} ({n2} mmol), {cat} ({eq} equiv) and {base} in {solv} "
    "({vol} mL) were stirred at {temp} C for {time} h.",
    "To a solution of {sub} ({m1} mg) in {solv} ({vol} mL) were added {partner} ({n2} mmol), "
    "{base} and {cat}. The mixture was heated to {temp} C for {time} h.",
    "A vial was charged with {sub} ({n1} mmol), {partner}, {cat} and {base}; {solv} ({vol} mL) "
    "was added and the mixture stirred at {temp} C overnight.",
]
_FILLERS = [
    "The mixture was degassed with argon for {k} min.",
    "The vessel was sealed and the temperature was held at {temp} C.",
    "An aliquot was taken after {k} min and analysed by LCMS.",
    "Additional {solv} ({vol} mL) was added to keep the mixture stirrable.",
    "The reaction was monitored by TLC every {k} min.",
    "The flask was wrapped in foil to exclude light.",
    "A further portion of {base} was added after {k} min.",
    "Stirring was continued and the colour of the mixture changed slowly.",
]
_SUCCESS_CUES = [
    "LCMS showed full conversion to the product.",
    "TLC indicated complete consumption of the starting material and a new main spot.",
    "Clean conversion to the desired product was observed.",
    "The product precipitated from the mixture.",
]
_FAILURE_CUES = [
    "No conversion was observed.",
    "The reaction failed.",
    "Only starting material was detected.",
    "LCMS showed no product formation.",
    "TLC showed unreacted starting material only.",
]
# sentences after the cue follow the reported outcome, as work-up does in practice
_SUCCESS_TAIL = [
    "After cooling to room temperature the mixture was diluted with ethyl acetate ({vol} mL).",
    "The organic layer was washed with water and brine, dried over sodium sulfate and filtered.",
    "The solvent was removed under reduced pressure.",
    "Chromatography on silica gave the title compound as a white solid ({mass} mg).",
    "The product was collected by filtration and dried, {mass} mg.",
    "The structure was confirmed by NMR.",
    "The combined extracts were concentrated and the residue was dried in vacuo.",
]
_FAILURE_TAIL = [
    "The mixture was discarded.",
    "The attempt was abandoned.",
    "No further work-up was done.",
    "The conditions will be revised.",
]
_NEAR_EMPTY_SUCCESS = ["product isolated", "worked well", "desired product obtained", "success"]
_NEAR_EMPTY_FAILURE = ["failed", "no reaction", "no product", "reaction failed"]
_NEAR_EMPTY_NEUTRAL = ["see notebook", "repeat", "as before"]
_TECHNOLOGIES = ["Batch", "Flow", "Microwave", "Parallel synthesis"]
_COMMENTS = ["", "", "", "", "scale-up", "new batch of reagent", "run overnight"]
_SUCCESS_COMMENTS = ["clean reaction", "sample sent for analysis", "material carried forward"]
_FAILURE_COMMENTS = ["to be repeated", "needs new conditions", "stalled"]
_COMMENT_CUE_RATE = 0.4
_MAX_CHARS = 2900


def _fmt(rng, template, ctx):
    return template.format(**ctx, k=int(rng.integers(5, 60)), mass=int(rng.integers(3, 900)))


def _procedure(rng, success_cue: bool, succeeded: bool, labeled: bool, ctx, extra=None) -> str:
    """Opener, neutral reaction-phase sentences, the outcome cue, then a tail
    consistent with the cue.

    Successful runs carry more reaction-phase sentences, so long texts are
    mostly successes; past the LM context the cue and tail are cut off.
    """
    mean_fill = 1.6 if succeeded else 0.6
    if not labeled:
        mean_fill *= 0.7
    n_fill = int(rng.geometric(1.0 / (1.0 + mean_fill))) - 1
    parts = [_fmt(rng, _OPENERS[rng.integers(len(_OPENERS))], ctx)]
    if extra:
        parts.append(extra)
    cues, tail = (_SUCCESS_CUES, _SUCCESS_TAIL) if success_cue else (_FAILURE_CUES, _FAILURE_TAIL)
    n_tail = int(rng.integers(1, 4)) if success_cue else int(rng.integers(0, 2))
    ending = [_fmt(rng, cues[rng.integers(len(cues))], ctx)]
    ending += [_fmt(rng, t, ctx) for t in rng.choice(tail, size=n_tail, replace=False)]
    budget = _MAX_CHARS - sum(len(p) + 1 for p in parts + ending)
    for _ in range(n_fill):
        s = _fmt(rng, _FILLERS[rng.integers(len(_FILLERS))], ctx)
        if len(s) + 1 > budget:
            break
        parts.append(s)
        budget -= len(s) + 1
    return " ".join(parts + ending)


def _comment(rng, success_cue: bool) -> str:
    if rng.random() < _COMMENT_CUE_RATE:
        bank = _SUCCESS_COMMENTS if success_cue else _FAILURE_COMMENTS
    else:
        bank = _COMMENTS
    return bank[rng.integers(len(bank))]


def _ctx(rng, sub_name, partner_name, cat, base, solv):
    return {
        "sub": sub_name, "partner": partner_name, "cat": _CAT_NAMES[cat], "base": _BASE_NAMES[base],
        "solv": solv, "m1": int(rng.integers(20, 500)), "n1": round(float(rng.uniform(0.1, 5)), 2),
        "n2": round(float(rng.uniform(0.1, 8)), 2), "eq": round(float(rng.uniform(0.01, 0.2)), 2),
        "vol": int(rng.integers(1, 40)), "temp": int(rng.integers(20, 140)),
        "time": int(rng.integers(1, 48)),
    }


_EPOCH0 = _dt.date(2015, 1, 1).toordinal()
_EPOCH1 = _dt.date(2022, 12, 31).toordinal()


def _draw_combo(rng, rule: PlantedRule, want_compatible: bool, pd: bool):
    cats = rule.pd_catalysts if pd else rule.other_catalysts
    while True:
        si = int(rng.integers(len(rule.substrates)))
        pi = int(rng.integers(len(rule.partners)))
        ci = cats[rng.integers(len(cats))]
        ok = bool(rule.table[si, pi, ci])
        poison = None
        if not want_compatible and ok:
            if rng.random() < 0.3:
                poison = POISONS[rng.integers(len(POISONS))]
            else:
                continue
        elif want_compatible != ok:
            continue
        return si, pi, ci, poison


def generate_one(spec: GeneratorSpec, index: int, rule: PlantedRule | None = None):
    """Record ``index`` plus its hidden ground truth and rule id."""
    rule = rule or PlantedRule()
    rng = np.random.default_rng([spec.seed, index])
    labeled = rng.random() >= spec.unlabeled_fraction
    pd = rng.random() < spec.pd_fraction
    near_empty = rng.random() < spec.near_empty_fraction
    eps = spec.noise_rate
    target = spec.labeled_pos_fraction if labeled else spec.unlabeled_pos_fraction
    want = rng.random() < (target - eps) / (1.0 - 2.0 * eps)
    si, pi, ci_cat, poison = _draw_combo(rng, rule, want, pd)
    ci, handle = rule.substrates[si]
    _, partner, frag = rule.partners[pi]
    cat = rule.catalysts[ci_cat][1]
    solv = sorted(SOLVENTS)[rng.integers(len(SOLVENTS))]
    compatible = want
    success = rng.random() < ((1.0 - eps) if compatible else eps)

    base = BASES[rng.integers(len(BASES))]
    # catalyst and solvent always present; the third slot holds a base or a poison
    agents = [cat, SOLVENTS[solv]]
    if poison is not None:
        agents.append(poison)
    elif rng.random() < 0.5:
        agents.append(base)
    substrate = CORES[ci] + HANDLES[handle]
    reaction = f"{substrate}.{partner}>{'.'.join(agents)}>{CORES[ci]}{frag}"

    cue_success = success if rng.random() >= spec.text_noise else not success
    sub_name = f"{_CORE_NAMES[ci]} {_HANDLE_NAMES[handle]}"
    ctx = _ctx(rng, sub_name, _PARTNER_NAMES[partner], cat, base, solv)
    if near_empty:
        r = rng.random()
        bank = _NEAR_EMPTY_NEUTRAL if r < 0.25 else (_NEAR_EMPTY_SUCCESS if cue_success else _NEAR_EMPTY_FAILURE)
        procedure = bank[rng.integers(len(bank))]
    else:
        extra = None if poison is None else f"Some {_POISON_NAMES[poison]} was present as an additive."
        procedure = _procedure(rng, cue_success, success, labeled, ctx, extra)
    if "%" in procedure or "pos" in procedure or "neg" in procedure:
        raise AssertionError(f"template leak on record {index}")

    yield_pct = outcome = None
    if labeled:
        if success:
            if rng.random() < 0.85:
                yield_pct = round(float(rng.uniform(5.0, 95.0)), 1)
            else:
                outcome = "pos"
        else:
            if rng.random() < 0.5:
                yield_pct = round(float(rng.uniform(0.0, 4.9)), 1)
            else:
                outcome = "neg"
    day = _dt.date.fromordinal(int(rng.integers(_EPOCH0, _EPOCH1 + 1)))
    rec = ElnRecord(
        reaction=reaction,
        technology=_TECHNOLOGIES[rng.integers(len(_TECHNOLOGIES))],
        procedure=procedure,
        comments=_comment(rng, cue_success),
        product_label=f"P{int(rng.integers(1, 13))}",
        yield_pct=yield_pct,
        outcome_label=outcome,
        timestamp=day.isoformat(),
        tags=("Pd",) if pd else (),
    )
    verdict = rule.evaluate(reaction)
    if verdict.compatible != compatible:
        raise AssertionError(f"rule disagrees with generator on record {index}")
    return rec, int(success), verdict.rule_id


def generate(spec: GeneratorSpec):
    """List of (ElnRecord, ground_truth, rule_id) for indices 0..n-1."""
    spec.validate()
    rule = PlantedRule()
    return [generate_one(spec, i, rule) for i in range(spec.n_records)]


def to_jsonl(rows) -> str:
    out = []
    for rec, truth, rule_id in rows:
        d = rec.to_json()
        d["ground_truth"] = truth
        d["rule_id"] = rule_id
        out.append(json.dumps(d, sort_keys=True, ensure_ascii=False))
    return "\n".join(out) + ("\n" if out else "")


def read_ground_truth(path):
    """Hidden fields by line; test and audit use only."""
    with open(path, encoding="utf-8") as fh:
        return [(d["ground_truth"], d["rule_id"]) for d in map(json.loads, fh) if d]


def temporal_split(records, test_fraction=0.10, timestamp=lambda r: r.timestamp):
    """Newest ``test_fraction`` (by timestamp, ties by position) becomes the test set."""
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError("test_fraction must lie in [0, 1]")
    records = list(records)
    order = sorted(range(len(records)), key=lambda i: (timestamp(records[i]), i))
    n_test = int(round(test_fraction * len(records)))
    cut = len(records) - n_test
    return [records[i] for i in order[:cut]], [records[i] for i in order[cut:]]


def random_split(records, ratio=0.8, seed=0):
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    records = list(records)
    perm = np.random.default_rng(seed).permutation(len(records))
    cut = int(round(ratio * len(records)))
    return [records[i] for i in perm[:cut]], [records[i] for i in perm[cut:]]
