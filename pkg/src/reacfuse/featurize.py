"""Reaction -> encoder inputs: token features, distance codes, attention mask."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from reacfuse import kernels
from reacfuse.chem import Molecule, Reaction, RscVocab

D_MAX = 10
CROSS = D_MAX + 1
NEIGHBOR_CAP = 8
MAX_TOKENS = 256

REACTANT_ATOM, PRODUCT_ATOM, RSC, PAD = 0, 1, 2, 3


class SequenceTooLong(ValueError):
    pass


class AtomVocab:
    """Atom types keyed by (element, charge); id = line number, 0 is unknown."""

    UNK = 0
    UNK_TOKEN = "<unk>"

    def __init__(self, keys=()):
        uniq = sorted(set(keys))
        self.keys = [None] + uniq
        self._index = {k: i for i, k in enumerate(self.keys) if k is not None}

    def __len__(self):
        return len(self.keys)

    @property
    def mask_id(self):
        return len(self.keys)

    def id(self, element, charge=0):
        return self._index.get((element, charge), self.UNK)

    def dumps(self):
        rows = [self.UNK_TOKEN] + [f"{e}|{c}" for e, c in self.keys[1:]]
        return "\n".join(rows) + "\n"

    def to_file(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_file(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != cls.UNK_TOKEN:
            raise ValueError(f"{path}: line 0 must be {cls.UNK_TOKEN!r}")
        vocab = cls()
        vocab.keys = [None]
        for line in lines[1:]:
            el, ch = line.split("|")
            vocab.keys.append((el, int(ch)))
        vocab._index = {k: i for i, k in enumerate(vocab.keys) if k is not None}
        return vocab

    @classmethod
    def from_reactions(cls, reactions):
        keys = set()
        for r in reactions:
            for m in (*r.reactants, r.product):
                keys.update((a.element, a.formal_charge) for a in m.atoms)
        return cls(keys)


@dataclass(frozen=True)
class ReactionToken:
    kind: int
    atom_type_id: int | None
    neighbor_count: int | None
    rsc_id: int | None
    molecule_id: int
    component_id: int


@dataclass
class TokenizedReaction:
    """Struct-of-arrays token table; index ``i`` is token ``i``.

    ``atom_type``/``neighbor_count``/``atom_index`` are -1 on RSC tokens and
    ``rsc_id`` is -1 on atom tokens. ``mask[i, j]`` True means i may attend to j.
    """

    kind: np.ndarray
    atom_type: np.ndarray
    neighbor_count: np.ndarray
    rsc_id: np.ndarray
    molecule_id: np.ndarray
    component_id: np.ndarray
    atom_index: np.ndarray
    distance_codes: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.kind)

    @property
    def tokens(self):
        out = []
        for i in range(len(self.kind)):
            atom = self.kind[i] != RSC
            out.append(ReactionToken(
                kind=int(self.kind[i]),
                atom_type_id=int(self.atom_type[i]) if atom else None,
                neighbor_count=int(self.neighbor_count[i]) if atom else None,
                rsc_id=None if atom else int(self.rsc_id[i]),
                molecule_id=int(self.molecule_id[i]),
                component_id=int(self.component_id[i]),
            ))
        return out


def shortest_path_matrix(m: Molecule, d_max: int = D_MAX, cross: int = CROSS) -> np.ndarray:
    """BFS hop counts clipped to ``d_max``; other-component pairs get ``cross``."""
    if not m.atoms:
        return np.zeros((0, 0), dtype=np.int64)
    indptr, indices = m.csr()
    return kernels.bfs_distances(len(m.atoms), np.asarray(indptr, dtype=np.int64),
                                 np.asarray(indices, dtype=np.int64), d_max, cross)


def attention_mask(kind) -> np.ndarray:
    """Atoms never attend to RSC tokens; every other pair is allowed."""
    kind = np.asarray(kind)
    is_atom = kind != RSC
    is_rsc = kind == RSC
    return ~(is_atom[:, None] & is_rsc[None, :])


def distance_codes(kind, molecule_id, atom_index, path_matrices, cross: int = CROSS) -> np.ndarray:
    """Same-molecule atom pairs take the path code; everything else is ``cross``."""
    n = len(kind)
    out = np.full((n, n), cross, dtype=np.int64)
    kind = np.asarray(kind)
    molecule_id = np.asarray(molecule_id)
    for mol, paths in enumerate(path_matrices):
        idx = np.flatnonzero((molecule_id == mol) & (kind != RSC))
        if idx.size:
            out[np.ix_(idx, idx)] = paths[np.asarray(atom_index)[idx]][:, np.asarray(atom_index)[idx]]
    return out


def tokenize_reaction(r: Reaction, atom_vocab: AtomVocab, rsc_vocab: RscVocab | None = None,
                      max_tokens: int = MAX_TOKENS, neighbor_cap: int = NEIGHBOR_CAP,
                      d_max: int = D_MAX) -> TokenizedReaction:
    """Tokens: reactant atoms (molecule order), product atoms, then RSC tokens.

    RSC ids are taken from ``r.rsc_ids`` unless ``rsc_vocab`` is given, in which
    case the agent strings are looked up (unknown -> UNK).
    """
    mols = list(r.reactants) + [r.product]
    n_atoms = sum(len(m) for m in mols)
    n = n_atoms + len(r.rsc_ids)
    if n > max_tokens:
        raise SequenceTooLong(f"{n} tokens > MAX_TOKENS={max_tokens}")
    kind, atype, neigh, rsc, mol_id, comp, aidx = ([] for _ in range(7))
    paths = []
    for mi, m in enumerate(mols):
        role = PRODUCT_ATOM if mi == len(mols) - 1 else REACTANT_ATOM
        hs = m.hydrogen_counts()
        deg = m.heavy_degrees()
        for ai, atom in enumerate(m.atoms):
            kind.append(role)
            atype.append(atom_vocab.id(atom.element, atom.formal_charge))
            neigh.append(min(deg[ai] + hs[ai], neighbor_cap))
            rsc.append(-1)
            mol_id.append(mi)
            comp.append(m.component_ids[ai])
            aidx.append(ai)
        paths.append(shortest_path_matrix(m, d_max, d_max + 1))
    if rsc_vocab is not None and r.agents:
        ids = [rsc_vocab.id(a) for a in r.agents]
    else:
        ids = list(r.rsc_ids)
    for k, rid in enumerate(ids):
        kind.append(RSC)
        atype.append(-1)
        neigh.append(-1)
        rsc.append(rid)
        mol_id.append(len(mols) + k)
        comp.append(-1)
        aidx.append(-1)
    kind = np.asarray(kind, dtype=np.int64)
    mol_id = np.asarray(mol_id, dtype=np.int64)
    aidx = np.asarray(aidx, dtype=np.int64)
    return TokenizedReaction(
        kind=kind,
        atom_type=np.asarray(atype, dtype=np.int64),
        neighbor_count=np.asarray(neigh, dtype=np.int64),
        rsc_id=np.asarray(rsc, dtype=np.int64),
        molecule_id=mol_id,
        component_id=np.asarray(comp, dtype=np.int64),
        atom_index=aidx,
        distance_codes=distance_codes(kind, mol_id, aidx, paths, d_max + 1),
        mask=attention_mask(kind),
    )


@dataclass
class MlmTargets:
    """Masked positions with their original ids and token kinds."""

    positions: np.ndarray
    original_ids: np.ndarray
    kinds: np.ndarray


def mask_for_mlm(tr: TokenizedReaction, mask_rate: float, rng_seed, atom_mask_id: int,
                 rsc_mask_id: int):
    """Replace a Bernoulli(mask_rate) subset of atom types / RSC ids by MASK ids."""
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie in (0, 1)")
    rng = np.random.default_rng(rng_seed)
    hit = rng.random(len(tr)) < mask_rate
    pos = np.flatnonzero(hit)
    is_rsc = tr.kind[pos] == RSC
    orig = np.where(is_rsc, tr.rsc_id[pos], tr.atom_type[pos])
    atype = tr.atom_type.copy()
    rsc = tr.rsc_id.copy()
    atype[pos[~is_rsc]] = atom_mask_id
    rsc[pos[is_rsc]] = rsc_mask_id
    corrupted = replace(tr, atom_type=atype, rsc_id=rsc)
    return corrupted, MlmTargets(pos, orig, tr.kind[pos])


@dataclass
class Batch:
    """Padded batch; pad tokens have kind PAD and only attend to themselves."""

    kind: np.ndarray
    atom_type: np.ndarray
    neighbor_count: np.ndarray
    rsc_id: np.ndarray
    distance_codes: np.ndarray
    mask: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return self.kind.shape[0]


def collate(items, cross: int = CROSS) -> Batch:
    b = len(items)
    n = max(len(t) for t in items)
    kind = np.full((b, n), PAD, dtype=np.int64)
    atype = np.zeros((b, n), dtype=np.int64)
    neigh = np.zeros((b, n), dtype=np.int64)
    rsc = np.zeros((b, n), dtype=np.int64)
    dist = np.full((b, n, n), cross, dtype=np.int64)
    mask = np.zeros((b, n, n), dtype=bool)
    valid = np.zeros((b, n), dtype=bool)
    for i, t in enumerate(items):
        k = len(t)
        kind[i, :k] = t.kind
        atype[i, :k] = np.maximum(t.atom_type, 0)
        neigh[i, :k] = np.maximum(t.neighbor_count, 0)
        rsc[i, :k] = np.maximum(t.rsc_id, 0)
        dist[i, :k, :k] = t.distance_codes
        mask[i, :k, :k] = t.mask
        valid[i, :k] = True
    pad = ~valid
    idx = np.arange(n)
    mask[:, idx, idx] |= pad
    return Batch(kind, atype, neigh, rsc, dist, mask, valid)


def mask_batch(batch: Batch, mask_rate: float, rng, atom_mask_id: int, rsc_mask_id: int,
               n_atom_types: int):
    """Batched MLM corruption.

    Returns the corrupted batch plus ``(rows, cols, joint_targets)`` where RSC
    targets are offset by ``n_atom_types`` into the joint output space.
    """
    hit = (rng.random(batch.kind.shape) < mask_rate) & batch.valid
    rows, cols = np.nonzero(hit)
    is_rsc = batch.kind[rows, cols] == RSC
    targets = np.where(is_rsc, batch.rsc_id[rows, cols] + n_atom_types, batch.atom_type[rows, cols])
    atype = batch.atom_type.copy()
    rsc = batch.rsc_id.copy()
    atype[rows[~is_rsc], cols[~is_rsc]] = atom_mask_id
    rsc[rows[is_rsc], cols[is_rsc]] = rsc_mask_id
    return replace(batch, atom_type=atype, rsc_id=rsc), (rows, cols, targets)
