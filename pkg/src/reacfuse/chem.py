"""Reaction-notation parsing: a strict SMILES subset to molecular graphs and back.

Grammar (EBNF)::

    reaction   ::= molecules ">" agents? ">" molecule
    agents     ::= molecule ("." molecule)*          (each piece is one RSC)
    molecule   ::= chain ("." chain)*
    chain      ::= atom (bond? (atom | ring) | branch)*
    branch     ::= "(" bond? chain ")"
    atom       ::= organic | "[" element ("H" digit?)? charge? "]"
    organic    ::= "B" | "C" | "N" | "O" | "P" | "S" | "F" | "Cl" | "Br" | "I"
    charge     ::= ("+" | "-") digit? | "++" | "--"
    bond       ::= "-" | "=" | "#"
    ring       ::= bond? ("1".."9")

Aromatic atoms, stereo marks, isotopes, atom classes, ``%nn`` ring labels and
the ``:``, ``/``, ``\\``, ``$`` bonds are rejected with
:class:`UnsupportedFeature`. Every error carries the byte offset it refers to.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

ORGANIC = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")

# Single source of truth for implicit hydrogens. Charge adjustment: +charge for
# the nitrogen family (N, P), -|charge| for everything else; result floored at 0.
DEFAULT_VALENCE = {
    "B": 3, "C": 4, "N": 3, "O": 2, "P": 3, "S": 2,
    "F": 1, "Cl": 1, "Br": 1, "I": 1, "H": 1,
}
NITROGEN_FAMILY = frozenset({"N", "P"})

ELEMENTS = frozenset("""
H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn
Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La
Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po
At Rn Fr Ra Ac Th Pa U Np Pu
""".split())

MAX_CHARGE = 4
_AROMATIC = set("bcnops")
_BOND_SYMBOL = {1: "", 2: "=", 3: "#"}
_BOND_ORDER = {"-": 1, "=": 2, "#": 3}


class ChemParseError(ValueError):
    """Base class for notation errors; ``offset`` is a 0-based byte index."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class EmptyInput(ChemParseError):
    pass


class UnbalancedParenthesis(ChemParseError):
    pass


class UnclosedRingBond(ChemParseError):
    pass


class UnknownElement(ChemParseError):
    pass


class UnsupportedFeature(ChemParseError):
    pass


class UnexpectedCharacter(ChemParseError):
    pass


class InvalidBond(ChemParseError):
    pass


class MissingSegment(ChemParseError):
    pass


class MultipleProducts(ChemParseError):
    pass


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0
    explicit_h: int | None = None

    def __post_init__(self):
        if self.element not in ELEMENTS:
            raise ValueError(f"unknown element {self.element!r}")
        if abs(self.formal_charge) > MAX_CHARGE:
            raise ValueError(f"|charge| > {MAX_CHARGE}")
        if self.explicit_h is not None and self.explicit_h < 0:
            raise ValueError("negative hydrogen count")

    @property
    def bracket(self) -> bool:
        return self.explicit_h is not None


def implicit_hydrogen_count(atom: Atom, bond_order_sum: int) -> int:
    if atom.explicit_h is not None:
        return atom.explicit_h
    valence = DEFAULT_VALENCE.get(atom.element)
    if valence is None:
        return 0
    if atom.element in NITROGEN_FAMILY:
        adj = atom.formal_charge
    else:
        adj = -abs(atom.formal_charge)
    return max(0, valence - bond_order_sum + adj)


def _components(n, bonds):
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j, _ in bonds:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    labels, out = {}, []
    for i in range(n):
        out.append(labels.setdefault(find(i), len(labels)))
    return tuple(out)


@dataclass(frozen=True)
class Molecule:
    atoms: tuple
    bonds: tuple
    component_ids: tuple = field(default=None)

    def __post_init__(self):
        n = len(self.atoms)
        seen = set()
        for i, j, order in self.bonds:
            if not (0 <= i < j < n):
                raise ValueError(f"bad bond endpoints ({i}, {j})")
            if order not in (1, 2, 3):
                raise ValueError(f"bad bond order {order}")
            if (i, j) in seen:
                raise ValueError(f"duplicate bond ({i}, {j})")
            seen.add((i, j))
        comps = _components(n, self.bonds)
        if self.component_ids is None:
            object.__setattr__(self, "component_ids", comps)
        elif tuple(self.component_ids) != comps:
            raise ValueError("component_ids disagree with bond connectivity")

    @classmethod
    def build(cls, atoms, bonds):
        bonds = tuple(sorted((min(i, j), max(i, j), o) for i, j, o in bonds))
        return cls(tuple(atoms), bonds)

    def __len__(self):
        return len(self.atoms)

    @property
    def n_components(self):
        return max(self.component_ids) + 1 if self.atoms else 0

    def adjacency(self):
        adj = [[] for _ in self.atoms]
        for i, j, o in self.bonds:
            adj[i].append((j, o))
            adj[j].append((i, o))
        return adj

    def bond_order_sums(self):
        sums = [0] * len(self.atoms)
        for i, j, o in self.bonds:
            sums[i] += o
            sums[j] += o
        return sums

    def heavy_degrees(self):
        deg = [0] * len(self.atoms)
        for i, j, _ in self.bonds:
            deg[i] += 1
            deg[j] += 1
        return deg

    def hydrogen_counts(self):
        return [implicit_hydrogen_count(a, s) for a, s in zip(self.atoms, self.bond_order_sums())]

    def csr(self):
        """Neighbour lists as ``(indptr, indices)``."""
        adj = self.adjacency()
        indptr, indices = [0], []
        for nbrs in adj:
            indices.extend(sorted(j for j, _ in nbrs))
            indptr.append(len(indices))
        return indptr, indices

    def split_components(self):
        """One Molecule per connected component, in order of first atom."""
        groups = {}
        for i, c in enumerate(self.component_ids):
            groups.setdefault(c, []).append(i)
        out = []
        for c in sorted(groups):
            idx = groups[c]
            remap = {old: new for new, old in enumerate(idx)}
            bonds = [(remap[i], remap[j], o) for i, j, o in self.bonds if i in remap]
            out.append(Molecule.build([self.atoms[i] for i in idx], bonds))
        return out


@dataclass(frozen=True)
class Reaction:
    reactants: tuple
    product: Molecule
    rsc_ids: tuple = ()
    agents: tuple = ()

    def __post_init__(self):
        if not self.reactants:
            raise ValueError("reaction needs at least one reactant")
        if self.agents and len(self.agents) != len(self.rsc_ids):
            raise ValueError("agents and rsc_ids must align")


class RscVocab:
    """RSC dictionary; id = line number, id 0 is reserved for unknown agents."""

    UNK = 0
    UNK_TOKEN = "<unk>"

    def __init__(self, names=()):
        uniq = sorted({n for n in names if n != self.UNK_TOKEN})
        self.tokens = [self.UNK_TOKEN] + uniq
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, name):
        return name in self._index and name != self.UNK_TOKEN

    def id(self, name):
        return self._index.get(name, self.UNK)

    def name(self, idx):
        return self.tokens[idx]

    def to_file(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def dumps(self):
        return "\n".join(self.tokens) + "\n"

    @classmethod
    def from_file(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != cls.UNK_TOKEN:
            raise ValueError(f"{path}: line 0 must be {cls.UNK_TOKEN!r}")
        vocab = cls()
        vocab.tokens = lines
        vocab._index = {t: i for i, t in enumerate(lines)}
        return vocab


# -- parsing -----------------------------------------------------------------

def _parse_bracket(text, pos, base):
    """Parse ``[...]`` starting at ``text[pos] == '['``; return (Atom, next_pos)."""
    start = pos
    pos += 1
    end = text.find("]", pos)
    if end < 0:
        raise UnexpectedCharacter("unterminated bracket atom", base + start)
    if pos < end and text[pos].isdigit():
        raise UnsupportedFeature("isotopes are not supported", base + pos)
    if pos >= end:
        raise UnknownElement("empty bracket atom", base + pos)
    ch = text[pos]
    if ch in _AROMATIC or (ch == "s" and text[pos:pos + 2] == "se"):
        raise UnsupportedFeature("aromatic atoms are not supported", base + pos)
    if not ch.isupper():
        raise UnknownElement(f"bad element start {ch!r}", base + pos)
    if pos + 1 < end and text[pos + 1].islower() and text[pos:pos + 2] in ELEMENTS:
        element = text[pos:pos + 2]
        pos += 2
    elif ch in ELEMENTS:
        element = ch
        pos += 1
    else:
        raise UnknownElement(f"unknown element {text[pos:pos + 2]!r}", base + pos)
    if pos < end and text[pos] == "@":
        raise UnsupportedFeature("stereochemistry is not supported", base + pos)
    h = 0
    if pos < end and text[pos] == "H":
        pos += 1
        h = 1
        if pos < end and text[pos].isdigit():
            h = int(text[pos])
            pos += 1
    charge = 0
    if pos < end and text[pos] in "+-":
        sign = 1 if text[pos] == "+" else -1
        sym = text[pos]
        pos += 1
        if pos < end and text[pos].isdigit():
            charge = sign * int(text[pos])
            pos += 1
        else:
            charge = sign
            while pos < end and text[pos] == sym:
                charge += sign
                pos += 1
        if abs(charge) > MAX_CHARGE:
            raise UnexpectedCharacter(f"charge {charge} out of range", base + pos - 1)
    if pos < end:
        c = text[pos]
        if c == ":":
            raise UnsupportedFeature("atom classes are not supported", base + pos)
        if c == "@":
            raise UnsupportedFeature("stereochemistry is not supported", base + pos)
        raise UnexpectedCharacter(f"unexpected {c!r} in bracket atom", base + pos)
    return Atom(element, charge, h), end + 1


def parse_molecule(text: str, base: int = 0) -> Molecule:
    """Parse a molecule string; ``base`` offsets reported error positions."""
    if not text:
        raise EmptyInput("empty molecule", base)
    atoms, bonds = [], {}
    prev = None
    pending = None          # (order, offset) of a bond symbol awaiting its atom
    branches = []           # (branch-point atom, '(' offset, atom count at open)
    rings = {}              # digit -> (atom, order or None, offset)
    n = len(text)
    pos = 0

    def add_bond(i, j, order, at):
        key = (min(i, j), max(i, j))
        if i == j:
            raise InvalidBond("ring bond to itself", base + at)
        if key in bonds:
            raise InvalidBond("duplicate bond", base + at)
        bonds[key] = order

    def add_atom(atom, at):
        nonlocal prev, pending
        idx = len(atoms)
        atoms.append(atom)
        if prev is not None:
            add_bond(prev, idx, pending[0] if pending else 1, at)
        elif pending is not None:
            raise InvalidBond("bond without a preceding atom", base + pending[1])
        prev = idx
        pending = None

    while pos < n:
        ch = text[pos]
        if ch == "[":
            atom, nxt = _parse_bracket(text, pos, base)
            add_atom(atom, pos)
            pos = nxt
        elif ch.isupper():
            two = text[pos:pos + 2]
            if two in ("Cl", "Br"):
                add_atom(Atom(two), pos)
                pos += 2
            elif ch in ORGANIC:
                add_atom(Atom(ch), pos)
                pos += 1
            else:
                raise UnknownElement(f"{ch!r} is not an organic-subset element", base + pos)
        elif ch in _AROMATIC:
            raise UnsupportedFeature("aromatic atoms are not supported", base + pos)
        elif ch in _BOND_ORDER:
            if prev is None:
                raise InvalidBond("bond without a preceding atom", base + pos)
            if pending is not None:
                raise InvalidBond("consecutive bond symbols", base + pos)
            pending = (_BOND_ORDER[ch], pos)
            pos += 1
        elif ch in ":/\\$":
            raise UnsupportedFeature(f"bond type {ch!r} is not supported", base + pos)
        elif ch in "@%":
            raise UnsupportedFeature(f"{ch!r} is not supported", base + pos)
        elif "1" <= ch <= "9":
            if prev is None:
                raise UnclosedRingBond("ring digit without an atom", base + pos)
            d = int(ch)
            order = pending[0] if pending else None
            if d in rings:
                other, o2, _ = rings.pop(d)
                if order is not None and o2 is not None and order != o2:
                    raise InvalidBond("conflicting ring-bond orders", base + pos)
                add_bond(other, prev, order or o2 or 1, pos)
            else:
                rings[d] = (prev, order, pos)
            pending = None
            pos += 1
        elif ch == "(":
            if prev is None:
                raise UnbalancedParenthesis("branch without a preceding atom", base + pos)
            if pending is not None:
                raise InvalidBond("bond symbol before branch", base + pending[1])
            branches.append((prev, pos, len(atoms)))
            pos += 1
        elif ch == ")":
            if not branches:
                raise UnbalancedParenthesis("unmatched ')'", base + pos)
            if pending is not None:
                raise InvalidBond("dangling bond at end of branch", base + pending[1])
            point, at, count = branches.pop()
            if len(atoms) == count:
                raise UnbalancedParenthesis("empty branch", base + at)
            prev = point
            pos += 1
        elif ch == ".":
            if branches:
                raise UnbalancedParenthesis("'.' inside an open branch", base + branches[-1][1])
            if pending is not None:
                raise InvalidBond("dangling bond before '.'", base + pending[1])
            if prev is None:
                raise EmptyInput("empty component", base + pos)
            prev = None
            pos += 1
        else:
            raise UnexpectedCharacter(f"unexpected character {ch!r}", base + pos)

    if branches:
        raise UnbalancedParenthesis("unclosed '('", base + branches[-1][1])
    if rings:
        d = min(rings, key=lambda k: rings[k][2])
        raise UnclosedRingBond(f"ring bond {d} never closed", base + rings[d][2])
    if pending is not None:
        raise InvalidBond("dangling bond at end of input", base + pending[1])
    if prev is None:
        raise EmptyInput("empty component", base + n)
    return Molecule.build(atoms, [(i, j, o) for (i, j), o in bonds.items()])


def parse_reaction(text: str, rsc_vocab: RscVocab | None = None) -> Reaction:
    """Parse ``reactants>agents>product``; agents map to RSC ids (unknown -> UNK)."""
    if not text:
        raise EmptyInput("empty reaction", 0)
    parts = text.split(">")
    if len(parts) != 3:
        at = len(text) if len(parts) < 3 else len(parts[0]) + len(parts[1]) + len(parts[2]) + 2
        raise MissingSegment(f"expected 3 '>'-separated segments, got {len(parts)}", at)
    r_txt, a_txt, p_txt = parts
    a_base = len(r_txt) + 1
    p_base = a_base + len(a_txt) + 1
    if not r_txt:
        raise MissingSegment("no reactants", 0)
    if not p_txt:
        raise MissingSegment("no product", p_base)
    reactants = tuple(parse_molecule(r_txt, 0).split_components())
    agents = []
    if a_txt:
        off = a_base
        for piece in a_txt.split("."):
            if not piece:
                raise EmptyInput("empty agent", off)
            parse_molecule(piece, off)
            agents.append(piece)
            off += len(piece) + 1
    product = parse_molecule(p_txt, p_base)
    if product.n_components != 1:
        raise MultipleProducts("exactly one product is allowed", p_base)
    ids = tuple(rsc_vocab.id(a) if rsc_vocab is not None else RscVocab.UNK for a in agents)
    return Reaction(reactants, product, ids, tuple(agents))


# -- writing -----------------------------------------------------------------

def _atom_symbol(atom, h_count):
    if atom.explicit_h is None and atom.formal_charge == 0 and atom.element in ORGANIC:
        return atom.element
    h = atom.explicit_h if atom.explicit_h is not None else h_count
    out = "[" + atom.element
    if h:
        out += "H" if h == 1 else f"H{h}"
    c = atom.formal_charge
    if c:
        sign = "+" if c > 0 else "-"
        out += sign if abs(c) == 1 else f"{sign}{abs(c)}"
    return out + "]"


def write_molecule(m: Molecule) -> str:
    """Serialise a molecule; components are written in order of first atom."""
    if not m.atoms:
        return ""
    limit = sys.getrecursionlimit()
    if limit < 4 * len(m.atoms) + 200:
        sys.setrecursionlimit(4 * len(m.atoms) + 200)
    adj = [sorted(nb) for nb in m.adjacency()]
    hs = m.hydrogen_counts()
    visited = [False] * len(m.atoms)
    parent = {}
    order_of = {}
    ring_open = {}   # atom -> list of (partner, bond order) it opens
    ring_close = {}  # atom -> list of partner atoms whose ring it closes
    children = {}

    def discover(u):
        visited[u] = True
        order_of[u] = len(order_of)
        children[u] = []
        for v, o in adj[u]:
            if v == parent.get(u):
                continue
            if not visited[v]:
                parent[v] = u
                children[u].append((v, o))
                discover(v)
            elif order_of[v] < order_of[u]:
                # back edge: ring opened at the earlier atom v, closed at u
                ring_open.setdefault(v, []).append((u, o))
                ring_close.setdefault(u, []).append(v)

    free = list(range(1, 10))
    digit_of = {}

    def emit(u, out):
        out.append(_atom_symbol(m.atoms[u], hs[u]))
        for v in ring_close.get(u, []):
            d = digit_of.pop((v, u))
            out.append(str(d))
            free.append(d)
            free.sort()
        for v, o in sorted(ring_open.get(u, []), key=lambda t: order_of[t[0]]):
            if not free:
                raise ValueError("more than 9 simultaneously open rings")
            d = free.pop(0)
            digit_of[(u, v)] = d
            out.append(_BOND_SYMBOL[o] + str(d))
        kids = children[u]
        for k, (v, o) in enumerate(kids):
            last = k == len(kids) - 1
            if not last:
                out.append("(")
            out.append(_BOND_SYMBOL[o])
            emit(v, out)
            if not last:
                out.append(")")

    pieces = []
    for root in range(len(m.atoms)):
        if not visited[root]:
            discover(root)
            out = []
            emit(root, out)
            pieces.append("".join(out))
    return ".".join(pieces)


def write_reaction(r: Reaction, rsc_vocab: RscVocab | None = None) -> str:
    if r.agents:
        agents = list(r.agents)
    elif r.rsc_ids and rsc_vocab is not None:
        agents = [rsc_vocab.name(i) for i in r.rsc_ids]
    elif r.rsc_ids:
        raise ValueError("reaction has rsc_ids but no agent strings; pass rsc_vocab")
    else:
        agents = []
    return ".".join(write_molecule(m) for m in r.reactants) + ">" + ".".join(agents) + ">" + write_molecule(r.product)
