"""Independent oracles and utilities shared by the test modules."""

from __future__ import annotations

import itertools
from pathlib import Path

import networkx as nx
import numpy as np

from reacfuse import tensor as T

# -- finite differences ------------------------------------------------------

REL_FLOOR = 1e-6


def rel_err(a, b, floor=REL_FLOOR):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. each array (mutated in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            fp = f()
            arr[i] = old - h
            fm = f()
            arr[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def check_op(build, arrays, h=1e-6):
    """Compare autodiff and central differences for ``build(*tensors) -> scalar``.

    Returns the worst relative error over all inputs.
    """
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*ts)
    T.backward(loss, params=ts)
    analytic = [t.grad.copy() for t in ts]

    def f():
        with T.no_grad():
            return float(build(*[T.Tensor(a) for a in arrays]).data)

    numeric = numeric_grad(f, arrays, h)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def check_model(loss_fn, params, rng, n_coords=12, h=1e-6):
    """Model-level check: one random directional derivative plus random coordinates.

    ``loss_fn()`` rebuilds the forward from the current parameter data.
    """
    loss = loss_fn()
    T.backward(loss, params=params)
    grads = [p.grad.copy() for p in params]

    def f():
        with T.no_grad():
            return float(loss_fn().data)

    errs = []
    direction = [rng.normal(size=p.data.shape) for p in params]
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
    for p, d in zip(params, direction):
        p.data += h * d
    fp = f()
    for p, d in zip(params, direction):
        p.data -= 2 * h * d
    fm = f()
    for p, d in zip(params, direction):
        p.data += h * d
    errs.append(rel_err(analytic, (fp - fm) / (2 * h)))
    sizes = np.array([p.data.size for p in params], dtype=np.float64)
    for _ in range(n_coords):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        flat = params[k].data.reshape(-1)
        i = rng.integers(flat.size)
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        errs.append(rel_err(grads[k].reshape(-1)[i], (fp - fm) / (2 * h)))
    return max(errs)


# -- reference molecule parser ---------------------------------------------------
# Written independently of reacfuse.chem: organic subset, bracket atoms,
# branches, bonds, ring digits and dots only. Returns (atoms, bonds) with atoms
# as (element, charge, explicit_h or None) and bonds as sorted (i, j, order).

_TWO = ("Cl", "Br")
_ONE = set("BCNOPSFI")


def reference_parse(text):
    atoms, bonds = [], []
    stack, rings = [], {}
    prev, pending, i = None, None, 0
    while i < len(text):
        c = text[i]
        if c == "(":
            stack.append(prev)
            i += 1
        elif c == ")":
            prev = stack.pop()
            i += 1
        elif c == ".":
            prev = None
            i += 1
        elif c in "-=#":
            pending = {"-": 1, "=": 2, "#": 3}[c]
            i += 1
        elif c.isdigit():
            if c in rings:
                j, order = rings.pop(c)
                o = pending or order or 1
                bonds.append((min(j, prev), max(j, prev), o))
            else:
                rings[c] = (prev, pending)
            pending = None
            i += 1
        else:
            if c == "[":
                end = text.index("]", i)
                body = text[i + 1:end]
                el = body[:2] if body[:2] in ("Cl", "Br", "He", "Li", "Na", "Mg", "Al", "Si", "Pd",
                                              "Cu", "Ni", "Fe", "Co", "Hg", "Zn", "Sn") else body[0]
                rest = body[len(el):]
                h = 0
                if rest.startswith("H"):
                    rest = rest[1:]
                    if rest[:1].isdigit():
                        h, rest = int(rest[0]), rest[1:]
                    else:
                        h = 1
                charge = 0
                if rest:
                    sign = 1 if rest[0] == "+" else -1
                    if rest[1:].isdigit():
                        charge = sign * int(rest[1:])
                    else:
                        charge = sign * len(rest)
                atom = (el, charge, h)
                i = end + 1
            else:
                el = text[i:i + 2] if text[i:i + 2] in _TWO else c
                atom = (el, 0, None)
                i += len(el)
            atoms.append(atom)
            k = len(atoms) - 1
            if prev is not None:
                bonds.append((prev, k, pending or 1))
            pending = None
            prev = k
    return atoms, sorted(bonds)


def molecule_to_nx(m):
    g = nx.Graph()
    for i, a in enumerate(m.atoms):
        g.add_node(i, el=a.element, q=a.formal_charge, h=a.explicit_h)
    for i, j, o in m.bonds:
        g.add_edge(i, j, order=o)
    return g


def reaction_to_nx(r):
    """Disjoint union of reactants and product with a role attribute on nodes."""
    g = nx.Graph()
    offset = 0
    for role, mols in (("r", r.reactants), ("p", (r.product,))):
        for m in mols:
            for i, a in enumerate(m.atoms):
                g.add_node(offset + i, el=a.element, q=a.formal_charge, h=a.explicit_h, role=role)
            for i, j, o in m.bonds:
                g.add_edge(offset + i, offset + j, order=o)
            offset += len(m.atoms)
    return g


def isomorphic(g1, g2):
    nm = nx.isomorphism.categorical_node_match(["el", "q", "h", "role"], [None] * 4)
    em = nx.isomorphism.categorical_edge_match("order", 1)
    return nx.is_isomorphic(g1, g2, node_match=nm, edge_match=em)


def floyd_warshall(n, bonds):
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0)
    for i, j, _ in bonds:
        d[i, j] = d[j, i] = 1
    for k, i, j in itertools.product(range(n), repeat=3):
        if d[i, k] + d[k, j] < d[i, j]:
            d[i, j] = d[i, k] + d[k, j]
    return d


# -- parser fuzzing --------------------------------------------------------------

_FUZZ_ALPHABET = list("CNOPSFIBHclnos[]()=#-+.>123456789:@/\\%$ ") + ["Cl", "Br", "Pd", "Zz", "[Pd]", "[NH4+]"]
_FUZZ_SEEDS = ["CC(=O)O", "C1CC1", "CCO.CC(=O)O>[H+]>CCOC(C)=O", "C>>C", "Cl[Pd]Cl", "[NH3+]CC(=O)[O-]"]


def fuzz_inputs(rng, n, max_len=4096):
    """Random grammar-flavoured strings, mutated valid strings and raw unicode noise."""
    for k in range(n):
        mode = k % 4
        if mode == 0:
            size = int(rng.integers(0, 40))
            s = "".join(_FUZZ_ALPHABET[i] for i in rng.integers(0, len(_FUZZ_ALPHABET), size))
        elif mode == 1:
            s = list(_FUZZ_SEEDS[int(rng.integers(len(_FUZZ_SEEDS)))])
            for _ in range(int(rng.integers(1, 4))):
                i = int(rng.integers(0, len(s) + 1))
                op = rng.integers(3)
                if op == 0 and s:
                    del s[min(i, len(s) - 1)]
                elif op == 1:
                    s.insert(i, _FUZZ_ALPHABET[int(rng.integers(len(_FUZZ_ALPHABET)))])
                elif s:
                    s[min(i, len(s) - 1)] = _FUZZ_ALPHABET[int(rng.integers(len(_FUZZ_ALPHABET)))]
            s = "".join(s)
        elif mode == 2:
            size = int(rng.integers(0, 64))
            s = "".join(chr(int(c)) for c in rng.integers(1, 0x2FF, size))
        else:
            # long inputs near the size limit: deep branches, long chains, many rings
            unit = ["C(", "C", "C1", "CC.", ")", "C=", "[C+]"][int(rng.integers(7))]
            s = (unit * (max_len // len(unit)))[: int(rng.integers(max_len // 2, max_len + 1))]
        yield s[:max_len]


SMOKE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "smoke.ini"
SMOKE_STEPS = (
    ["gen-data"], ["pretrain-mlm"], ["pretrain-lm", "--variant", "proc"],
    ["pretrain-lm", "--variant", "zsl"], ["train-baseline"], ["train-adapter"], ["zsl-extract"],
    ["zsl-train-labeler"], ["zsl-label"], ["zsl-extend"],
    ["train-zsl", "binary"], ["train-zsl", "threshold"], ["train-zsl", "continuous"],
    ["eval", "--model", "baseline"], ["eval", "--model", "adapter"],
    ["eval", "--model", "zsl-binary"], ["eval", "--model", "zsl-threshold"],
    ["eval", "--model", "zsl-continuous"], ["report"],
)


def run_smoke(out, extra=(), runner=None):
    """Every pipeline command in order on the smoke config; returns exit codes."""
    from reacfuse.cli import main
    runner = runner or main
    codes = []
    for step in SMOKE_STEPS:
        codes.append(runner([*step, "--config", str(SMOKE_CONFIG), "--out", str(out), *extra]))
        if codes[-1] != 0:
            break
    return codes
