"""Additive relationship matrices from pedigrees and half-sib designs."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import PedigreeError
from .model import Kinship

UNKNOWN = ""


@dataclass(frozen=True)
class PedigreeRecord:
    id: str
    sire: str = UNKNOWN
    dam: str = UNKNOWN


class Pedigree:
    """Ordered pedigree records; parents must precede their offspring.

    Unknown parents ("" or "0") are treated as unrelated, non-inbred
    founders. Records may arrive in any order; a topological order is
    established on construction and cycles are rejected.
    """

    def __init__(self, records):
        recs = []
        for rec in records:
            if isinstance(rec, PedigreeRecord):
                recs.append(rec)
            else:
                ident, sire, dam = rec
                recs.append(PedigreeRecord(str(ident), _norm(sire), _norm(dam)))
        ids = [r.id for r in recs]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise PedigreeError(f"duplicate individual id '{dup}'")
        known = set(ids)
        for r in recs:
            for parent in (r.sire, r.dam):
                if parent != UNKNOWN and parent not in known:
                    raise PedigreeError(f"individual '{r.id}' references unknown parent '{parent}'")
        self.records = self._topo_sort(recs)
        self.ids = [r.id for r in self.records]

    @staticmethod
    def _topo_sort(recs):
        by_id = {r.id: r for r in recs}
        order, state = [], {}  # state: 1 = visiting, 2 = done

        def visit(rec):
            stack = [(rec, False)]
            while stack:
                node, processed = stack.pop()
                if processed:
                    state[node.id] = 2
                    order.append(node)
                    continue
                if state.get(node.id) == 2:
                    continue
                if state.get(node.id) == 1:
                    raise PedigreeError(f"pedigree cycle involving '{node.id}'")
                state[node.id] = 1
                stack.append((node, True))
                for parent in (node.sire, node.dam):
                    if parent != UNKNOWN and state.get(parent) != 2:
                        if state.get(parent) == 1:
                            raise PedigreeError(f"pedigree cycle involving '{parent}'")
                        stack.append((by_id[parent], False))

        for rec in recs:
            if state.get(rec.id) != 2:
                visit(rec)
        return order

    def __len__(self):
        return len(self.records)

    @classmethod
    def from_csv(cls, path) -> "Pedigree":
        """Read a pedigree file with header id,sire,dam ('' or '0' = unknown)."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"id", "sire", "dam"} - set(reader.fieldnames or [])
            if missing:
                raise PedigreeError(f"{path}: missing pedigree columns {sorted(missing)}")
            return cls((row["id"], row["sire"], row["dam"]) for row in reader)


def _norm(parent) -> str:
    parent = "" if parent is None else str(parent).strip()
    return UNKNOWN if parent in ("", "0") else parent


def a_matrix_from_pedigree(ped: Pedigree) -> Kinship:
    """Additive relationship matrix by the tabular method.

    a_ii = 1 + F_i with inbreeding F_i = a(sire, dam)/2, and
    a_ij = (a_{j,sire(i)} + a_{j,dam(i)}) / 2 for j preceding i.
    The returned Kinship rows follow the pedigree's topological order;
    see Kinship ids for the mapping back to input identifiers.
    """
    n = len(ped)
    pos = {ident: k for k, ident in enumerate(ped.ids)}
    sire = np.array([pos.get(r.sire, -1) for r in ped.records])
    dam = np.array([pos.get(r.dam, -1) for r in ped.records])
    A = np.zeros((n, n))
    for i in range(n):
        s, d = sire[i], dam[i]
        cross = A[s, d] if s >= 0 and d >= 0 else 0.0
        A[i, i] = 1.0 + 0.5 * cross
        if i == 0:
            continue
        contrib = np.zeros(i)
        if s >= 0:
            contrib += A[:i, s]
        if d >= 0:
            contrib += A[:i, d]
        A[:i, i] = A[i, :i] = 0.5 * contrib
    kin = Kinship(A)
    kin.ids = list(ped.ids)
    return kin


def halfsib_A(n_sires: int, n_offspring: int) -> Kinship:
    """Relationship matrix for a balanced paternal half-sib design.

    Block diagonal over sire families: 1 on the diagonal, 0.25 between
    half sibs. Rows cover the offspring only, grouped by family.
    """
    if n_sires < 1 or n_offspring < 1:
        raise PedigreeError("need at least one sire and one offspring per sire")
    block = np.full((n_offspring, n_offspring), 0.25)
    np.fill_diagonal(block, 1.0)
    A = np.kron(np.eye(n_sires), block)
    kin = Kinship(A)
    kin.ids = [f"s{s + 1}o{o + 1}" for s in range(n_sires) for o in range(n_offspring)]
    return kin


def halfsib_pedigree(n_sires: int, n_offspring: int) -> Pedigree:
    """Explicit pedigree for the half-sib design: sires as founders, dams unknown."""
    recs = [(f"sire{s + 1}", "", "") for s in range(n_sires)]
    recs += [
        (f"s{s + 1}o{o + 1}", f"sire{s + 1}", "")
        for s in range(n_sires)
        for o in range(n_offspring)
    ]
    return Pedigree(recs)
