"""Molecules as padded graphs.

SMILES strings are parsed into heavy-atom graphs (no hydrogen nodes) and
featurized with a small scheme built from atomic numbers and bond orders:

* node features (12): one-hot element over B, C, N, O, F, P, S, Cl, Br, I,
  an aromatic flag and ``Z / 100``;
* edge features (4): one-hot bond order over 1, 2, 3 plus an aromatic flag
  (aromatic bonds have order 1.5 and an all-zero order one-hot).

Every undirected bond is emitted in both directions. Row ``k`` of the
edge-pair matrix is ``(receiver, sender)``.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GnnuqError
from .rng import SplitMix64

log = logging.getLogger(__name__)

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br "
    "Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho "
    "Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es "
    "Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()
ATOMIC_NUMBER = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}

ORGANIC = {"B": 5, "C": 6, "N": 7, "O": 8, "P": 15, "S": 16, "F": 9, "Cl": 17, "Br": 35, "I": 53}
AROMATIC_ORGANIC = {"b": 5, "c": 6, "n": 7, "o": 8, "p": 15, "s": 16}
AROMATIC_BRACKET = {"b": 5, "c": 6, "n": 7, "o": 8, "p": 15, "s": 16, "se": 34, "as": 33, "te": 52}
BOND_SYMBOLS = {"-": 1.0, "=": 2.0, "#": 3.0, ":": 1.5}

ONEHOT_ELEMENTS = (5, 6, 7, 8, 9, 15, 16, 17, 35, 53)
NODE_FEATURES = len(ONEHOT_ELEMENTS) + 2
EDGE_FEATURES = 4


class SmilesError(GnnuqError, ValueError):
    """SMILES syntax error located at a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnsupportedToken(SmilesError):
    pass


class UnclosedRing(SmilesError):
    pass


class UnbalancedParen(SmilesError):
    pass


class EmptyInput(SmilesError):
    pass


class CapacityExceeded(GnnuqError, ValueError):
    pass


class MissingColumn(GnnuqError, KeyError):
    pass


class NoValidRows(GnnuqError, ValueError):
    pass


class DegenerateTargets(GnnuqError, ValueError):
    pass


@dataclass(frozen=True)
class MolSpec:
    atoms: tuple[tuple[int, bool], ...]
    bonds: tuple[tuple[int, int, float], ...]

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_directed_edges(self) -> int:
        return 2 * len(self.bonds)


def _bracket_atom(text: str, start: int) -> tuple[int, bool, int]:
    """Parse ``[...]`` beginning at ``start``; return (Z, aromatic, end offset)."""
    end = text.find("]", start)
    if end < 0:
        raise UnsupportedToken("unterminated bracket atom", start)
    body = text[start + 1:end]
    i = 0
    while i < len(body) and body[i].isdigit():  # isotope, discarded
        i += 1
    rest = body[i:]
    if not rest:
        raise UnsupportedToken("bracket atom without element", start)
    z = None
    aromatic = False
    for width in (2, 1):
        sym = rest[:width]
        if len(sym) < width:
            continue
        if sym in AROMATIC_BRACKET:
            z, aromatic = AROMATIC_BRACKET[sym], True
            break
        if sym in ATOMIC_NUMBER and (width == 1 or sym[1].islower()):
            z = ATOMIC_NUMBER[sym]
            break
    if z is None:
        raise UnsupportedToken(f"unknown element in [{body}]", start)
    tail = rest[width:]
    # chirality, hydrogen count, charge and atom class are accepted and dropped
    j = 0
    while j < len(tail) and tail[j] == "@":
        j += 1
    if tail[j:j + 2] in ("TH", "AL", "SP", "TB", "OH"):
        j += 2
        while j < len(tail) and tail[j].isdigit():
            j += 1
    if j < len(tail) and tail[j] == "H":
        j += 1
        while j < len(tail) and tail[j].isdigit():
            j += 1
    while j < len(tail) and tail[j] in "+-":
        j += 1
        while j < len(tail) and tail[j].isdigit():
            j += 1
    if j < len(tail) and tail[j] == ":":
        j += 1
        while j < len(tail) and tail[j].isdigit():
            j += 1
    if j != len(tail):
        raise UnsupportedToken(f"cannot parse bracket atom [{body}]", start + 1 + i + width + j)
    return z, aromatic, end + 1


def _in_ring(n_atoms: int, bonds: list, skip: int) -> bool:
    """True if bond ``skip`` lies on a cycle (its endpoints stay connected without it)."""
    a, b = bonds[skip][0], bonds[skip][1]
    adj = [[] for _ in range(n_atoms)]
    for k, (i, j, *_rest) in enumerate(bonds):
        if k != skip:
            adj[i].append(j)
            adj[j].append(i)
    seen = {a}
    queue = deque([a])
    while queue:
        v = queue.popleft()
        if v == b:
            return True
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return False


def parse_smiles(text: str) -> MolSpec:
    """Parse a SMILES string into a heavy-atom :class:`MolSpec`.

    Supports the organic subset, bracket atoms (only the element is kept),
    explicit bonds ``- = # :``, aromatic lowercase atoms, branches, ring
    closures (``1``-``9`` and ``%nn``) and disconnected components (``.``).
    Stereo markers ``/ \\`` and ``@`` are accepted and ignored.

    An unmarked bond between two aromatic atoms is aromatic (order 1.5) when
    it lies on a ring, and single otherwise, e.g. the biphenyl link in
    ``c1ccccc1c1ccccc1``.
    """
    if not text or not text.strip():
        raise EmptyInput("empty SMILES", 0)
    try:
        text.encode("ascii")
    except UnicodeEncodeError:
        bad = next(i for i, ch in enumerate(text) if ord(ch) > 127)
        raise UnsupportedToken("non-ASCII character", bad) from None

    atoms: list[tuple[int, bool]] = []
    # (i, j, order or None when implicit)
    raw_bonds: list[list] = []
    stack: list[tuple[int | None, int]] = []
    rings: dict[int, tuple[int, float | None, int]] = {}
    prev: int | None = None
    pending: float | None = None
    pending_dot = False
    i, n = 0, len(text)

    def add_bond(a: int, b: int, order: float | None, offset: int) -> None:
        if a == b:
            raise UnsupportedToken("bond from an atom to itself", offset)
        for bd in raw_bonds:
            if {bd[0], bd[1]} == {a, b}:
                raise UnsupportedToken("duplicate bond", offset)
        raw_bonds.append([a, b, order])

    while i < n:
        ch = text[i]
        atom = None
        if ch == "[":
            z, arom, nxt = _bracket_atom(text, i)
            atom = (z, arom)
        elif text[i:i + 2] in ("Cl", "Br"):
            atom, nxt = (ORGANIC[text[i:i + 2]], False), i + 2
        elif ch in ORGANIC:
            atom, nxt = (ORGANIC[ch], False), i + 1
        elif ch in AROMATIC_ORGANIC:
            atom, nxt = (AROMATIC_ORGANIC[ch], True), i + 1
        if atom is not None:
            atoms.append(atom)
            idx = len(atoms) - 1
            if prev is not None and not pending_dot:
                add_bond(prev, idx, pending, i)
            elif pending is not None:
                raise UnsupportedToken("bond symbol without a preceding atom", i)
            prev, pending, pending_dot = idx, None, False
            i = nxt
            continue
        if ch in BOND_SYMBOLS:
            if pending is not None or prev is None:
                raise UnsupportedToken(f"unexpected bond symbol {ch!r}", i)
            pending = BOND_SYMBOLS[ch]
            i += 1
        elif ch in "/\\":
            if prev is None:
                raise UnsupportedToken(f"unexpected stereo bond {ch!r}", i)
            i += 1
        elif ch == ".":
            if prev is None or pending is not None:
                raise UnsupportedToken("unexpected '.'", i)
            pending_dot = True
            i += 1
        elif ch == "(":
            if prev is None:
                raise UnbalancedParen("branch before any atom", i)
            stack.append((prev, i))
            i += 1
        elif ch == ")":
            if not stack:
                raise UnbalancedParen("unmatched ')'", i)
            if pending is not None:
                raise UnsupportedToken("dangling bond symbol", i - 1)
            prev, _ = stack.pop()
            i += 1
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise UnsupportedToken("ring closure before any atom", i)
            if ch == "%":
                digits = text[i + 1:i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise UnsupportedToken("malformed %nn ring label", i)
                label, nxt = int(digits), i + 3
            else:
                label, nxt = int(ch), i + 1
            if label in rings:
                other, order, _ = rings.pop(label)
                if order is not None and pending is not None and order != pending:
                    raise UnsupportedToken("conflicting ring-closure bond orders", i)
                add_bond(other, prev, pending if pending is not None else order, i)
            else:
                rings[label] = (prev, pending, i)
            pending = None
            i = nxt
        else:
            raise UnsupportedToken(f"unsupported character {ch!r}", i)

    if stack:
        raise UnbalancedParen("unclosed '('", stack[-1][1])
    if rings:
        label, (_, _, off) = min(rings.items(), key=lambda kv: kv[1][2])
        raise UnclosedRing(f"ring {label} never closed", off)
    if pending is not None or pending_dot:
        raise UnsupportedToken("trailing bond symbol", n - 1)

    bonds = []
    for k, (a, b, order) in enumerate(raw_bonds):
        if order is None:
            both_aromatic = atoms[a][1] and atoms[b][1]
            order = 1.5 if both_aromatic and _in_ring(len(atoms), raw_bonds, k) else 1.0
        bonds.append((a, b, float(order)))
    return _drop_hydrogens(atoms, bonds)


def _drop_hydrogens(atoms, bonds) -> MolSpec:
    keep = [k for k, (z, _) in enumerate(atoms) if z != 1]
    if len(keep) == len(atoms):
        return MolSpec(tuple(atoms), tuple((min(a, b), max(a, b), o) for a, b, o in bonds))
    if not keep:
        raise UnsupportedToken("molecule has no heavy atoms", 0)
    remap = {old: new for new, old in enumerate(keep)}
    new_bonds = tuple(
        (min(remap[a], remap[b]), max(remap[a], remap[b]), o)
        for a, b, o in bonds
        if a in remap and b in remap
    )
    return MolSpec(tuple(atoms[k] for k in keep), new_bonds)


@dataclass(frozen=True, eq=False)
class MolGraph:
    H: np.ndarray
    E: np.ndarray
    P: np.ndarray
    m: np.ndarray
    e_mask: np.ndarray

    @property
    def n_max(self) -> int:
        return self.H.shape[0]

    @property
    def e_max(self) -> int:
        return self.E.shape[0]


def node_features(z: int, aromatic: bool) -> np.ndarray:
    row = np.zeros(NODE_FEATURES)
    if z in ONEHOT_ELEMENTS:
        row[ONEHOT_ELEMENTS.index(z)] = 1.0
    row[-2] = float(aromatic)
    row[-1] = z / 100.0
    return row


def edge_features(order: float) -> np.ndarray:
    row = np.zeros(EDGE_FEATURES)
    if order == 1.5:
        row[3] = 1.0
    else:
        row[int(order) - 1] = 1.0
    return row


def featurize(spec: MolSpec, n_max: int, e_max: int) -> MolGraph:
    if spec.n_atoms > n_max:
        raise CapacityExceeded(f"{spec.n_atoms} atoms exceed n_max={n_max}")
    if spec.n_directed_edges > e_max:
        raise CapacityExceeded(f"{spec.n_directed_edges} directed edges exceed e_max={e_max}")
    H = np.zeros((n_max, NODE_FEATURES))
    E = np.zeros((e_max, EDGE_FEATURES))
    P = np.zeros((e_max, 2), dtype=np.int64)
    m = np.zeros(n_max)
    e_mask = np.zeros(e_max)
    for k, (z, arom) in enumerate(spec.atoms):
        H[k] = node_features(z, arom)
        m[k] = 1.0
    for k, (a, b, order) in enumerate(spec.bonds):
        feat = edge_features(order)
        E[2 * k] = E[2 * k + 1] = feat
        P[2 * k] = (a, b)
        P[2 * k + 1] = (b, a)
        e_mask[2 * k] = e_mask[2 * k + 1] = 1.0
    return MolGraph(H, E, P, m, e_mask)


@dataclass
class Dataset:
    smiles: list[str]
    y: np.ndarray
    specs: list[MolSpec]
    target: str = "y"
    unit: str = ""
    n_max: int = 0
    e_max: int = 0
    rejected: list[tuple[int, str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.smiles)

    @property
    def records(self) -> list[tuple[str, float]]:
        return list(zip(self.smiles, self.y.tolist()))

    def graphs(self) -> "GraphStore":
        return GraphStore.from_specs(self.specs, self.n_max, self.e_max)


def dataset_from_records(records, target: str = "y", unit: str = "") -> Dataset:
    smiles, ys, specs, rejected = [], [], [], []
    for row, (smi, y) in enumerate(records):
        try:
            spec = parse_smiles(smi)
            y = float(y)
            if not np.isfinite(y):
                raise ValueError(f"non-finite target {y}")
        except (SmilesError, ValueError) as exc:
            rejected.append((row, smi, str(exc)))
            continue
        smiles.append(smi)
        ys.append(y)
        specs.append(spec)
    if not smiles:
        raise NoValidRows("no valid rows")
    return Dataset(
        smiles=smiles,
        y=np.asarray(ys, dtype=np.float64),
        specs=specs,
        target=target,
        unit=unit,
        n_max=max(s.n_atoms for s in specs),
        e_max=max(max(s.n_directed_edges for s in specs), 1),
        rejected=rejected,
    )


def load_dataset(path, smiles_column: str = "smiles", target_column: str = "y", unit: str = "") -> Dataset:
    """Read a CSV with a header row into a :class:`Dataset`.

    Rows whose SMILES fail to parse (or whose target is not a finite number)
    are skipped, each with a logged diagnostic, and collected in
    ``Dataset.rejected``.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            for col in (smiles_column, target_column):
                if col not in header:
                    raise MissingColumn(f"column {col!r} not in {path} (have {header})")
            rows = [((r[smiles_column] or "").strip(), r[target_column]) for r in reader]
    except OSError as exc:
        raise GnnuqError(f"cannot read {path}: {exc}") from exc
    ds = dataset_from_records(rows, target=target_column, unit=unit)
    for row, smi, msg in ds.rejected:
        log.warning("row %d rejected (%r): %s", row + 2, smi, msg)
    if ds.rejected:
        log.warning("%d of %d rows rejected", len(ds.rejected), len(rows))
    return ds


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[int, int, int] = (5, 2, 3)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or sum(self.ratios) <= 0:
            raise ValueError(f"invalid split ratios {self.ratios}")


@dataclass(frozen=True)
class Split:
    train: list[int]
    val: list[int]
    test: list[int]
    spec: SplitSpec = SplitSpec()

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.spec.seed,
                "ratios": list(self.spec.ratios),
                "train": self.train,
                "val": self.val,
                "test": self.test,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Split":
        d = json.loads(text)
        return cls(d["train"], d["val"], d["test"], SplitSpec(tuple(d["ratios"]), int(d["seed"])))

    def __getitem__(self, name: str) -> list[int]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def split_indices(n: int, spec: SplitSpec) -> Split:
    if n <= 0:
        raise ValueError("cannot split an empty dataset")
    perm = SplitMix64(spec.seed).shuffle(list(range(n)))
    total = sum(spec.ratios)
    n_val = n * spec.ratios[1] // total
    n_test = n * spec.ratios[2] // total
    n_train = n - n_val - n_test
    return Split(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:], spec)


def split_dataset(ds: Dataset, spec: SplitSpec) -> Split:
    return split_indices(len(ds), spec)


@dataclass(frozen=True)
class TargetScaler:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, y) -> "TargetScaler":
        y = np.asarray(y, dtype=np.float64)
        std = float(y.std())
        if y.size < 2 or std == 0.0:
            raise DegenerateTargets("need at least two distinct training targets")
        return cls(float(y.mean()), std)

    def apply(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def invert(self, mu, var=None):
        mu = np.asarray(mu, dtype=np.float64) * self.std + self.mean
        if var is None:
            return mu
        return mu, np.asarray(var, dtype=np.float64) * self.std**2

    def invert_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.std + self.mean


fit_scaler = TargetScaler.fit


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Several graphs with padding stripped, nodes stacked row-wise.

    ``node_pos`` gives each real node's flat position in the padded
    ``n_graphs x n_max`` layout, which the padded-shape readouts need.
    """

    x: np.ndarray
    edge_attr: np.ndarray
    receiver: np.ndarray
    sender: np.ndarray
    node_graph: np.ndarray
    node_pos: np.ndarray
    n_graphs: int
    n_max: int

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


class GraphStore:
    """Padded feature tensors for a whole dataset, sliced into batches."""

    def __init__(self, H, E, P, m, e_mask):
        self.H, self.E, self.P, self.m, self.e_mask = H, E, P, m, e_mask

    @classmethod
    def from_specs(cls, specs, n_max: int, e_max: int) -> "GraphStore":
        return cls.from_graphs([featurize(s, n_max, e_max) for s in specs])

    @classmethod
    def from_graphs(cls, graphs) -> "GraphStore":
        return cls(
            np.stack([g.H for g in graphs]),
            np.stack([g.E for g in graphs]),
            np.stack([g.P for g in graphs]),
            np.stack([g.m for g in graphs]),
            np.stack([g.e_mask for g in graphs]),
        )

    def __len__(self) -> int:
        return self.H.shape[0]

    @property
    def n_max(self) -> int:
        return self.H.shape[1]

    @property
    def e_max(self) -> int:
        return self.E.shape[1]

    def graph(self, i: int) -> MolGraph:
        return MolGraph(self.H[i], self.E[i], self.P[i], self.m[i], self.e_mask[i])

    def subset(self, idx) -> "GraphStore":
        idx = np.asarray(idx, dtype=np.int64)
        return GraphStore(self.H[idx], self.E[idx], self.P[idx], self.m[idx], self.e_mask[idx])

    def batch(self, idx=None) -> GraphBatch:
        if idx is None:
            idx = np.arange(len(self))
        idx = np.asarray(idx, dtype=np.int64)
        return collate(self.H[idx], self.E[idx], self.P[idx], self.m[idx], self.e_mask[idx])


def collate(H, E, P, m, e_mask) -> GraphBatch:
    """Strip padding from stacked padded arrays (leading axis = graph)."""
    B, n_max, _ = H.shape
    flat_m = m.reshape(-1) > 0
    node_pos = np.flatnonzero(flat_m)
    remap = np.full(B * n_max, -1, dtype=np.int64)
    remap[node_pos] = np.arange(node_pos.size)
    offsets = (np.arange(B, dtype=np.int64) * n_max)[:, None]
    keep = e_mask.reshape(-1) > 0
    recv = remap[(P[:, :, 0] + offsets).reshape(-1)[keep]]
    send = remap[(P[:, :, 1] + offsets).reshape(-1)[keep]]
    if (recv < 0).any() or (send < 0).any():
        raise ValueError("edge references a masked node")
    return GraphBatch(
        x=H.reshape(B * n_max, -1)[node_pos],
        edge_attr=E.reshape(-1, E.shape[-1])[keep],
        receiver=recv,
        sender=send,
        node_graph=node_pos // n_max,
        node_pos=node_pos,
        n_graphs=B,
        n_max=n_max,
    )


def collate_graphs(graphs) -> GraphBatch:
    return GraphStore.from_graphs(list(graphs)).batch()
