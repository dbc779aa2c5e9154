"""SMILES tokenizing, parsing, canonicalization and vocabulary building.

The dialect covered here is the organic subset plus bracket atoms with
charge and explicit hydrogen counts.  Stereo markers and isotopes are
rejected outright (StereoUnsupported) instead of being stripped, and no
valence or aromaticity perception is attempted: a molecule is exactly the
graph its SMILES spells out.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TokenKind",
    "Token",
    "BondOrder",
    "Atom",
    "Bond",
    "MolGraph",
    "Vocabulary",
    "SmilesError",
    "UnexpectedCharacter",
    "UnterminatedBracket",
    "UnclosedBranch",
    "UnmatchedRingBond",
    "StereoUnsupported",
    "tokenize",
    "parse",
    "canonicalize",
    "canonical_smiles",
    "canonical_ranks",
    "build_vocabulary",
    "encode_tokens",
    "write_smiles",
    "random_smiles",
    "permute_atoms",
    "PAD_ID",
    "UNK_ID",
    "PAD_TOKEN",
    "UNK_TOKEN",
]

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_TWO_LETTER = ("Cl", "Br")
_ORGANIC = set("BCNOPSFI")
_AROMATIC = set("bcnops")
_BOND_CHARS = "-=#:/\\"


class SmilesError(ValueError):
    """Base class for every tokenize/parse failure."""

    def __init__(self, message: str, position: int | None = None) -> None:
        self.position = position
        self.corpus_index: int | None = None
        super().__init__(message)

    def __str__(self) -> str:
        msg = self.args[0]
        if self.position is not None:
            msg = f"{msg} (column {self.position})"
        if self.corpus_index is not None:
            msg = f"corpus entry {self.corpus_index}: {msg}"
        return msg


class UnexpectedCharacter(SmilesError):
    def __init__(self, position: int, char: str = "") -> None:
        label = f"unexpected character {char!r}" if char else "unexpected character"
        super().__init__(label, position)


class UnterminatedBracket(SmilesError):
    def __init__(self, position: int) -> None:
        super().__init__("unterminated bracket atom", position)


class UnclosedBranch(SmilesError):
    def __init__(self, message: str = "unclosed branch") -> None:
        super().__init__(message)


class UnmatchedRingBond(SmilesError):
    def __init__(self, digit: int, message: str | None = None) -> None:
        self.digit = digit
        super().__init__(message or f"ring bond {digit} opened but never closed")


class StereoUnsupported(SmilesError):
    def __init__(self, what: str, position: int | None = None) -> None:
        super().__init__(f"stereo/isotope markers are not supported ({what})", position)


class TokenKind(enum.Enum):
    ATOM = "atom"
    BRACKET_ATOM = "bracket_atom"
    BOND = "bond"
    RING_BOND = "ring_bond"
    BRANCH_OPEN = "branch_open"
    BRANCH_CLOSE = "branch_close"
    DOT = "dot"


@dataclass(frozen=True)
class Token:
    text: str
    kind: TokenKind


class BondOrder(enum.Enum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


_BOND_ORDER = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}
_BOND_SYMBOL = {v: k for k, v in _BOND_ORDER.items()}


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    h_count: int | None = None  # None: implicit (organic subset); int: explicit


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: BondOrder


@dataclass
class MolGraph:
    """Atoms plus undirected bonds; endpoints are atom indices."""

    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)

    def add_bond(self, a: int, b: int, order: BondOrder) -> None:
        n = len(self.atoms)
        if not (0 <= a < n and 0 <= b < n):
            raise SmilesError(f"bond endpoint out of range: ({a}, {b})")
        if a == b:
            raise SmilesError("self-loop bond")
        key = (min(a, b), max(a, b))
        if any((min(x.a, x.b), max(x.a, x.b)) == key for x in self.bonds):
            raise SmilesError(f"duplicate bond between atoms {a} and {b}")
        self.bonds.append(Bond(a, b, order))

    def adjacency(self) -> list[list[tuple[int, BondOrder]]]:
        adj: list[list[tuple[int, BondOrder]]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            adj[bond.a].append((bond.b, bond.order))
            adj[bond.b].append((bond.a, bond.order))
        return adj


def tokenize(smiles: str) -> list[Token]:
    """Lex a SMILES string; joining the token texts reproduces the input."""
    if not smiles:
        raise UnexpectedCharacter(0, "")
    try:
        smiles.encode("ascii")
    except UnicodeEncodeError as exc:
        raise UnexpectedCharacter(exc.start, smiles[exc.start]) from None

    tokens: list[Token] = []
    i, n = 0, len(smiles)
    while i < n:
        c = smiles[i]
        if c == "[":
            j = smiles.find("]", i + 1)
            if j < 0:
                raise UnterminatedBracket(i)
            tokens.append(Token(smiles[i : j + 1], TokenKind.BRACKET_ATOM))
            i = j + 1
        elif smiles[i : i + 2] in _TWO_LETTER:
            tokens.append(Token(smiles[i : i + 2], TokenKind.ATOM))
            i += 2
        elif c in _ORGANIC or c in _AROMATIC:
            tokens.append(Token(c, TokenKind.ATOM))
            i += 1
        elif c == "%":
            if i + 2 >= n or not (smiles[i + 1].isdigit() and smiles[i + 2].isdigit()):
                raise UnexpectedCharacter(i, c)
            tokens.append(Token(smiles[i : i + 3], TokenKind.RING_BOND))
            i += 3
        elif c.isdigit():
            tokens.append(Token(c, TokenKind.RING_BOND))
            i += 1
        elif c in _BOND_CHARS:
            # / and \ are lexed as bonds so the parser can reject them as
            # stereo markers instead of reporting a bad character.
            tokens.append(Token(c, TokenKind.BOND))
            i += 1
        elif c == "(":
            tokens.append(Token(c, TokenKind.BRANCH_OPEN))
            i += 1
        elif c == ")":
            tokens.append(Token(c, TokenKind.BRANCH_CLOSE))
            i += 1
        elif c == ".":
            tokens.append(Token(c, TokenKind.DOT))
            i += 1
        else:
            raise UnexpectedCharacter(i, c)
    return tokens


def _parse_bracket(text: str, position: int) -> Atom:
    """Decode one '[...]' token into an Atom."""
    body = text[1:-1]
    if "@" in body:
        raise StereoUnsupported("chirality '@' in bracket atom", position)
    i = 0
    if i < len(body) and body[i].isdigit():
        raise StereoUnsupported("isotope label in bracket atom", position)
    aromatic = False
    if i < len(body) and body[i].isupper():
        element = body[i]
        i += 1
        if i < len(body) and body[i].islower():
            element += body[i]
            i += 1
    elif i < len(body) and body[i] in _AROMATIC:
        element = body[i].upper()
        aromatic = True
        i += 1
    else:
        raise UnexpectedCharacter(position + 1 + i, body[i] if i < len(body) else "")
    h_count = 0
    if i < len(body) and body[i] == "H":
        i += 1
        digits = ""
        while i < len(body) and body[i].isdigit():
            digits += body[i]
            i += 1
        h_count = int(digits) if digits else 1
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        symbol = body[i]
        i += 1
        digits = ""
        while i < len(body) and body[i].isdigit():
            digits += body[i]
            i += 1
        if digits:
            charge = sign * int(digits)
        else:
            charge = sign
            while i < len(body) and body[i] == symbol:
                charge += sign
                i += 1
    if i != len(body):
        raise UnexpectedCharacter(position + 1 + i, body[i])
    return Atom(element=element, aromatic=aromatic, charge=charge, h_count=h_count)


def _implicit_order(a: Atom, b: Atom) -> BondOrder:
    return BondOrder.AROMATIC if (a.aromatic and b.aromatic) else BondOrder.SINGLE


def parse(smiles: str) -> MolGraph:
    """Build the molecular graph a SMILES string spells out."""
    tokens = tokenize(smiles)
    positions: list[int] = []
    pos = 0
    for tok in tokens:
        positions.append(pos)
        pos += len(tok.text)

    graph = MolGraph()
    anchor: int | None = None
    pending: BondOrder | None = None
    branch_stack: list[int | None] = []
    open_rings: dict[int, tuple[int, BondOrder | None]] = {}

    for tok, tok_pos in zip(tokens, positions):
        if tok.kind in (TokenKind.ATOM, TokenKind.BRACKET_ATOM):
            if tok.kind == TokenKind.ATOM:
                aromatic = tok.text in _AROMATIC
                atom = Atom(element=tok.text.capitalize() if aromatic else tok.text, aromatic=aromatic)
            else:
                atom = _parse_bracket(tok.text, tok_pos)
            graph.atoms.append(atom)
            idx = len(graph.atoms) - 1
            if anchor is not None:
                order = pending if pending is not None else _implicit_order(graph.atoms[anchor], atom)
                graph.add_bond(anchor, idx, order)
            anchor = idx
            pending = None
        elif tok.kind == TokenKind.BOND:
            if tok.text in "/\\":
                raise StereoUnsupported(f"directional bond {tok.text!r}", tok_pos)
            if anchor is None or pending is not None:
                raise SmilesError("bond symbol without a preceding atom", tok_pos)
            pending = _BOND_ORDER[tok.text]
        elif tok.kind == TokenKind.RING_BOND:
            digit = int(tok.text[1:]) if tok.text.startswith("%") else int(tok.text)
            if anchor is None:
                raise SmilesError("ring bond digit before any atom", tok_pos)
            if digit in open_rings:
                other, other_order = open_rings.pop(digit)
                if other == anchor:
                    raise UnmatchedRingBond(digit, f"ring bond {digit} closes on its own atom")
                if pending is not None and other_order is not None and pending is not other_order:
                    raise UnmatchedRingBond(digit, f"ring bond {digit} has conflicting bond orders")
                order = pending or other_order or _implicit_order(graph.atoms[other], graph.atoms[anchor])
                graph.add_bond(other, anchor, order)
            else:
                open_rings[digit] = (anchor, pending)
            pending = None
        elif tok.kind == TokenKind.BRANCH_OPEN:
            if anchor is None or pending is not None:
                raise SmilesError("branch must follow an atom", tok_pos)
            branch_stack.append(anchor)
        elif tok.kind == TokenKind.BRANCH_CLOSE:
            if not branch_stack:
                raise UnclosedBranch("branch close without matching open")
            if pending is not None:
                raise SmilesError("dangling bond before branch close", tok_pos)
            anchor = branch_stack.pop()
        elif tok.kind == TokenKind.DOT:
            if pending is not None:
                raise SmilesError("dangling bond before fragment separator", tok_pos)
            anchor = None

    if pending is not None:
        raise SmilesError("dangling bond at end of input")
    if open_rings:
        raise UnmatchedRingBond(min(open_rings))
    if branch_stack:
        raise UnclosedBranch()
    return graph


def _fragments(graph: MolGraph) -> list[list[int]]:
    adj = graph.adjacency()
    seen = [False] * len(graph.atoms)
    result = []
    for start in range(len(graph.atoms)):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            a = stack.pop()
            comp.append(a)
            for b, _ in adj[a]:
                if not seen[b]:
                    seen[b] = True
                    stack.append(b)
        result.append(sorted(comp))
    return result


def _morgan_ranks(graph: MolGraph, atoms: list[int], adj) -> dict[int, int]:
    """Iteratively refined atom ranks within one connected fragment.

    Starts from (element, aromatic, charge, H count, degree) and refines by
    sorted neighbor (bond order, rank) multisets until the partition stops
    splitting.  Ranks are dense, 0-based, lowest rank first.
    """

    def dense(keys: dict[int, tuple]) -> dict[int, int]:
        order = {k: r for r, k in enumerate(sorted(set(keys.values())))}
        return {a: order[keys[a]] for a in atoms}

    initial = {
        a: (
            graph.atoms[a].element,
            graph.atoms[a].aromatic,
            graph.atoms[a].charge,
            -1 if graph.atoms[a].h_count is None else graph.atoms[a].h_count,
            len(adj[a]),
        )
        for a in atoms
    }
    ranks = dense(initial)
    while True:
        keys = {
            a: (ranks[a], tuple(sorted((order.value, ranks[b]) for b, order in adj[a])))
            for a in atoms
        }
        new = dense(keys)
        if len(set(new.values())) == len(set(ranks.values())):
            return new
        ranks = new


def canonical_ranks(graph: MolGraph) -> list[int]:
    """Per-atom refined ranks (dense within each fragment)."""
    adj = graph.adjacency()
    out = [0] * len(graph.atoms)
    for frag in _fragments(graph):
        for a, r in _morgan_ranks(graph, frag, adj).items():
            out[a] = r
    return out


def _atom_token(atom: Atom) -> str:
    bare_ok = (
        atom.charge == 0
        and atom.h_count is None
        and (atom.element in _ORGANIC or atom.element in _TWO_LETTER or (atom.aromatic and atom.element.lower() in _AROMATIC))
    )
    symbol = atom.element.lower() if atom.aromatic else atom.element
    if bare_ok:
        return symbol
    parts = ["[", symbol]
    h = 0 if atom.h_count is None else atom.h_count
    if h == 1:
        parts.append("H")
    elif h > 1:
        parts.append(f"H{h}")
    if atom.charge == 1:
        parts.append("+")
    elif atom.charge == -1:
        parts.append("-")
    elif atom.charge > 1:
        parts.append(f"+{atom.charge}")
    elif atom.charge < -1:
        parts.append(f"-{-atom.charge}")
    parts.append("]")
    return "".join(parts)


def _write_fragment(graph: MolGraph, atoms: list[int], adj, priority: dict[int, tuple]) -> str:
    """Emit one fragment as SMILES, visiting atoms in priority order."""
    start = min(atoms, key=lambda a: priority[a])
    children: dict[int, list[int]] = {a: [] for a in atoms}
    closures: dict[int, list[tuple[int, BondOrder]]] = {a: [] for a in atoms}
    bond_of: dict[tuple[int, int], BondOrder] = {}
    preorder: dict[int, int] = {}
    visited: set[int] = set()
    stack: list[tuple[int, int | None]] = [(start, None)]
    ring_seen: set[tuple[int, int]] = set()
    while stack:
        a, parent = stack.pop()
        if a in visited:
            continue
        visited.add(a)
        preorder[a] = len(preorder)
        if parent is not None:
            children[parent].append(a)
        neighbors = sorted(((b, order) for b, order in adj[a]), key=lambda t: priority[t[0]])
        for b, order in neighbors:
            bond_of[(a, b)] = bond_of[(b, a)] = order
            if b in visited:
                key = (min(a, b), max(a, b))
                if b != parent and key not in ring_seen:
                    ring_seen.add(key)
                    closures[a].append((b, order))
                    closures[b].append((a, order))
        # LIFO stack: push in reverse so the best-priority child is written first.
        for b, _ in reversed(neighbors):
            if b not in visited:
                stack.append((b, a))

    digit_of: dict[tuple[int, int], int] = {}
    in_use: set[int] = set()

    def ring_token(a: int, b: int, order: BondOrder) -> str:
        key = (min(a, b), max(a, b))
        if key in digit_of:
            digit = digit_of.pop(key)
            in_use.discard(digit)
        else:
            digit = 1
            while digit in in_use:
                digit += 1
            in_use.add(digit)
            digit_of[key] = digit
        bond = "" if order == _implicit_order(graph.atoms[a], graph.atoms[b]) else _BOND_SYMBOL[order]
        return bond + (str(digit) if digit < 10 else f"%{digit:02d}")

    out: list[str] = []

    def emit(a: int) -> None:
        out.append(_atom_token(graph.atoms[a]))
        for b, order in sorted(closures[a], key=lambda t: preorder[t[0]]):
            out.append(ring_token(a, b, order))
        kids = children[a]
        for k, b in enumerate(kids):
            order = bond_of[(a, b)]
            bond = "" if order == _implicit_order(graph.atoms[a], graph.atoms[b]) else _BOND_SYMBOL[order]
            if k < len(kids) - 1:
                out.append("(")
                out.append(bond)
                emit(b)
                out.append(")")
            else:
                out.append(bond)
                emit(b)

    emit(start)
    return "".join(out)


def write_smiles(graph: MolGraph, priority: list[tuple] | None = None) -> str:
    """Write a SMILES string for the graph; priority controls atom order."""
    if not graph.atoms:
        raise SmilesError("cannot write an empty graph")
    adj = graph.adjacency()
    if priority is None:
        prio = {a: (a,) for a in range(len(graph.atoms))}
    else:
        prio = {}
        for a in range(len(graph.atoms)):
            p = priority[a]
            prio[a] = (tuple(p) if isinstance(p, tuple) else (int(p),)) + (a,)
    pieces = [_write_fragment(graph, frag, adj, prio) for frag in _fragments(graph)]
    return ".".join(pieces)


def canonicalize(graph: MolGraph) -> str:
    """Deterministic canonical SMILES for the graph.

    The output depends only on the isomorphism class of the graph as long
    as the Morgan refinement assigns distinct ranks within each fragment;
    residual automorphism ties fall back to input order.  Fragments are
    written independently and joined by '.' in sorted order.
    """
    if not graph.atoms:
        raise SmilesError("cannot canonicalize an empty graph")
    adj = graph.adjacency()
    pieces = []
    for frag in _fragments(graph):
        ranks = _morgan_ranks(graph, frag, adj)
        prio = {a: (ranks.get(a, 0), a) for a in range(len(graph.atoms))}
        pieces.append(_write_fragment(graph, frag, adj, prio))
    return ".".join(sorted(pieces))


def canonical_smiles(smiles: str) -> str:
    return canonicalize(parse(smiles))


def permute_atoms(graph: MolGraph, perm: list[int]) -> MolGraph:
    """Relabel atoms: new index perm[i] gets old atom i."""
    if sorted(perm) != list(range(len(graph.atoms))):
        raise ValueError("perm must be a permutation of the atom indices")
    atoms: list[Atom | None] = [None] * len(graph.atoms)
    for old, new in enumerate(perm):
        a = graph.atoms[old]
        atoms[new] = Atom(a.element, a.aromatic, a.charge, a.h_count)
    out = MolGraph(atoms=atoms)  # type: ignore[arg-type]
    for bond in graph.bonds:
        out.add_bond(perm[bond.a], perm[bond.b], bond.order)
    return out


def random_smiles(graph: MolGraph, rng: np.random.Generator) -> str:
    """A random rewrite of the graph: same molecule, shuffled atom order."""
    perm = list(rng.permutation(len(graph.atoms)))
    shuffled = permute_atoms(graph, perm)
    prio = [(int(p),) for p in rng.permutation(len(graph.atoms))]
    return write_smiles(shuffled, prio)


@dataclass(frozen=True)
class Vocabulary:
    """Token-text to id map with reserved PAD (0) and UNK (1) slots."""

    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def id_of(self, text: str) -> int:
        return self.token_to_id.get(text, UNK_ID)

    def to_json(self) -> dict[str, int]:
        return dict(self.token_to_id)

    @classmethod
    def from_json(cls, data: dict[str, int]) -> "Vocabulary":
        vocab = cls(token_to_id={str(k): int(v) for k, v in data.items()})
        if vocab.token_to_id.get(PAD_TOKEN) != PAD_ID or vocab.token_to_id.get(UNK_TOKEN) != UNK_ID:
            raise ValueError("vocabulary is missing reserved PAD/UNK ids")
        return vocab


def build_vocabulary(corpus: list[str]) -> Vocabulary:
    """Vocabulary of all distinct tokens in the corpus, ids sorted by text."""
    texts: set[str] = set()
    for i, smiles in enumerate(corpus):
        try:
            texts.update(tok.text for tok in tokenize(smiles))
        except SmilesError as exc:
            exc.corpus_index = i
            raise
    mapping = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
    for text in sorted(texts):
        mapping[text] = len(mapping)
    return Vocabulary(token_to_id=mapping)


def encode_tokens(smiles: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """Token ids padded or truncated to exactly max_len; OOV maps to UNK."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    ids = [vocab.id_of(tok.text) for tok in tokenize(smiles)][:max_len]
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return ids
