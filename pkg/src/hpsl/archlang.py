"""Parser, renderer and validator for the linear architecture notation.

Grammar (whitespace-insensitive, ``#`` starts a comment)::

    blueprint := level ("->" level)* [";" "fp_dropout" "=" REAL]
    level     := "SA" "(" INT "," REAL "," ilist ")"            single scale
               | "SA" "(" INT "," rlist "," "[" ilist ("," ilist)* "]" ")"   multi scale
               | "SA" "(" ilist ")"                               global
               | "FC" "(" INT ["," REAL] ")"
               | "FP" "(" INT ("," INT)* ")"
               | "MRG" "{" branch (";" branch){3} [";"] "}"
    branch    := "branch" N ":" level ("->" level)*
    ilist     := "[" INT ("," INT)* "]"
    rlist     := "[" REAL ("," REAL)* "]"

``MRG`` branches follow the four-branch classification layout: branch1 is a
chain of single-scale SA levels, branch2 a single-scale SA over raw points
evaluated at branch1's final centroids, branch3 a global SA over raw points
and branch4 a global SA over the concatenated branch1/branch2 features.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union


class ArchParseError(ValueError):
    def __init__(self, message: str, offset: int, expected: Optional[str] = None):
        self.offset = offset
        self.expected = expected
        text = f"byte {offset}: {message}"
        if expected:
            text += f" (expected {expected})"
        super().__init__(text)


class Head(enum.Enum):
    CLASSIFICATION = "classification"
    SEGMENTATION = "segmentation"


@dataclass(frozen=True)
class SALevel:
    """Set abstraction with one (SSG) or several (MSG) radius scales."""

    num_centroids: int
    radii: Tuple[float, ...]
    widths: Tuple[Tuple[int, ...], ...]

    @property
    def is_msg(self) -> bool:
        return len(self.radii) > 1

    @property
    def out_width(self) -> int:
        return sum(w[-1] for w in self.widths)


@dataclass(frozen=True)
class GlobalSA:
    widths: Tuple[int, ...]

    @property
    def out_width(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class FCLevel:
    width: int
    dropout: Optional[float] = None


@dataclass(frozen=True)
class FPLevel:
    widths: Tuple[int, ...]


@dataclass(frozen=True)
class MRGLevel:
    branch1: Tuple[SALevel, ...]
    branch2: SALevel
    branch3: GlobalSA
    branch4: GlobalSA


Level = Union[SALevel, GlobalSA, FCLevel, FPLevel, MRGLevel]

DEFAULT_FP_DROPOUT = 0.5


@dataclass(frozen=True)
class NetworkBlueprint:
    levels: Tuple[Level, ...]
    fp_dropout: float = DEFAULT_FP_DROPOUT

    @property
    def head(self) -> Head:
        if any(isinstance(lv, FPLevel) for lv in self.levels):
            return Head.SEGMENTATION
        return Head.CLASSIFICATION

    @property
    def has_msg(self) -> bool:
        return any(isinstance(lv, SALevel) and lv.is_msg for lv in self.levels)

    @property
    def has_mrg(self) -> bool:
        return any(isinstance(lv, MRGLevel) for lv in self.levels)


# -- tokenizer ------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<arrow>->)
  | (?P<num>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[()\[\]{},;:=])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    offset: int


def _tokenize(text: str) -> List[_Tok]:
    toks: List[_Tok] = []
    pos = 0
    byte = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ArchParseError(f"unexpected character {text[pos]!r}", byte)
        kind = m.lastgroup
        chunk = m.group()
        if kind != "ws":
            toks.append(_Tok(kind if kind != "punct" else chunk, chunk, byte))
        pos = m.end()
        byte += len(chunk.encode("utf-8"))
    toks.append(_Tok("eof", "", byte))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, message: str, expected: Optional[str] = None, tok: Optional[_Tok] = None):
        tok = tok or self.cur
        found = tok.text if tok.kind != "eof" else "end of input"
        raise ArchParseError(f"{message}, found {found!r}", tok.offset, expected)

    def accept(self, kind: str) -> Optional[_Tok]:
        if self.cur.kind == kind:
            tok = self.cur
            self.i += 1
            return tok
        return None

    def expect(self, kind: str, what: Optional[str] = None) -> _Tok:
        tok = self.accept(kind)
        if tok is None:
            self.fail("unexpected token", what or repr(kind))
        return tok

    def integer(self, what: str = "integer") -> int:
        tok = self.cur
        if tok.kind != "num":
            self.fail(f"non-numeric token where {what} was required", what)
        if not re.fullmatch(r"[+]?\d+", tok.text):
            self.fail(f"{what} must be an integer", what)
        if len(tok.text) > 12:
            self.fail(f"{what} is too large", what)
        value = int(tok.text)
        if value < 1:
            self.fail(f"{what} must be positive", what)
        self.i += 1
        return value

    def real(self, what: str = "number") -> float:
        tok = self.cur
        if tok.kind != "num":
            self.fail(f"non-numeric token where {what} was required", what)
        value = float(tok.text)
        if not math.isfinite(value):
            self.fail(f"{what} must be finite", what)
        self.i += 1
        return value

    def int_list(self, what: str = "width") -> Tuple[int, ...]:
        self.expect("[", "'['")
        items = [self.integer(what)]
        while self.accept(","):
            items.append(self.integer(what))
        self.expect("]", "',' or ']'")
        return tuple(items)

    # levels

    def blueprint(self) -> NetworkBlueprint:
        if self.cur.kind == "eof":
            self.fail("empty blueprint", "a level")
        levels = [self.level()]
        while self.accept("arrow"):
            levels.append(self.level())
        fp_dropout = DEFAULT_FP_DROPOUT
        if self.accept(";"):
            tok = self.expect("name", "'fp_dropout'")
            if tok.text != "fp_dropout":
                self.fail("unknown blueprint option", "'fp_dropout'", tok)
            self.expect("=", "'='")
            at = self.cur
            fp_dropout = self.real("dropout ratio")
            if not 0.0 <= fp_dropout < 1.0:
                self.fail("dropout ratio must be in [0, 1)", "dropout ratio", at)
        if self.cur.kind != "eof":
            self.fail("unexpected trailing token", "'->' or end of input")
        bp = NetworkBlueprint(tuple(levels), fp_dropout)
        self.check_structure(bp)
        return bp

    def level(self) -> Level:
        tok = self.cur
        if tok.kind != "name":
            self.fail("expected a level name", "SA, FC, FP or MRG")
        if tok.text == "SA":
            self.i += 1
            return self.sa()
        if tok.text == "FC":
            self.i += 1
            return self.fc()
        if tok.text == "FP":
            self.i += 1
            return self.fp()
        if tok.text == "MRG":
            self.i += 1
            return self.mrg()
        self.fail("unknown level name", "SA, FC, FP or MRG")

    def sa(self) -> Union[SALevel, GlobalSA]:
        self.expect("(", "'('")
        if self.cur.kind == "[":
            widths = self.int_list()
            self.expect(")", "')'")
            return GlobalSA(widths)
        k = self.integer("number of centroids")
        self.expect(",", "','")
        if self.cur.kind == "[":
            at = self.cur
            self.i += 1
            radii = [self.real("radius")]
            while self.accept(","):
                radii.append(self.real("radius"))
            self.expect("]", "',' or ']'")
            if any(r <= 0 for r in radii):
                self.fail("radii must be positive", "positive radius", at)
            if len(set(radii)) != len(radii):
                self.fail("multi-scale radii must be distinct", "distinct radii", at)
            self.expect(",", "',' and a list of width lists")
            self.expect("[", "'[' opening the list of width lists")
            widths = [self.int_list()]
            while self.accept(","):
                widths.append(self.int_list())
            self.expect("]", "',' or ']'")
            self.expect(")", "')'")
            if len(widths) != len(radii):
                self.fail(f"{len(radii)} radii but {len(widths)} width lists", "one width list per radius", at)
            return SALevel(k, tuple(radii), tuple(widths))
        at = self.cur
        r = self.real("radius")
        if r <= 0:
            self.fail("radius must be positive", "positive radius", at)
        if self.cur.kind == ")":
            self.fail("width list required", "',' and a width list")
        self.expect(",", "','")
        widths = self.int_list()
        self.expect(")", "')'")
        return SALevel(k, (r,), (widths,))

    def fc(self) -> FCLevel:
        self.expect("(", "'('")
        width = self.integer("width")
        dp = None
        if self.accept(","):
            at = self.cur
            dp = self.real("dropout ratio")
            if not 0.0 <= dp < 1.0:
                self.fail("dropout ratio must be in [0, 1)", "dropout ratio", at)
        self.expect(")", "')'")
        return FCLevel(width, dp)

    def fp(self) -> FPLevel:
        self.expect("(", "'('")
        widths = [self.integer("width")]
        while self.accept(","):
            widths.append(self.integer("width"))
        self.expect(")", "',' or ')'")
        return FPLevel(tuple(widths))

    def mrg(self) -> MRGLevel:
        self.expect("{", "'{'")
        branches = []
        for n in range(1, 5):
            tok = self.expect("name", f"'branch{n}'")
            if tok.text != f"branch{n}":
                self.fail("unexpected branch label", f"'branch{n}'", tok)
            self.expect(":", "':'")
            chain = [self.level()]
            while self.accept("arrow"):
                chain.append(self.level())
            branches.append((tok, chain))
            if n < 4:
                self.expect(";", "';'")
        self.accept(";")
        self.expect("}", "'}'")
        (t1, b1), (t2, b2), (t3, b3), (t4, b4) = branches
        if not all(isinstance(lv, SALevel) and not lv.is_msg for lv in b1):
            self.fail("branch1 must be single-scale SA levels", "SA(K,r,[...])", t1)
        if len(b2) != 1 or not isinstance(b2[0], SALevel) or b2[0].is_msg:
            self.fail("branch2 must be one single-scale SA level", "SA(K,r,[...])", t2)
        if b2[0].num_centroids < b1[-1].num_centroids:
            self.fail("branch2 needs at least as many centroids as branch1's last level", "larger K", t2)
        if len(b3) != 1 or not isinstance(b3[0], GlobalSA):
            self.fail("branch3 must be one global SA level", "SA([...])", t3)
        if len(b4) != 1 or not isinstance(b4[0], GlobalSA):
            self.fail("branch4 must be one global SA level", "SA([...])", t4)
        return MRGLevel(tuple(b1), b2[0], b3[0], b4[0])

    def check_structure(self, bp: NetworkBlueprint) -> None:
        """Ordering rules that do not depend on input dimensions."""
        # token offsets of level starts, for error positions
        starts = [self.toks[0]]
        depth = 0
        for j, tok in enumerate(self.toks):
            if tok.kind in ("(", "[", "{"):
                depth += 1
            elif tok.kind in (")", "]", "}"):
                depth -= 1
            elif tok.kind == "arrow" and depth == 0:
                starts.append(self.toks[j + 1])
        seen_fc = seen_fp = seen_global = False
        for lv, tok in zip(bp.levels, starts):
            if isinstance(lv, MRGLevel):
                if lv is not bp.levels[0]:
                    self.fail("MRG must be the first level", "MRG{...} at the start", tok)
                seen_global = True
            elif isinstance(lv, (SALevel, GlobalSA)):
                if seen_fc or seen_fp:
                    self.fail("set abstraction after FC/FP", "FC or FP", tok)
                if seen_global:
                    self.fail("set abstraction after a global level", "FC or FP", tok)
                if isinstance(lv, GlobalSA):
                    seen_global = True
            elif isinstance(lv, FCLevel):
                if seen_fp:
                    self.fail("FC after FP", "FP", tok)
                if not seen_global:
                    self.fail("FC requires a preceding global SA", "SA([...]) before FC", tok)
                seen_fc = True
            elif isinstance(lv, FPLevel):
                if seen_fc:
                    self.fail("FP after FC", "FC", tok)
                seen_fp = True
        last, tok = bp.levels[-1], starts[-1]
        if not isinstance(last, (FCLevel, FPLevel)):
            self.fail("blueprint must end in FC (classification) or FP (segmentation)", "FC or FP", tok)


def parse_blueprint(text: Union[str, bytes]) -> NetworkBlueprint:
    """Parse architecture text into a :class:`NetworkBlueprint`.

    Raises :class:`ArchParseError` carrying a byte offset on any input
    outside the grammar.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ArchParseError("invalid UTF-8", exc.start) from None
    return _Parser(text).blueprint()


def read_blueprint(path) -> NetworkBlueprint:
    with open(path, "rb") as fh:
        return parse_blueprint(fh.read())


# -- rendering ----------------------------------------------------------------

def _num(x: float) -> str:
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def _ints(ws) -> str:
    return "[" + ",".join(str(w) for w in ws) + "]"


def render_level(lv: Level) -> str:
    if isinstance(lv, SALevel):
        if not lv.is_msg:
            return f"SA({lv.num_centroids},{_num(lv.radii[0])},{_ints(lv.widths[0])})"
        radii = "[" + ",".join(_num(r) for r in lv.radii) + "]"
        widths = "[" + ",".join(_ints(w) for w in lv.widths) + "]"
        return f"SA({lv.num_centroids},{radii},{widths})"
    if isinstance(lv, GlobalSA):
        return f"SA({_ints(lv.widths)})"
    if isinstance(lv, FCLevel):
        if lv.dropout is None:
            return f"FC({lv.width})"
        return f"FC({lv.width},{_num(lv.dropout)})"
    if isinstance(lv, FPLevel):
        return "FP(" + ",".join(str(w) for w in lv.widths) + ")"
    if isinstance(lv, MRGLevel):
        b1 = " -> ".join(render_level(x) for x in lv.branch1)
        return (
            f"MRG{{branch1: {b1}; branch2: {render_level(lv.branch2)}; "
            f"branch3: {render_level(lv.branch3)}; branch4: {render_level(lv.branch4)}}}"
        )
    raise TypeError(f"not a level: {lv!r}")


def render_blueprint(bp: NetworkBlueprint) -> str:
    text = " -> ".join(render_level(lv) for lv in bp.levels)
    if bp.fp_dropout != DEFAULT_FP_DROPOUT:
        text += f"; fp_dropout={_num(bp.fp_dropout)}"
    return text


# -- width chaining ------------------------------------------------------------

@dataclass
class ChainReport:
    ok: bool
    level: Optional[int] = None
    message: str = ""
    widths: List[Tuple[int, int]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def validate_chain(
    bp: NetworkBlueprint,
    input_d: int,
    input_C: int,
    num_classes: int,
    coords_as_input: bool = True,
) -> ChainReport:
    """Check that level widths chain for the given input dimensions.

    Each SA scale consumes ``d + C`` (localized coordinates plus features,
    ``d`` dropped when coordinates are not network inputs); each FP consumes
    the coarse width plus the skip-link width of the level it restores.
    Returns a report; never raises.
    """
    loc = input_d if coords_as_input else 0
    widths: List[Tuple[int, int]] = []
    stack = [input_C]
    c = input_C

    def bad(i: int, msg: str) -> ChainReport:
        return ChainReport(False, i, f"level {i} ({render_level(bp.levels[i])}): {msg}", widths)

    try:
        levels = bp.levels
        if input_d < 1 or input_C < 0 or num_classes < 1:
            return ChainReport(False, None, "input dims require d >= 1, C >= 0 and at least one class", widths)
        prev_k = None
        for i, lv in enumerate(levels):
            if isinstance(lv, SALevel):
                if prev_k is not None and lv.num_centroids > prev_k:
                    return bad(i, f"{lv.num_centroids} centroids exceed the {prev_k} points of the previous level")
                prev_k = lv.num_centroids
                widths.append((loc + c, lv.out_width))
                c = lv.out_width
                stack.append(c)
            elif isinstance(lv, GlobalSA):
                widths.append((loc + c, lv.out_width))
                c = lv.out_width
                stack.append(c)
                prev_k = 1
            elif isinstance(lv, MRGLevel):
                k_prev = None
                for sub in lv.branch1:
                    if k_prev is not None and sub.num_centroids > k_prev:
                        return bad(i, "branch1 centroid counts must not increase")
                    k_prev = sub.num_centroids
                c = lv.branch3.out_width + lv.branch4.out_width
                widths.append((loc + input_C, c))
                stack.append(c)
            elif isinstance(lv, FCLevel):
                widths.append((c, lv.width))
                c = lv.width
            elif isinstance(lv, FPLevel):
                if len(stack) < 2:
                    return bad(i, "no skip link left: more FP levels than set abstraction levels")
                stack.pop()
                skip = stack[-1]
                widths.append((c + skip, lv.widths[-1]))
                c = lv.widths[-1]
        last = levels[-1]
        if bp.head is Head.SEGMENTATION and len(stack) != 1:
            n_sa = sum(isinstance(lv, (SALevel, GlobalSA)) for lv in levels)
            n_fp = sum(isinstance(lv, FPLevel) for lv in levels)
            return bad(len(levels) - 1, f"{n_fp} FP levels cannot restore {n_sa} set abstraction levels to the input points")
        if isinstance(last, FCLevel) and last.dropout:
            return bad(len(levels) - 1, "the score layer cannot carry dropout")
        if c != num_classes:
            return bad(len(levels) - 1, f"head emits {c} scores but {num_classes} classes were requested")
    except Exception as exc:  # pragma: no cover - defensive, the contract is no-throw
        return ChainReport(False, None, f"internal error: {exc}", widths)
    return ChainReport(True, None, "ok", widths)
