"""Prime-field operation datasets: tasks, residue classes, train/test splits."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Union

import numpy as np

from .rng import make_rng

MAX_P = 65521


class EmptyTrainError(ValueError):
    pass


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    for d in range(3, math.isqrt(n) + 1, 2):
        if n % d == 0:
            return False
    return True


class Pair(NamedTuple):
    i: int
    j: int


Term = tuple[int, int, int]  # (coeff, exp_i, exp_j)


@dataclass(frozen=True)
class TaskSpec:
    """Prime modulus ``p`` and polynomial ``f(i, j) = sum coeff * i**a * j**b``."""

    p: int
    terms: tuple[Term, ...] = ((1, 1, 0), (1, 0, 1))
    operand_offset: int = 0

    def __post_init__(self):
        if not (3 <= self.p <= MAX_P) or not is_prime(self.p):
            raise ValueError(f"p must be a prime in [3, {MAX_P}], got {self.p}")
        if not self.terms:
            raise ValueError("f needs at least one term")
        if self.operand_offset < 0:
            raise ValueError("operand_offset must be non-negative")
        terms = []
        for t in self.terms:
            c, a, b = (int(x) for x in t)
            if a < 0 or b < 0:
                raise ValueError(f"negative exponent in term {t}")
            terms.append((c % self.p, a, b))
        object.__setattr__(self, "terms", tuple(terms))

    @classmethod
    def from_expr(cls, p: int, expr: str, operand_offset: int = 0) -> "TaskSpec":
        return cls(p, parse_polynomial(expr), operand_offset)

    @property
    def vocab_size(self) -> int:
        return self.p + self.operand_offset + 1

    @property
    def cls_token(self) -> int:
        return self.vocab_size - 1

    def describe(self) -> str:
        parts = []
        for c, a, b in self.terms:
            mono = "*".join(
                s for s in (_pow("i", a), _pow("j", b)) if s
            ) or "1"
            parts.append(mono if c == 1 else f"{c}*{mono}")
        return " + ".join(parts)

    def to_dict(self) -> dict:
        return {"p": self.p, "terms": [list(t) for t in self.terms], "offset": self.operand_offset}


def _pow(sym: str, e: int) -> str:
    if e == 0:
        return ""
    return sym if e == 1 else f"{sym}^{e}"


_TOKEN = re.compile(r"\s*(?:(\d+)|([ij])|(\^|\*\*)|([*+\-]))")


def parse_polynomial(expr: str) -> tuple[Term, ...]:
    """Parse e.g. ``"i^2 + i*j + j^2"`` or ``"3*i - j"`` into terms.

    Only sums of monomials are accepted (no parentheses).
    """
    pos, toks = 0, []
    expr = expr.strip()
    while pos < len(expr):
        m = _TOKEN.match(expr, pos)
        if not m or m.end() == pos:
            raise ValueError(f"cannot parse polynomial at {expr[pos:]!r}")
        pos = m.end()
        num, var, caret, op = m.groups()
        toks.append(("num", int(num)) if num else ("var", var) if var else ("^", None) if caret else (op, None))

    terms: dict[tuple[int, int], int] = {}
    sign, k = 1, 0
    while k < len(toks):
        if toks[k][0] in "+-":
            sign = -1 if toks[k][0] == "-" else 1
            k += 1
        coeff, ei, ej, need = 1, 0, 0, True
        while k < len(toks) and (need or toks[k][0] == "*"):
            if toks[k][0] == "*":
                k += 1
            kind, val = toks[k]
            k += 1
            exp = 1
            if k < len(toks) and toks[k][0] == "^":
                if k + 1 >= len(toks) or toks[k + 1][0] != "num":
                    raise ValueError("exponent must be an integer")
                exp = toks[k + 1][1]
                k += 2
            if kind == "num":
                coeff *= val**exp
            elif kind == "var":
                if val == "i":
                    ei += exp
                else:
                    ej += exp
            else:
                raise ValueError(f"unexpected token {kind!r} in {expr!r}")
            need = False
        terms[(ei, ej)] = terms.get((ei, ej), 0) + sign * coeff
        sign = 1
    out = tuple((c, a, b) for (a, b), c in terms.items() if c != 0)
    if not out:
        raise ValueError(f"polynomial {expr!r} is identically zero")
    return out


def eval_f_mod(task: TaskSpec, pair: Pair | tuple[int, int]) -> int:
    i, j = pair
    p = task.p
    if not (0 <= i < p and 0 <= j < p):
        raise ValueError(f"pair {pair} outside [0,{p})^2")
    total = 0
    for c, a, b in task.terms:
        term = c
        for _ in range(a):
            term = term * i % p
        for _ in range(b):
            term = term * j % p
        total = (total + term) % p
    return total


def label_grid(task: TaskSpec) -> np.ndarray:
    """p x p array of residues ``r(i, j)``; vectorised twin of :func:`eval_f_mod`."""
    p = task.p
    i = np.arange(p, dtype=np.int64)[:, None]
    j = np.arange(p, dtype=np.int64)[None, :]
    out = np.zeros((p, p), dtype=np.int64)
    for c, a, b in task.terms:
        ti = np.ones_like(i)
        for _ in range(a):
            ti = ti * i % p
        tj = np.ones_like(j)
        for _ in range(b):
            tj = tj * j % p
        out = (out + c * (ti * tj % p)) % p
    return out


@dataclass(frozen=True)
class ResidueClasses:
    classes: tuple[tuple[Pair, ...], ...]
    sizes: np.ndarray


def class_partition(task: TaskSpec) -> ResidueClasses:
    labels = label_grid(task)
    buckets: list[list[Pair]] = [[] for _ in range(task.p)]
    for i in range(task.p):
        for j in range(task.p):
            buckets[labels[i, j]].append(Pair(i, j))
    sizes = np.array([len(b) for b in buckets], dtype=np.int64)
    return ResidueClasses(tuple(tuple(b) for b in buckets), sizes)


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class Random:
    frac: float
    seed: int = 0
    kind: str = field(default="random", init=False)


@dataclass(frozen=True)
class SquareReserve:
    k: int
    frac: float = 0.3
    seed: int = 0
    kind: str = field(default="square", init=False)


@dataclass(frozen=True)
class StripReserve:
    t: int
    frac: float = 0.3
    seed: int = 0
    kind: str = field(default="strip", init=False)


SplitSpec = Union[Random, SquareReserve, StripReserve]


def split_spec_to_dict(spec: SplitSpec) -> dict:
    d = {"kind": spec.kind}
    if isinstance(spec, SquareReserve):
        d["k"] = spec.k
    elif isinstance(spec, StripReserve):
        d["t"] = spec.t
    d["frac"] = spec.frac
    d["seed"] = spec.seed
    return d


def split_spec_from_dict(d: dict) -> SplitSpec:
    kind = d.get("kind", "random")
    frac, seed = float(d["frac"]), int(d.get("seed", 0))
    if kind == "random":
        return Random(frac, seed)
    if kind == "square":
        return SquareReserve(int(d["k"]), frac, seed)
    if kind == "strip":
        return StripReserve(int(d["t"]), frac, seed)
    raise ValueError(f"unknown split kind {kind!r}")


def reserved_mask(p: int, spec: SplitSpec) -> np.ndarray:
    """Boolean p x p mask of the region that is forced into the test set."""
    mask = np.zeros((p, p), dtype=bool)
    if isinstance(spec, SquareReserve):
        if not 0 <= spec.k < p:
            raise ValueError(f"square bound k={spec.k} must be in [0, {p})")
        mask[: spec.k + 1, : spec.k + 1] = True
    elif isinstance(spec, StripReserve):
        if not 0 <= spec.t < p:
            raise ValueError(f"strip bound t={spec.t} must be in [0, {p})")
        mask[: spec.t + 1, :] = True
    return mask


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Disjoint train/test pair arrays (shape ``(n, 2)``, row-major sorted)."""

    task: TaskSpec
    spec: SplitSpec
    train: np.ndarray
    test: np.ndarray

    @property
    def p(self) -> int:
        return self.task.p

    def train_mask(self) -> np.ndarray:
        m = np.zeros((self.p, self.p), dtype=bool)
        if len(self.train):
            m[self.train[:, 0], self.train[:, 1]] = True
        return m

    def train_set(self) -> set[Pair]:
        return {Pair(int(i), int(j)) for i, j in self.train}

    def test_set(self) -> set[Pair]:
        return {Pair(int(i), int(j)) for i, j in self.test}

    def to_dict(self) -> dict:
        return {
            "p": self.task.p,
            "terms": [list(t) for t in self.task.terms],
            "offset": self.task.operand_offset,
            "spec": split_spec_to_dict(self.spec),
            "train": self.train.tolist(),
            "test": self.test.tolist(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        task = TaskSpec(int(d["p"]), tuple(tuple(t) for t in d["terms"]), int(d.get("offset", 0)))
        train = np.asarray(d["train"], dtype=np.int64).reshape(-1, 2)
        test = np.asarray(d["test"], dtype=np.int64).reshape(-1, 2)
        split = cls(task, split_spec_from_dict(d["spec"]), train, test)
        _check_partition(split)
        return split

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSplit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_partition(split: DatasetSplit) -> None:
    p = split.p
    count = np.zeros((p, p), dtype=np.int64)
    for arr in (split.train, split.test):
        if len(arr) and (arr.min() < 0 or arr.max() >= p):
            raise ValueError("pair outside the grid")
        np.add.at(count, (arr[:, 0], arr[:, 1]), 1)
    if not np.all(count == 1):
        raise ValueError("train and test must partition the p x p grid")


def _pairs_from_mask(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(mask).astype(np.int64)


def split_from_mask(task: TaskSpec, spec: SplitSpec, train_mask: np.ndarray) -> DatasetSplit:
    return DatasetSplit(task, spec, _pairs_from_mask(train_mask), _pairs_from_mask(~train_mask))


def build_split(task: TaskSpec, spec: SplitSpec) -> DatasetSplit:
    p = task.p
    if not 0.0 < spec.frac < 1.0:
        raise ValueError(f"frac must lie in (0, 1), got {spec.frac}")
    reserved = reserved_mask(p, spec)
    candidates = np.flatnonzero(~reserved.ravel())  # row-major order
    m = math.floor(spec.frac * len(candidates))
    if m < 1:
        raise EmptyTrainError(f"frac={spec.frac} leaves no training pairs out of {len(candidates)}")
    rng = make_rng(spec.seed, "split")
    chosen = rng.choice(candidates, size=m, replace=False)
    train_mask = np.zeros(p * p, dtype=bool)
    train_mask[chosen] = True
    return split_from_mask(task, spec, train_mask.reshape(p, p))


def tokenize(task: TaskSpec, pair: Pair | tuple[int, int]) -> tuple[int, int, int]:
    i, j = pair
    return (int(i), task.operand_offset + int(j), task.cls_token)


def tokenize_pairs(task: TaskSpec, pairs: np.ndarray) -> np.ndarray:
    """Vectorised :func:`tokenize` for an ``(n, 2)`` array -> ``(n, 3)`` int array."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    out = np.empty((len(pairs), 3), dtype=np.int64)
    out[:, 0] = pairs[:, 0]
    out[:, 1] = pairs[:, 1] + task.operand_offset
    out[:, 2] = task.cls_token
    return out


def labels_for(task: TaskSpec, pairs: np.ndarray, grid: np.ndarray | None = None) -> np.ndarray:
    grid = label_grid(task) if grid is None else grid
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return grid[pairs[:, 0], pairs[:, 1]]


def iter_grid(p: int) -> Iterable[Pair]:
    for i in range(p):
        for j in range(p):
            yield Pair(i, j)
