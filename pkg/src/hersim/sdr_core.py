"""Sparse distributed representations and per-component random streams.

An :class:`Sdr` is an immutable fixed-width binary vector stored as a sorted
tuple of active bit indices. Everything that flows between components of the
simulator (encoder outputs, projections, symbols, predictions) is an Sdr or a
:class:`PredictionMultiset` built from several of them.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

MAX_WIDTH = 1 << 16


class ContractError(ValueError):
    """Raised when an operation is called outside its documented preconditions."""


class Sdr:
    __slots__ = ("width", "active", "_set")

    def __init__(self, width: int, active: Iterable[int] = ()):
        width = int(width)
        if width <= 0 or width > MAX_WIDTH:
            raise ContractError(f"Sdr width must be in 1..{MAX_WIDTH}, got {width}")
        bits = sorted({int(i) for i in active})
        if bits and (bits[0] < 0 or bits[-1] >= width):
            raise ContractError(f"active index out of range for width {width}")
        self.width = width
        self.active = tuple(bits)
        self._set = frozenset(bits)

    @classmethod
    def from_dense(cls, dense) -> "Sdr":
        dense = np.asarray(dense)
        return cls(dense.size, np.flatnonzero(dense).tolist())

    @property
    def bits(self) -> frozenset:
        return self._set

    def __len__(self) -> int:
        return len(self.active)

    def __iter__(self):
        return iter(self.active)

    def __contains__(self, i) -> bool:
        return i in self._set

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sdr):
            return NotImplemented
        return self.width == other.width and self.active == other.active

    def __hash__(self) -> int:
        return hash((self.width, self.active))

    def __repr__(self) -> str:
        return f"Sdr({self.to_text()})"

    def dense(self) -> np.ndarray:
        out = np.zeros(self.width, dtype=bool)
        out[list(self.active)] = True
        return out

    def to_text(self) -> str:
        return f"{self.width}:" + ",".join(str(i) for i in self.active)

    @classmethod
    def from_text(cls, text: str) -> "Sdr":
        head, _, body = text.strip().partition(":")
        if not head:
            raise ContractError(f"malformed Sdr text {text!r}")
        body = body.strip()
        return cls(int(head), [int(t) for t in body.split(",")] if body else [])


class TaggedSdr(NamedTuple):
    """An Sdr together with the (stream_id, offset) tag of the input it came from."""

    sdr: Sdr
    tag: tuple


class PredictionMultiset:
    """Per-bit prediction counts, e.g. how many branches or replicas predict each bit."""

    __slots__ = ("width", "counts")

    def __init__(self, width: int, counts: Mapping[int, int] | None = None):
        self.width = int(width)
        clean = {}
        for k, v in (counts or {}).items():
            k, v = int(k), int(v)
            if not 0 <= k < self.width:
                raise ContractError(f"multiset key {k} out of range for width {self.width}")
            if v < 0:
                raise ContractError("multiplicities must be non-negative")
            if v:
                clean[k] = v
        self.counts = dict(sorted(clean.items()))

    def support(self) -> Sdr:
        return Sdr(self.width, self.counts)

    def max_count(self) -> int:
        return max(self.counts.values(), default=0)

    def __len__(self) -> int:
        return len(self.counts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PredictionMultiset):
            return NotImplemented
        return self.width == other.width and self.counts == other.counts

    def __repr__(self) -> str:
        return f"PredictionMultiset({self.width}, {self.counts})"

    def __add__(self, other: "PredictionMultiset") -> "PredictionMultiset":
        if other.width != self.width:
            raise ContractError("multiset width mismatch")
        c = Counter(self.counts)
        c.update(other.counts)
        return PredictionMultiset(self.width, c)


def _check_same_width(xs: Sequence[Sdr]) -> None:
    if len({x.width for x in xs}) > 1:
        raise ContractError("Sdr width mismatch: " + ", ".join(str(x.width) for x in xs))


def overlap(a: Sdr, b: Sdr) -> int:
    if a.width != b.width:
        raise ContractError(f"overlap of widths {a.width} and {b.width}")
    return len(a.bits & b.bits)


def union_all(xs: Sequence[Sdr], width: int | None = None) -> Sdr:
    """Union of equal-width Sdrs. ``width`` is only needed when ``xs`` is empty."""
    xs = list(xs)
    if not xs:
        if width is None:
            raise ContractError("union of nothing needs an explicit width")
        return Sdr(width)
    _check_same_width(xs)
    bits = set()
    for x in xs:
        bits |= x.bits
    return Sdr(xs[0].width, bits)


def concat(xs: Sequence[Sdr]) -> Sdr:
    """Concatenate Sdrs side by side: widths add, indices shift by the running offset."""
    out, off = [], 0
    for x in xs:
        out.extend(i + off for i in x.active)
        off += x.width
    return Sdr(off, out)


def split(x: Sdr, widths: Sequence[int]) -> list[Sdr]:
    """Inverse of :func:`concat` for known part widths."""
    if sum(widths) != x.width:
        raise ContractError("split widths do not add up")
    parts, off = [], 0
    for w in widths:
        parts.append(Sdr(w, [i - off for i in x.active if off <= i < off + w]))
        off += w
    return parts


def multiset_merge(preds: Sequence[Sdr | PredictionMultiset], width: int | None = None) -> PredictionMultiset:
    """Count, for every bit, how many of ``preds`` contain it.

    Multisets may be mixed in; their multiplicities add up.
    """
    preds = list(preds)
    if not preds:
        return PredictionMultiset(width or 1)
    widths = {p.width for p in preds}
    if len(widths) > 1:
        raise ContractError(f"multiset_merge width mismatch {sorted(widths)}")
    c = Counter()
    for p in preds:
        if isinstance(p, PredictionMultiset):
            c.update(p.counts)
        else:
            c.update(p.active)
    return PredictionMultiset(widths.pop(), c)


def random_sdr(width: int, n_active: int, rng: np.random.Generator) -> Sdr:
    if n_active > width:
        raise ContractError(f"cannot draw {n_active} bits from width {width}")
    if n_active <= 0:
        return Sdr(width)
    return Sdr(width, rng.choice(width, size=n_active, replace=False).tolist())


def rng_stream(master_seed: int, path: str) -> np.random.Generator:
    """Counter-based generator for one component, keyed by (master_seed, path).

    Philox is keyed directly from a hash of the pair, so streams for different
    components are independent and do not depend on construction order.
    """
    digest = hashlib.blake2b(f"{int(master_seed)}|{path}".encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "counter": [int(v) for v in st["state"]["counter"]],
        "key": [int(v) for v in st["state"]["key"]],
        "buffer": [int(v) for v in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def rng_from_state(state: dict) -> np.random.Generator:
    if state["bit_generator"] != "Philox":
        raise ContractError(f"unsupported bit generator {state['bit_generator']}")
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(state["counter"], dtype=np.uint64),
            "key": np.array(state["key"], dtype=np.uint64),
        },
        "buffer": np.array(state["buffer"], dtype=np.uint64),
        "buffer_pos": state["buffer_pos"],
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }
    return np.random.Generator(bg)


# Permanences are 16-bit fixed point everywhere: 0 .. PERM_ONE maps to 0.0 .. 1.0.
PERM_ONE = 65535


def perm_q(x: float) -> int:
    """Quantize a permanence (or a permanence step) to fixed-point units."""
    return int(round(float(x) * PERM_ONE))


def perm_f(q: int) -> float:
    return q / PERM_ONE
