"""Bundle-valued (p,q)-forms on the periodic grid and their pointwise algebra.

A FormField stores one complex array per bidegree (p,q) in {0,1}^2.
Coefficients live either in the endomorphism bundle (shape (N,N,r,r)) or in
the bundle itself (shape (N,N,r)).  The twist tuple records the per-summand
background degrees of the underlying bundle; difference operators use it to
pick matching link phases.  On a one-dimensional base the only bidegrees are
(0,0), (1,0), (0,1), (1,1); anything outside is the canonical zero and is
represented by simply omitting the component ("get" returns None).
"""

from __future__ import annotations

import struct

import numpy as np

END = "end"
SECTION = "section"

_BIDEGREES = ((0, 0), (1, 0), (0, 1), (1, 1))


class FormField:
    """One (p,q)-form family with endomorphism- or section-valued coefficients."""

    __slots__ = ("kind", "rank", "twist", "components")

    def __init__(self, kind, rank, twist, components=None):
        if kind not in (END, SECTION):
            raise ValueError("kind must be 'end' or 'section'")
        self.kind = kind
        self.rank = int(rank)
        self.twist = tuple(int(d) for d in twist)
        self.components = {}
        if components:
            for pq, arr in components.items():
                self.set(pq, arr)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def zeros(cls, N, rank, kind, twist, bidegrees):
        shape = (N, N, rank, rank) if kind == END else (N, N, rank)
        comps = {pq: np.zeros(shape, dtype=complex) for pq in bidegrees}
        return cls(kind, rank, twist, comps)

    def copy(self):
        return FormField(self.kind, self.rank, self.twist,
                         {pq: a.copy() for pq, a in self.components.items()})

    # -- access ---------------------------------------------------------------

    def set(self, pq, arr):
        p, q = pq
        if (p, q) not in _BIDEGREES:
            raise ValueError(f"bidegree {pq} out of range for a curve base")
        arr = np.asarray(arr, dtype=complex)
        want = 4 if self.kind == END else 3
        if arr.ndim != want:
            raise ValueError(f"component {pq}: expected {want}-d array, got {arr.ndim}-d")
        self.components[(p, q)] = arr

    def get(self, p, q):
        """Component array or None (canonical zero)."""
        return self.components.get((p, q))

    @property
    def bidegrees(self):
        return tuple(sorted(self.components))

    def degree(self):
        """Total degree; requires all stored components to agree."""
        degs = {p + q for (p, q) in self.components}
        if len(degs) > 1:
            raise ValueError(f"mixed total degree: {sorted(self.components)}")
        return degs.pop() if degs else 0

    def grid_size(self):
        for a in self.components.values():
            return a.shape[0]
        return 0

    # -- linear structure -----------------------------------------------------

    def _check_mate(self, other):
        if (self.kind, self.rank, self.twist) != (other.kind, other.rank, other.twist):
            raise ValueError("field kind/rank/twist mismatch")

    def __add__(self, other):
        self._check_mate(other)
        comps = {pq: a.copy() for pq, a in self.components.items()}
        for pq, b in other.components.items():
            comps[pq] = comps[pq] + b if pq in comps else b.copy()
        return FormField(self.kind, self.rank, self.twist, comps)

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return FormField(self.kind, self.rank, self.twist,
                         {pq: -a for pq, a in self.components.items()})

    def __mul__(self, c):
        return FormField(self.kind, self.rank, self.twist,
                         {pq: c * a for pq, a in self.components.items()})

    __rmul__ = __mul__

    def prune(self, tol=0.0):
        """Drop components that vanish identically (within tol)."""
        self.components = {pq: a for pq, a in self.components.items()
                           if np.abs(a).max() > tol}
        return self


# -- pointwise matrix helpers -------------------------------------------------

def mat_adjoint(M):
    """Plain conjugate transpose on the trailing matrix axes."""
    return np.conj(np.swapaxes(M, -1, -2))


def mat_star(M, h=None, hinv=None):
    """Pointwise h-adjoint  M^{*h} = h^{-1} M^dagger h  (batched)."""
    Md = mat_adjoint(M)
    if h is None:
        return Md
    if hinv is None:
        hinv = np.linalg.inv(h)
    return hinv @ Md @ h


def comm(A, B):
    return A @ B - B @ A


# -- form algebra -------------------------------------------------------------

def _wedge_terms(a, b, bracket):
    """Accumulate the wedge of a and b; bracket=True adds the graded swap."""
    out = {}
    for (p1, q1), A in a.components.items():
        for (p2, q2), B in b.components.items():
            p, q = p1 + p2, q1 + q2
            if p > 1 or q > 1:
                continue
            term = (-1.0) ** (q1 * p2) * (A @ B)
            if bracket:
                sgn = (-1.0) ** ((p1 + q1) * (p2 + q2)) * (-1.0) ** (q2 * p1)
                term = term - sgn * (B @ A)
            if (p, q) in out:
                out[(p, q)] = out[(p, q)] + term
            else:
                out[(p, q)] = term
    return out


def wedge_bracket(a: FormField, b: FormField) -> FormField:
    """Exterior product combined with the fiberwise Lie bracket, [a ^ b]."""
    if a.kind != END or b.kind != END:
        raise ValueError("wedge_bracket needs endomorphism-valued forms")
    if a.rank != b.rank or a.twist != b.twist:
        raise ValueError("rank/twist mismatch")
    return FormField(END, a.rank, a.twist, _wedge_terms(a, b, bracket=True))


def wedge_product(a: FormField, b: FormField) -> FormField:
    """Plain exterior product with fiberwise composition (no bracket).

    Used where a formula composes endomorphism coefficients instead of
    bracketing them; also implements the action of an End-valued form on a
    section-valued form.
    """
    if a.kind != END:
        raise ValueError("left factor must be endomorphism-valued")
    if a.rank != b.rank or a.twist != b.twist:
        raise ValueError("rank/twist mismatch")
    out = {}
    for (p1, q1), A in a.components.items():
        for (p2, q2), B in b.components.items():
            p, q = p1 + p2, q1 + q2
            if p > 1 or q > 1:
                continue
            if b.kind == END:
                term = (-1.0) ** (q1 * p2) * (A @ B)
            else:
                term = (-1.0) ** (q1 * p2) * np.einsum("...ij,...j->...i", A, B)
            if (p, q) in out:
                out[(p, q)] = out[(p, q)] + term
            else:
                out[(p, q)] = term
    return FormField(b.kind, b.rank, b.twist, out)


def star_adjoint(a: FormField, h=None, hinv=None) -> FormField:
    """Pointwise h-adjoint with bidegree flip (p,q) -> (q,p).

    The coefficient of each component is replaced by its h-adjoint and attached
    to the conjugate bidegree; the (1,1) component picks up a minus sign so
    that the operation is an involution compatible with the wedge-bracket
    ( star[a^b] = -[star a ^ star b] for 1-forms ).
    """
    if a.kind != END:
        raise ValueError("star_adjoint is defined for endomorphism-valued forms")
    if h is not None and hinv is None:
        hinv = np.linalg.inv(h)
    comps = {}
    for (p, q), A in a.components.items():
        sgn = -1.0 if (p, q) == (1, 1) else 1.0
        comps[(q, p)] = sgn * mat_star(A, h, hinv)
    return FormField(END, a.rank, a.twist, comps)


# -- snapshot i/o --------------------------------------------------------------

_MAGIC = b"HIGGSTOR"
_CMAGIC = b"FFCOMP00"


def save_field(path, field: FormField):
    """Write a field snapshot: 64-byte header + one complex64 record per component."""
    N = field.grid_size()
    kind_code = 0 if field.kind == END else 1
    twist = list(field.twist) + [0] * (8 - len(field.twist))
    if len(twist) > 8:
        raise ValueError("twist tuple too long for snapshot header")
    header = struct.pack("<8sIIIII", _MAGIC, 1, len(field.components),
                         N, field.rank, kind_code)
    header += struct.pack("<8i", *twist)
    header += b"\0" * (64 - len(header))
    with open(path, "wb") as fh:
        fh.write(header)
        for (p, q) in sorted(field.components):
            arr = np.ascontiguousarray(field.components[(p, q)].astype(np.complex64))
            fh.write(struct.pack("<8sII", _CMAGIC, p, q))
            fh.write(arr.tobytes())


def load_field(path) -> FormField:
    with open(path, "rb") as fh:
        head = fh.read(64)
        magic, _ver, ncomp, N, rank, kind_code = struct.unpack("<8sIIIII", head[:28])
        if magic != _MAGIC:
            raise ValueError("not a field snapshot")
        twist = struct.unpack("<8i", head[28:60])
        kind = END if kind_code == 0 else SECTION
        shape = (N, N, rank, rank) if kind == END else (N, N, rank)
        count = int(np.prod(shape))
        comps = {}
        for _ in range(ncomp):
            cmagic, p, q = struct.unpack("<8sII", fh.read(16))
            if cmagic != _CMAGIC:
                raise ValueError("corrupt component record")
            data = np.frombuffer(fh.read(8 * count), dtype=np.complex64)
            comps[(p, q)] = data.reshape(shape).astype(complex)
    return FormField(kind, rank, twist[:rank], comps)
