"""Flat-torus base geometry: grid, Kahler constants, stencils, inner products.

The base is C/(Z + tau Z) with Kahler form omega = scale * (i/2) dz ^ dzbar,
sampled on an N x N periodic lattice z = (a + tau b)/N, 0 <= a,b < N (axis 0
is the x index, axis 1 the y index).  Derivatives are second-order centered
differences; their DFT symbols are exposed so constant-coefficient solves can
invert the discrete operators exactly.

With even N the centered difference annihilates the four Nyquist checkerboard
modes, which pollutes kernel dimensions; shipped configurations therefore use
odd N (17/33/49).  Even N is accepted but flagged via `has_null_doublers`.
"""

from __future__ import annotations

import numpy as np

from .fields import SECTION, FormField, mat_adjoint


class TorusGrid:
    """Discretized flat torus with cached metric constants."""

    def __init__(self, N: int, tau: complex, scale: float = 1.0):
        N = int(N)
        tau = complex(tau)
        if N < 8:
            raise ValueError(f"grid size N={N} too small (need N >= 8)")
        if tau.imag <= 0:
            raise ValueError("tau must lie in the upper half plane")
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.N = N
        self.tau = tau
        self.scale = float(scale)
        self.imtau = tau.imag
        self.g = 0.5 * self.scale          # g_{z zbar}
        self.gamma = 2.0 / self.scale      # g^{zbar z}
        self.vol = self.scale * self.imtau
        self.weight = self.vol / N ** 2    # quadrature weight per site

        it = self.imtau
        # d/dz = czx d/dx + czy d/dy,  d/dzbar = cbx d/dx + cby d/dy
        self.czx = 1j * np.conj(tau) / (2 * it)
        self.czy = -1j / (2 * it)
        self.cbx = -1j * tau / (2 * it)
        self.cby = 1j / (2 * it)

        idx = np.arange(N)
        self.x, self.y = np.meshgrid(idx / N, idx / N, indexing="ij")
        self.z = self.x + tau * self.y

        # DFT symbols of the centered differences (1j * N * sin(2 pi k / N))
        s = 1j * N * np.sin(2 * np.pi * idx / N)
        self.symbol_x = s[:, None]
        self.symbol_y = s[None, :]
        self.has_null_doublers = (N % 2 == 0)

    # -- plain (untwisted) stencils -------------------------------------------

    def diff_x(self, f):
        return 0.5 * self.N * (np.roll(f, -1, axis=0) - np.roll(f, 1, axis=0))

    def diff_y(self, f):
        return 0.5 * self.N * (np.roll(f, -1, axis=1) - np.roll(f, 1, axis=1))

    def dz(self, f):
        return self.czx * self.diff_x(f) + self.czy * self.diff_y(f)

    def dzbar(self, f):
        return self.cbx * self.diff_x(f) + self.cby * self.diff_y(f)

    def integrate(self, f):
        """Quadrature of a pointwise density against the volume form."""
        return self.weight * np.sum(f, axis=(0, 1))

    def laplace_symbol(self):
        """DFT symbol of the scalar operator gamma * dz dzbar (complex array)."""
        sz = self.czx * self.symbol_x + self.czy * self.symbol_y
        sb = self.cbx * self.symbol_x + self.cby * self.symbol_y
        return self.gamma * sz * sb

    def solve_scalar_poisson(self, rho):
        """Solve gamma * dz dzbar psi = rho for a real mean-zero source.

        Inverts the exact DFT symbol of the discrete operator; the zero mode
        of rho is dropped (solvability) and psi has zero mean.  Leading batch
        axes on rho are allowed (the grid axes are the trailing two).
        """
        sym = self.laplace_symbol()
        rhat = np.fft.fft2(rho)
        with np.errstate(divide="ignore", invalid="ignore"):
            phat = np.where(np.abs(sym) > 1e-14, rhat / sym, 0.0)
        phat[..., 0, 0] = 0.0
        psi = np.fft.ifft2(phat)
        return psi.real if np.isrealobj(rho) else psi


def build_torus(N: int, tau: complex, scale: float = 1.0) -> TorusGrid:
    return TorusGrid(N, tau, scale)


# -- global pairings ----------------------------------------------------------

def _pointwise_pair(a, b, kind, h, hinv):
    """Pointwise Hermitian pairing <a, b> (conjugate-linear in b)."""
    if kind == SECTION:
        if h is None:
            return np.einsum("...j,...j->...", a, np.conj(b))
        return np.einsum("...j,...jk,...k->...", np.conj(b), h, a)
    # endomorphisms: Tr(a h^{-1} b^dagger h) = Tr(a b^{*h})
    if h is None:
        return np.einsum("...ij,...ij->...", a, np.conj(b))
    bstar = hinv @ mat_adjoint(b) @ h
    return np.einsum("...ij,...ji->...", a, bstar)


def global_inner_product(a: FormField, b: FormField, grid: TorusGrid,
                         h=None, hinv=None):
    """L2 inner product sum_{p,q} gamma^{p+q} integral <a^{pq}, b^{pq}>.

    Conjugate-linear in the second argument.  For endomorphism coefficients a
    metric h is required unless the metric is the identity.
    """
    if a.kind != b.kind or a.rank != b.rank or a.twist != b.twist:
        raise ValueError("field kind/rank/twist mismatch")
    if h is not None and hinv is None:
        hinv = np.linalg.inv(h)
    total = 0.0 + 0.0j
    for pq in set(a.components) & set(b.components):
        p, q = pq
        dens = _pointwise_pair(a.components[pq], b.components[pq], a.kind, h, hinv)
        total += grid.gamma ** (p + q) * grid.integrate(dens)
    return complex(total)


def field_norm(a: FormField, grid: TorusGrid, h=None, hinv=None) -> float:
    return float(np.sqrt(max(global_inner_product(a, a, grid, h, hinv).real, 0.0)))


def lambda_contract(f: FormField, grid: TorusGrid) -> FormField:
    """Contraction against the Kahler form: (1,1) -> (0,0), f11 -> -i gamma f11.

    Normalized so that the contraction of omega * Id is Id on a curve.
    """
    for (p, q) in f.components:
        if (p, q) != (1, 1):
            raise ValueError(f"lambda_contract expects a (1,1) field, found {(p, q)}")
    f11 = f.get(1, 1)
    if f11 is None:
        raise ValueError("lambda_contract: missing (1,1) component")
    return FormField(f.kind, f.rank, f.twist, {(0, 0): -1j * grid.gamma * f11})
