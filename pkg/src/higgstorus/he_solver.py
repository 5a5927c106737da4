"""Einstein-metric solver: heat flow on the bundle metric.

The flow is h <- h exp(-eps nu) with nu the (exactly self-adjoint) Einstein
density minus its topological constant.  The update is evaluated through a
Cholesky conjugation plus batched eigendecomposition, so h stays Hermitian
positive definite to machine precision at every step.  A spectral presolve
removes the conformal (trace) part of the residual, which is the stiff slow
mode of the plain flow.
"""

import numpy as np

from .fields import END, FormField
from .gauge_bundle import BundleConfig, einstein_density
from .torus_geometry import field_norm


class FlowTrace:
    """Step-by-step record of one flow run.

    `ops` is the accepted operation schedule (("p",) for a presolve,
    ("s", eps) for a flow step); replaying it through `replay_flow` on nearby
    bundle data reproduces the solve as a branch-free, hence smooth, function
    of the data.  Families rely on that smoothness for parameter derivatives.
    """

    def __init__(self, lambda_value):
        self.lambda_value = lambda_value
        self.residuals = []
        self.eps_history = []
        self.ops = []
        # last accepted step or step group; a unit that contracts every
        # linearized mode, so schedules may be padded with copies of it
        self.tail_unit = []
        self.lambda_drift = 0.0
        self.det_drift = 0.0
        self.converged = False
        self.message = ""

    @property
    def steps(self):
        return len(self.residuals)

    def summary(self):
        return {
            "steps": self.steps,
            "residual": self.residuals[-1] if self.residuals else None,
            "lambda": self.lambda_value,
            "lambda_drift": self.lambda_drift,
            "det_drift": self.det_drift,
            "converged": self.converged,
        }


def einstein_constant(b: BundleConfig) -> float:
    """Topological slope constant: 2 pi deg / (rank * volume)."""
    return 2.0 * np.pi * b.degree / (b.rank * b.grid.vol)


def _mu(b: BundleConfig, lam):
    m = einstein_density(b).copy()
    idx = np.arange(b.rank)
    m[..., idx, idx] -= lam
    return m


def measured_constant(b: BundleConfig) -> float:
    """Mean of the Einstein density; equals einstein_constant to roundoff
    because the non-background trace terms telescope to zero exactly."""
    tr = np.trace(einstein_density(b), axis1=-2, axis2=-1).real
    return float(b.grid.integrate(tr) / (b.rank * b.grid.vol))


def he_residual(b: BundleConfig, lam=None) -> float:
    """Deviation from the Einstein equation, relative to |lambda Id| when
    lambda is nonzero and absolute otherwise."""
    if lam is None:
        lam = einstein_constant(b)
    mf = FormField(END, b.rank, b.dlist, {(0, 0): _mu(b, lam)})
    num = field_norm(mf, b.grid, b.h, b.hinv())
    if lam == 0.0:
        return num
    den = abs(lam) * np.sqrt(b.rank * b.grid.vol)
    return num / den


def _flow_step(b: BundleConfig, nu, eps):
    """h <- h exp(-eps nu) for h-self-adjoint nu, exactly Hermitian PD."""
    C, Cinv = b.chol()
    Ct = np.swapaxes(C.conj(), -1, -2)
    Cinvt = np.swapaxes(Cinv.conj(), -1, -2)
    v = Ct @ nu @ Cinvt
    v = 0.5 * (v + np.swapaxes(v.conj(), -1, -2))
    w, U = np.linalg.eigh(v)
    Ut = np.swapaxes(U.conj(), -1, -2)
    E = (U * np.exp(-eps * w)[..., None, :]) @ Ut
    hn = C @ E @ Ct
    return 0.5 * (hn + np.swapaxes(hn.conj(), -1, -2))


def _presolve(b: BundleConfig, lam):
    """Newton step on the diagonal sector of the residual.

    Diagonal density entries are untwisted scalar fields whose linearized
    response to a diagonal log-metric move is the scalar Laplacian, so one
    Poisson solve per summand cancels their smooth part in a single move;
    h is rescaled symmetrically to stay Hermitian."""
    g = b.grid
    m = np.einsum("...kk->...k", _mu(b, lam)).real
    u = np.moveaxis(g.solve_scalar_poisson(np.moveaxis(m, -1, -3)), -3, -1)
    E = np.exp(0.5 * u)
    return b.h * (E[..., :, None] * E[..., None, :])


# try Chebyshev step groups from this residual on; small groups are cheap to
# reject, so entry can sit well before the strictly linear regime
CHEB_SWITCH = 0.3
CHEB_KMAX = 32
# mass of the Fourier filter that preconditions the flow; sets where the
# filter crosses over from inverting the background symbol to a plain
# rescaling of the slow modes
NEWTON_MASS = 2.0


def _newton_filter_symbol(tmpl: BundleConfig):
    """Mass-regularized inverse response symbol for the flow precondition.

    The density response of the diagonal sector at the trivial metric is a
    convolution (diagonal entries feel no twist), so one spike probe
    determines its exact DFT symbol S >= 0.  The filter 1/(NEWTON_MASS + S)
    then approximately inverts the linearized flow map: high lattice modes
    get divided by their stiff symbol, smooth modes get a bounded rescale,
    and the preconditioned spectrum collapses from a few-hundred-to-one
    range to order ten.  Built from background data only, so recording and
    replay reconstruct the identical filter without payload.
    """
    def build():
        g = tmpl.grid
        N, r = g.N, tmpl.rank
        bare = BundleConfig(g, tmpl.dlist, name="symbol-probe")
        lam = einstein_constant(bare)
        fd = 1e-4
        spike = np.zeros((N, N, r, r), dtype=complex)
        spike[0, 0, 0, 0] = 1.0
        cols = []
        for s in (fd, -fd):
            hp = bare.h @ _expm_series(s * spike)
            hp = 0.5 * (hp + _mat_adj(hp))
            bp = BundleConfig(g, tmpl.dlist, h=hp, name="symbol-probe")
            cols.append(_mu(bp, lam)[..., 0, 0])
        col = (cols[0] - cols[1]).real / (2.0 * fd)
        S = np.fft.fft2(col).real
        # symmetrize k <-> -k so the filter kernel maps Hermitian matrix
        # fields to Hermitian matrix fields
        S = 0.5 * (S + np.roll(S[::-1, ::-1], 1, axis=(0, 1)))
        return 1.0 / (NEWTON_MASS + np.clip(S, 0.0, None))
    return tmpl.cached("newton_filter", build)


def _newton_filter(mu, filt):
    """Entrywise Fourier filter of a matrix field; batch axes lead."""
    mhat = np.fft.fft2(mu, axes=(-4, -3))
    return np.fft.ifft2(filt[..., None, None] * mhat, axes=(-4, -3))


def _chol_small(h):
    """Batched Cholesky factor and its inverse; closed form for ranks one
    and two so the replay path stays explicit arithmetic."""
    r = h.shape[-1]
    if r == 1:
        C = np.sqrt(h.real).astype(complex)
        return C, 1.0 / C
    if r == 2:
        a = np.sqrt(h[..., 0, 0].real).astype(complex)
        b10 = h[..., 1, 0] / a
        d = np.sqrt((h[..., 1, 1].real - np.abs(b10) ** 2)).astype(complex)
        C = np.zeros_like(h)
        C[..., 0, 0] = a
        C[..., 1, 0] = b10
        C[..., 1, 1] = d
        Ci = np.zeros_like(h)
        Ci[..., 0, 0] = 1.0 / a
        Ci[..., 1, 0] = -b10 / (a * d)
        Ci[..., 1, 1] = 1.0 / d
        return C, Ci
    C = np.linalg.cholesky(h)
    return C, np.linalg.inv(C)


def _filtered_direction(h, mu, filt):
    """Fourier filter of the residual, taken in the flat Cholesky frame of h.

    Filtering there keeps the direction self-adjoint for h, which makes the
    preconditioned linearization symmetric positive in the same metric that
    grades the residual: every small enough step then strictly decreases it,
    and Chebyshev step groups meet their design contraction.  Filtering in
    plain coordinates instead loses that (the operator turns non-normal and
    its numerical range touches zero, stalling the monotone acceptance)."""
    C, Cinv = _chol_small(h)
    Ct, Cinvt = _mat_adj(C), _mat_adj(Cinv)
    v = Ct @ mu @ Cinvt
    v = 0.5 * (v + _mat_adj(v))
    v = _newton_filter(v, filt)
    v = 0.5 * (v + _mat_adj(v))
    return Cinvt @ v @ Ct


def _cheb_group(tau0, K):
    """Damped-Chebyshev stage sizes for one step group.

    The composite amplification over the group is a shifted Chebyshev
    polynomial bounded by one on [0, 4/tau0], twice the interval the plain
    step of size tau0 is stable on.  The factor-two headroom matters: a
    Chebyshev product of large K amplifies spectrum past its design edge
    violently, and recorded schedules are replayed at nearby fibers whose
    top eigenvalue differs a little from the recording fiber's.  Inside the
    interval the group is a contraction everywhere while advancing the slow
    modes by ~K^2 tau0 / 2.5.  Stages are ordered large/small interleaved
    to keep the transient inside the group low.
    """
    w0 = 1.0 + 2.0 / (13.0 * K * K)
    c = (w0 + 1.0) * tau0 / 4.0
    j = np.arange(1, K + 1)
    taus = c / (w0 - np.cos((2 * j - 1) * np.pi / (2 * K)))
    taus = np.sort(taus)[::-1]
    order = []
    lo, hi = 0, K - 1
    while lo <= hi:
        order.append(taus[lo])
        if lo != hi:
            order.append(taus[hi])
        lo += 1
        hi -= 1
    return [float(t) for t in order]


def _batched_mu(cur: BundleConfig, lam, H):
    """Density residual for a batch of metrics H sharing cur's other data."""
    central = _phi_is_central(cur.phi, cur.rank)
    mu = _density_arrays(cur, cur.a01, _mat_adj(cur.a01),
                         cur.dz_bg(cur.a01, END), cur.phi,
                         None if central else _mat_adj(cur.phi),
                         H, _inv_small(H), central)
    idx = np.arange(cur.rank)
    mu[..., idx, idx] -= lam
    return mu


def _gmax_estimate(cur: BundleConfig, lam, filt, iters=14, fd=1e-5):
    """Top eigenvalue of the preconditioned linearization, by power
    iteration with finite-difference responses around the current metric.

    Chebyshev step groups are designed against this number, so it has to
    reflect the true local operator rather than a background proxy: the
    group polynomial amplifies spectrum past its design edge violently,
    and a misjudged edge turns every large group into a rejected trial.
    """
    N, r = cur.grid.N, cur.rank
    C, Cinv = _chol_small(cur.h)
    Ct, Cinvt = _mat_adj(C), _mat_adj(Cinv)
    mu0 = _mu(cur, lam)
    rng = np.random.default_rng(5)
    v = rng.standard_normal((N, N, r, r)) + 1j * rng.standard_normal((N, N, r, r))
    v = 0.5 * (v + _mat_adj(v))
    v = v / np.sqrt(np.sum(np.abs(v) ** 2))
    lam_top = 1.0
    for _ in range(iters):
        u = Cinvt @ v @ Ct
        H = cur.h @ _expm_series(-fd * u)
        H = 0.5 * (H + _mat_adj(H))
        d = (_batched_mu(cur, lam, H) - mu0) / (-fd)
        w = Ct @ d @ Cinvt
        w = _newton_filter(0.5 * (w + _mat_adj(w)), filt)
        w = 0.5 * (w + _mat_adj(w))
        lam_top = float(np.sqrt(np.sum(np.abs(w) ** 2)))
        if not np.isfinite(lam_top) or lam_top == 0.0:
            return None
        v = w / lam_top
    return lam_top


def donaldson_flow(b: BundleConfig, tol=1e-10, max_steps=20000,
                   presolve=True, eps=None):
    """Flow the bundle metric to the Einstein solution.

    Returns (solved BundleConfig, FlowTrace).  The slope constant is computed
    from topology and is an exact invariant of the discrete flow; its measured
    drift is recorded in the trace.
    """
    lam = einstein_constant(b)
    trace = FlowTrace(lam)
    filt = _newton_filter_symbol(b)
    # Steps move along the filtered residual, so eps is measured against the
    # preconditioned spectrum (order one to a few).  The cap stays well below
    # the stability edge so every accepted step size contracts every
    # linearized mode: recorded schedules are replayed at nearby fibers (and
    # padded with copies of their last step), which is only safe when no
    # step can amplify anything.
    eps0 = 0.2 if eps is None else eps
    eps_cap = 0.5 if eps is None else eps
    step_eps = eps0
    cur = b
    logdet0 = np.linalg.slogdet(b.h)[1]
    res = he_residual(cur, lam)
    streak = 0
    gtau = None
    kcap = None
    for it in range(max_steps):
        trace.residuals.append(res)
        trace.lambda_drift = max(trace.lambda_drift,
                                 abs(measured_constant(cur) - lam))
        if res <= tol:
            trace.converged = True
            break
        if len(trace.ops) >= max_steps:
            trace.message = "max_steps reached"
            break
        if presolve and (it % 15 == 0) and res > 100.0 * tol:
            cand = BundleConfig(cur.grid, cur.dlist, a01=cur.a01, h=_presolve(cur, lam),
                                phi=cur.phi, name=cur.name)
            cres = he_residual(cand, lam)
            if cres < res:
                cur, res = cand, cres
                trace.residuals[-1] = res
                trace.ops.append(("p",))
        if gtau is None and res < CHEB_SWITCH:
            # size step groups against the measured top of the local
            # preconditioned spectrum, with a factor-two edge margin; the
            # adaptive plain eps tracks acceptance, not the spectral edge,
            # and groups designed from it reject systematically
            gm = _gmax_estimate(cur, lam, filt)
            gtau = 2.0 / gm if gm else step_eps
        K = _k_ladder(res) if gtau is not None else 1
        if kcap is not None:
            if res < 0.25 * kcap[1]:
                kcap = None
            else:
                K = min(K, kcap[0])
        accepted = None
        for _ in range(24):
            if K > 1:
                taus = _cheb_group(gtau, K)
                # freeze the filter frame over the group: the polynomial's
                # stage-to-stage cancellation assumes one fixed operator,
                # and rebuilding the frame from the moving metric at every
                # stage breaks it for large groups
                C0, Ci0 = _chol_small(cur.h)
                C0t, Ci0t = _mat_adj(C0), _mat_adj(Ci0)
            else:
                taus = [step_eps]
            cand = cur
            for t in taus:
                try:
                    if K > 1:
                        v = C0t @ _mu(cand, lam) @ Ci0t
                        v = _newton_filter(0.5 * (v + _mat_adj(v)), filt)
                        nu = Ci0t @ (0.5 * (v + _mat_adj(v))) @ C0t
                    else:
                        nu = _filtered_direction(cand.h, _mu(cand, lam), filt)
                    hn = _flow_step(cand, nu, t)
                except np.linalg.LinAlgError:
                    cand = None
                    break
                if not np.isfinite(hn).all():
                    cand = None
                    break
                cand = BundleConfig(cur.grid, cur.dlist, a01=cur.a01, h=hn,
                                    phi=cur.phi, name=cur.name)
            try:
                cres = (he_residual(cand, lam) if cand is not None
                        else np.inf)
            except np.linalg.LinAlgError:
                cres = np.inf
            if cres <= res * (1.0 + 1e-12) or cres <= tol:
                accepted = taus
                break
            if K > 1:
                K = max(K // 2, 1)
                kcap = (K, res)
            else:
                step_eps *= 0.5
                streak = 0
        if accepted is None:
            # no step size reduces the residual: numerical floor of the
            # discrete flow; report what was reached
            trace.message = "residual floor reached"
            break
        if len(accepted) > 1:
            op = ("g",) + tuple(float(t) for t in accepted)
        else:
            op = ("s", float(accepted[0]))
        trace.ops.append(op)
        trace.eps_history.extend(accepted)
        trace.tail_unit = [op]
        cur, res = cand, cres
        if len(accepted) == 1:
            streak += 1
            if streak >= 5 and step_eps < eps_cap:
                step_eps = min(step_eps * 1.3, eps_cap)
                streak = 0
    else:
        trace.message = "max_steps reached"
    if trace.converged is False and res <= tol:
        trace.converged = True
    trace.det_drift = float(np.abs(np.linalg.slogdet(cur.h)[1] - logdet0).max())
    return cur, trace


def check_simple(b: BundleConfig):
    """(is_simple, dim of smooth degree-0 endomorphism kernel)."""
    from .hodge_engine import harmonic_basis
    hb = harmonic_basis(b, END, 0)
    return hb.dim == 1, hb.dim


# -- schedule replay ----------------------------------------------------------
#
# Replaying a recorded op schedule evaluates the solved metric as a fixed,
# branch-free composition of analytic maps of the bundle data.  That makes
# h(s) a smooth function of family parameters: any residual-dependent
# stopping rule or line search would inject tolerance-scale jitter which
# outer finite differences amplify by 1/step^2.  All replay arithmetic
# accepts leading batch axes, so a whole stencil of fibers runs in one pass.


def _inv_small(M):
    """Batched inverse; closed form for 1x1 and 2x2 blocks (the common ranks),
    avoiding the per-matrix LAPACK dispatch cost on large batches."""
    r = M.shape[-1]
    if r == 1:
        return 1.0 / M
    if r == 2:
        a = M[..., 0, 0]
        b = M[..., 0, 1]
        c = M[..., 1, 0]
        d = M[..., 1, 1]
        det = a * d - b * c
        out = np.empty_like(M)
        out[..., 0, 0] = d
        out[..., 0, 1] = -b
        out[..., 1, 0] = -c
        out[..., 1, 1] = a
        return out / det[..., None, None]
    return np.linalg.inv(M)


def _expm_series(A):
    """Branch-free batched matrix exponential: fixed 2^-6 scaling plus an
    8-term Taylor polynomial, then six squarings.  Accurate to roundoff for
    ||A|| up to about 2, which flow steps never exceed."""
    B = A / 64.0
    eye = np.zeros_like(A)
    idx = np.arange(A.shape[-1])
    eye[..., idx, idx] = 1.0
    T = eye + B / 8.0
    for k in range(7, 0, -1):
        T = eye + (B @ T) / k
    for _ in range(6):
        T = T @ T
    return T


def _mat_adj(M):
    return np.conj(np.swapaxes(M, -1, -2))


def _phi_is_central(phi, r):
    """True when phi is exactly a scalar multiple of the identity at every
    point (bitwise test).  The Higgs commutator then vanishes identically
    and can be skipped in the density: fused multiply-add kernels make
    c*X and X*c differ at ulp level for complex c, so computing the
    commutator numerically would leak parameter-dependent rounding into
    an otherwise parameter-independent metric."""
    tr = np.einsum("...ii->...", phi) / r
    dev = phi - tr[..., None, None] * np.eye(r)
    return not np.abs(dev).any()


def _density_arrays(tmpl, a01, a01_adj, dzc_a01, phi, phi_adj, h, hinv,
                    central):
    """Einstein density for (possibly batched) data arrays, using the
    template bundle only for grid constants and background phases.  The
    h-independent pieces (adjoints, centered derivative of a01) are passed
    in precomputed; this runs once per replayed op."""
    a01s = hinv @ a01_adj @ h
    bF = hinv @ tmpl.dzf_bg(h, END) - a01s
    bB = hinv @ tmpl.dzb_bg(h, END) - a01s
    bA = 0.5 * (bF + bB)
    R = (tmpl.background_curvature()
         + dzc_a01
         - 0.5 * (tmpl.dzbarb_bg(bF, END) + tmpl.dzbarf_bg(bB, END))
         + bA @ a01 - a01 @ bA)
    R = 0.5 * (R + hinv @ _mat_adj(R) @ h)
    if central:
        return tmpl.grid.gamma * R
    phis = hinv @ phi_adj @ h
    # the Higgs commutator is grouped separately so its rounding cannot
    # fold into the curvature sum
    return tmpl.grid.gamma * (R + (phi @ phis - phis @ phi))


def _exp_field(u):
    """exp of a real scalar field by scaling + Taylor + squaring.

    Replay must be built from plain arithmetic only: library exp kernels
    round differently between vectorized and scalar tail paths, so their
    output depends on array layout, and a thousand replay steps turn that
    into fiber-to-fiber jitter that outer finite differences amplify.
    """
    B = u / 64.0
    T = 1.0 + B / 8.0
    for k in range(7, 0, -1):
        T = 1.0 + (B * T) / k
    for _ in range(6):
        T = T * T
    return T


def replay_flow(tmpl: BundleConfig, a01, phi, h0, ops):
    """Apply a recorded flow schedule to bundle data; returns the metric.

    a01, phi, h0 may carry leading batch axes (broadcast against each other).
    The schedule ops come from a FlowTrace recorded on nearby data.
    """
    g = tmpl.grid
    lam = einstein_constant(tmpl)
    r = tmpl.rank
    idx = np.arange(r)
    shape = np.broadcast_shapes(np.shape(a01), np.shape(phi), np.shape(h0))
    h = np.array(np.broadcast_to(h0, shape), dtype=complex)
    central = _phi_is_central(phi, r)
    a01_adj = _mat_adj(a01)
    phi_adj = None if central else _mat_adj(phi)
    dzc_a01 = tmpl.dz_bg(a01, END)
    filt = _newton_filter_symbol(tmpl)
    for op in ops:
        hinv = _inv_small(h)
        mu = _density_arrays(tmpl, a01, a01_adj, dzc_a01, phi, phi_adj,
                             h, hinv, central)
        mu[..., idx, idx] -= lam
        if op[0] == "p":
            m = np.einsum("...ii->...i", mu).real
            u = np.moveaxis(g.solve_scalar_poisson(np.moveaxis(m, -1, -3)),
                            -3, -1)
            E = _exp_field(0.5 * u)
            h = h * (E[..., :, None] * E[..., None, :])
        else:
            h = h @ _expm_series(-op[1] * _filtered_direction(h, mu, filt))
            h = 0.5 * (h + _mat_adj(h))
    return h
