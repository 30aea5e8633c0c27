"""Joint reconstruction of the target, approximated signal and virtual signal.

Variables (all on the [0, 255] signal scale after normalization):

* ``u``  directional albedo, ``(n_x, n_y, n_z, 3)``
* ``b``  approximated measured signal, ``(M, n_t)``
* ``d``  virtual confocal signal, ``(m_y, m_z, n_t)``

Stage 1 initializes every variable by solving its own sub-problem, stage 2
sweeps ``K`` times over (b, Wiener coefficients, u, albedo dictionaries, d,
tight frame) and stage 3 reads albedo and normals off ``u``.  Patch and block
fidelity terms are measured per sample, i.e. weighted by the inverse number
of patches covering it, which is what makes every signal update an exact
pointwise closed form.
"""
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import DirectionalAlbedo, SignalSet, albedo_of, hard_threshold, normal_of
from .errors import ConvergenceWarning, NumericalError, ParameterError
from .regularizers import (PairDictionaries, TightFrame, block_match, fit_pair_dictionaries,
                           learn_tight_frame, wiener_update)
from .transport import TransportOperator, shared_pair_index, virtual_columns

SIGNAL_PEAK = 255.0
THRESHOLD_IMP = 0.01 * SIGNAL_PEAK


@dataclass
class SolverParams:
    """Every weight of the joint objective plus iteration and patch settings.

    Entries left as None are filled in by the parameter schedule: ``s_b`` and
    ``s_d`` from the 2.55 truncation rule, ``lambda_u``, ``lambda_d``,
    ``s_u`` and ``mu`` by ``auto_params`` after the first signal update,
    ``lambda_pu`` relative to the initial albedo peak and ``lambda_fd`` from
    the virtual noise level.
    """

    s_u: Optional[float] = None
    s_b: Optional[float] = None
    s_d: Optional[float] = None
    sigma_b: float = 40.0
    lambda_u: Optional[float] = None
    lambda_b: float = 1.0
    lambda_d: Optional[float] = None
    lambda_pu: Optional[float] = None
    lambda_pb: float = 16.0
    lambda_pd: float = 4.0
    lambda_sb: float = 0.25
    lambda_sd: float = 1.0
    lambda_fd: Optional[float] = None
    lambda_bd: float = 4.0
    mu: Optional[float] = None

    s_u_init: float = 1.0
    mu_init: float = 0.05
    lambda_u_imp: float = 5.0
    lambda_d_imp: float = 2.0
    threshold_imp: float = THRESHOLD_IMP
    pu_relative: float = 0.1
    virtual_noise: float = 40.0

    K: int = 2
    J: int = 20
    J_init: Optional[int] = None
    cg_tol: float = 1e-6
    cg_max_iter: int = 200
    jacobi: bool = False

    block_size: int = 4
    block_stride: int = 2
    window: int = 5
    n_neighbors: int = 8
    dict_sweeps: int = 10
    wiener_size: int = 16
    wiener_stride: int = 8
    frame_size: Tuple[int, int, int] = (4, 4, 16)
    frame_stride: Tuple[int, int, int] = (2, 2, 8)
    frame_sweeps: int = 15

    virtual_plane_depth: Optional[float] = None
    virtual_grid: Optional[object] = None
    shared_tol: float = 1e-6
    power_iterations: int = 3

    def __post_init__(self):
        for name in ("s_u", "s_b", "s_d", "sigma_b", "lambda_u", "lambda_b", "lambda_d", "lambda_pu",
                     "lambda_pb", "lambda_pd", "lambda_sb", "lambda_sd", "lambda_fd", "lambda_bd", "mu",
                     "s_u_init", "mu_init", "lambda_u_imp", "lambda_d_imp", "pu_relative", "virtual_noise"):
            val = getattr(self, name)
            if val is not None and not val >= 0:
                raise ParameterError(f"{name} must be >= 0, got {val}")
        if self.threshold_imp <= 0:
            raise ParameterError("threshold_imp must be positive")
        for name in ("K", "J", "cg_max_iter", "dict_sweeps", "frame_sweeps", "n_neighbors",
                     "block_size", "block_stride", "wiener_size", "wiener_stride"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.J_init is not None and self.J_init < 1:
            raise ParameterError("J_init must be >= 1")
        if self.mu_init <= 0:
            raise ParameterError("mu_init must be positive")
        self.frame_size = tuple(int(x) for x in self.frame_size)
        self.frame_stride = tuple(int(x) for x in self.frame_stride)

    @property
    def schedule_factor(self):
        """``1 + lambda_u_imp + lambda_d_imp (1 + lambda_pd + lambda_sd)``."""
        return 1.0 + self.lambda_u_imp + self.lambda_d_imp * (1.0 + self.lambda_pd + self.lambda_sd)

    def to_dict(self):
        out = asdict(self)
        out["frame_size"] = list(self.frame_size)
        out["frame_stride"] = list(self.frame_stride)
        if isinstance(self.virtual_grid, tuple):
            out["virtual_grid"] = list(self.virtual_grid)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if isinstance(data.get("virtual_grid"), list):
            data["virtual_grid"] = tuple(data["virtual_grid"])
        return cls(**data)


# -- parameter schedule ------------------------------------------------------------


def auto_params(params, data_residual, prior_residual, virtual_residual):
    """Fix ``lambda_u``, ``lambda_d``, ``s_u``, ``mu`` and ``s_d`` from first-iteration residuals.

    ``data_residual = ||A_b u0 - b1||^2``, ``prior_residual = ||u0 - B*(D_s C D_n^T)||^2``
    and ``virtual_residual = ||A_d u0 - d0||^2``.  ``lambda_u`` and ``lambda_d``
    are ``imp * data_residual / residual``; a zero denominator falls back to
    the bare ``imp`` value with a warning.  Entries already set in ``params``
    are kept.
    """
    def ratio(imp, denom, name):
        if denom > 0 and np.isfinite(denom):
            return imp * data_residual / denom
        warnings.warn(f"{name}: zero residual in the schedule ratio, using {imp}", ConvergenceWarning,
                      stacklevel=3)
        return imp

    lam_u = params.lambda_u if params.lambda_u is not None else ratio(
        params.lambda_u_imp, prior_residual, "lambda_u")
    lam_d = params.lambda_d if params.lambda_d is not None else ratio(
        params.lambda_d_imp, virtual_residual, "lambda_d")
    factor = params.schedule_factor
    s_u = params.s_u if params.s_u is not None else params.s_u_init * factor
    mu = params.mu if params.mu is not None else params.mu_init * factor
    s_d = params.s_d if params.s_d is not None else params.threshold_imp ** 2 * lam_d * (1.0 + params.lambda_pd)
    return replace(params, lambda_u=float(lam_u), lambda_d=float(lam_d), s_u=float(s_u), mu=float(mu),
                   s_d=float(s_d))


def signal_sparsity(params):
    """``s_b`` giving the initial truncation value ``sqrt(s_b / lambda_b) = threshold_imp``."""
    return params.s_b if params.s_b is not None else params.threshold_imp ** 2 * params.lambda_b


# -- closed-form signal updates and their objectives ---------------------------------


def _threshold_or_zero(x, s, weight):
    """``argmin_d weight ||d - x||^2 + s |d|_0``; with no data weight the sparsity term wins."""
    if weight <= 0:
        return np.zeros_like(np.asarray(x, dtype=float))
    return hard_threshold(x, np.sqrt(s / weight)) if s > 0 else np.array(x, dtype=float)


def init_b(b_meas, lambda_b, s_b):
    """``argmin_b lambda_b ||b - b_meas||^2 + s_b |b|_0``."""
    return _threshold_or_zero(b_meas, s_b, lambda_b)


def init_b_objective(b, b_meas, lambda_b, s_b):
    return float(lambda_b * np.sum((b - b_meas) ** 2) + s_b * np.count_nonzero(b))


def _shared_masks(n_b, n_d, shared):
    kb = np.array([m[0] for m in shared], dtype=np.int64)
    kd = np.array([m[1] for m in shared], dtype=np.int64)
    mask = np.zeros(n_b, dtype=bool)
    mask[kb] = True
    return kb, kd, mask


def init_d(sim_d, b, shared, lambda_d, lambda_bd, s_d, s_d_shared=None):
    """Initial virtual signal: plain truncation of ``A_d u`` off the shared pairs,
    the ``lambda_d : lambda_bd`` blend with ``b`` on them.

    ``sim_d`` and the result are ``(P, n_t)`` with virtual pairs as rows;
    ``shared`` lists ``(k_b, k_d)`` row matches.  ``s_d_shared`` (default
    ``s_d``) is the sparsity weight used on shared rows.
    """
    s_d_shared = s_d if s_d_shared is None else s_d_shared
    out = _threshold_or_zero(sim_d, s_d, lambda_d)
    if shared:
        kb, kd, _ = _shared_masks(b.shape[0], sim_d.shape[0], shared)
        blend = (lambda_d * sim_d[kd] + lambda_bd * b[kb]) / (lambda_d + lambda_bd)
        out[kd] = _threshold_or_zero(blend, s_d_shared, lambda_d + lambda_bd)
    return out


def init_d_objective(d, sim_d, b, shared, lambda_d, lambda_bd, s_d, s_d_shared=None):
    """Objective of ``init_d`` summed over rows (each row with its own sparsity weight)."""
    s_d_shared = s_d if s_d_shared is None else s_d_shared
    weights = np.full(d.shape[0], s_d)
    val = lambda_d * np.sum((sim_d - d) ** 2)
    if shared:
        kb, kd, _ = _shared_masks(b.shape[0], d.shape[0], shared)
        weights[kd] = s_d_shared
        val += lambda_bd * np.sum((b[kb] - d[kd]) ** 2)
    return float(val + np.sum(weights * np.count_nonzero(d, axis=1)))


def update_b(sim_b, b_meas, wiener, d, shared, lambda_b, lambda_pb, lambda_sb, lambda_bd, s_b):
    """Signal update: weights ``1 : lambda_b : lambda_b lambda_pb lambda_sb (: lambda_bd)``.

    ``wiener`` is ``P*(D S)``; ``d`` holds virtual rows ``(P, n_t)``.
    """
    w_f = lambda_b * lambda_pb * lambda_sb
    denom = 1.0 + lambda_b + w_f
    num = sim_b + lambda_b * b_meas + w_f * wiener
    out = _threshold_or_zero(num / denom, s_b, denom)
    if shared:
        kb, kd, _ = _shared_masks(sim_b.shape[0], d.shape[0], shared)
        denom2 = denom + lambda_bd
        out[kb] = _threshold_or_zero((num[kb] + lambda_bd * d[kd]) / denom2, s_b, denom2)
    return out


def update_b_objective(b, sim_b, b_meas, wiener, d, shared, lambda_b, lambda_pb, lambda_sb,
                       lambda_bd, s_b):
    val = (np.sum((sim_b - b) ** 2) + lambda_b * np.sum((b - b_meas) ** 2)
           + lambda_b * lambda_pb * lambda_sb * np.sum((b - wiener) ** 2) + s_b * np.count_nonzero(b))
    if shared:
        kb, kd, _ = _shared_masks(b.shape[0], d.shape[0], shared)
        val += lambda_bd * np.sum((b[kb] - d[kd]) ** 2)
    return float(val)


def update_d(sim_d, frame, b, shared, lambda_d, lambda_pd, lambda_bd, s_d):
    """Virtual signal update: blend of ``A_d u`` and ``P*(Psi Q)`` (and ``b`` on shared rows)."""
    out = _threshold_or_zero((sim_d + lambda_pd * frame) / (1.0 + lambda_pd), s_d,
                             lambda_d * (1.0 + lambda_pd))
    if shared:
        kb, kd, _ = _shared_masks(b.shape[0], sim_d.shape[0], shared)
        denom = lambda_d + lambda_d * lambda_pd + lambda_bd
        num = lambda_d * sim_d[kd] + lambda_d * lambda_pd * frame[kd] + lambda_bd * b[kb]
        out[kd] = _threshold_or_zero(num / denom, s_d, denom)
    return out


def update_d_objective(d, sim_d, frame, b, shared, lambda_d, lambda_pd, lambda_bd, s_d):
    val = (lambda_d * np.sum((sim_d - d) ** 2) + lambda_d * lambda_pd * np.sum((d - frame) ** 2)
           + s_d * np.count_nonzero(d))
    if shared:
        kb, kd, _ = _shared_masks(b.shape[0], d.shape[0], shared)
        val += lambda_bd * np.sum((b[kb] - d[kd]) ** 2)
    return float(val)


def group_shrink(w, threshold):
    """``max(0, 1 - threshold / |w|) w`` applied to each voxel's 3-vector."""
    norm = albedo_of(w)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > threshold, 1.0 - threshold / norm, 0.0)
    return w * scale[..., None]


def shrink_objective(v, w, s_u, mu):
    """``s_u ||v||_{2,1} + mu ||v - w||^2``."""
    return float(s_u * np.sum(albedo_of(v)) + mu * np.sum((v - w) ** 2))


def directional_prior(magnitude, u_ref):
    """Albedo magnitudes carried along the normals of ``u_ref`` (zero where ``u_ref`` is)."""
    return np.asarray(magnitude)[..., None] * normal_of(u_ref)


# -- conjugate gradient ----------------------------------------------------------------


@dataclass
class CGInfo:
    iterations: int
    converged: bool
    residual: float


def cg_solve(apply, rhs, x0=None, tol=1e-6, max_iter=200, diagonal=None):
    """Solve ``apply(x) = rhs`` for a symmetric PSD map by conjugate gradients.

    ``apply`` acts on arrays shaped like ``rhs``.  Stops at relative residual
    ``tol`` or after ``max_iter`` iterations.  A positive ``diagonal`` (the
    diagonal of the map, shaped like ``rhs``) switches on Jacobi
    preconditioning.  Every iteration costs exactly one application of
    ``apply`` (plus one for a nonzero ``x0``).  Returns ``(x, CGInfo)``.
    """
    b = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(b)):
        raise NumericalError("non-finite right-hand side in CG", step="cg")
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0:
        return np.zeros(b.shape), CGInfo(0, True, 0.0)

    def matvec(x):
        y = np.asarray(apply(x), dtype=float)
        if not np.all(np.isfinite(y)):
            raise NumericalError("non-finite operator output in CG", step="cg")
        return y

    inv = None
    if diagonal is not None:
        diagonal = np.asarray(diagonal, dtype=float)
        if diagonal.shape != b.shape or not np.all(np.isfinite(diagonal)) or np.any(diagonal <= 0):
            raise NumericalError("preconditioner diagonal must be positive and finite", step="cg")
        inv = 1.0 / diagonal
    if x0 is None or not np.any(x0):
        x = np.zeros(b.shape)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float)
        r = b - matvec(x)
    res = float(np.linalg.norm(r)) / bnorm
    it = 0
    z = r * inv if inv is not None else r
    p = z.copy()
    rz = float(np.vdot(r, z))
    while res > tol and it < max_iter:
        Ap = matvec(p)
        pAp = float(np.vdot(p, Ap))
        if pAp <= 0:
            break
        step = rz / pAp
        x += step * p
        r -= step * Ap
        it += 1
        res = float(np.linalg.norm(r)) / bnorm
        z = r * inv if inv is not None else r
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, CGInfo(it, res <= tol, res)


# -- scaled operators -------------------------------------------------------------------


class ScaledOperator:
    """``A / alpha`` acting on raw arrays; keeps the solver independent of physical units."""

    def __init__(self, op, alpha):
        self.op = op
        self.alpha = float(alpha)

    def forward(self, u):
        return self.op.forward(u) / self.alpha

    def adjoint(self, s):
        return self.op.adjoint(s) / self.alpha

    def gram_diagonal(self):
        return self.op.gram_diagonal() / self.alpha ** 2


def operator_norm(op, start, iterations=3):
    """Power-iteration estimate of the largest singular value of ``op``."""
    x = np.asarray(start, dtype=float)
    nrm = np.linalg.norm(x)
    if nrm == 0:
        return 1.0
    x = x / nrm
    sigma = 1.0
    for _ in range(max(1, iterations)):
        y = op.adjoint(op.forward(x))
        ny = np.linalg.norm(y)
        if ny == 0:
            return 1.0
        sigma = np.sqrt(ny)
        x = y / ny
    return float(sigma)


# -- state and diagnostics -----------------------------------------------------------------


@dataclass
class SolverState:
    u: np.ndarray
    b: np.ndarray
    d: np.ndarray
    dictionaries: Optional[PairDictionaries] = None
    wiener: Optional[object] = None
    frame: Optional[TightFrame] = None
    v: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    trace: Dict[str, List[float]] = field(default_factory=dict)

    def log(self, key, value):
        value = float(value)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite objective for {key}", step=key)
        self.trace.setdefault(key, []).append(value)


@dataclass
class Reconstruction:
    albedo: np.ndarray
    normal: np.ndarray
    u: DirectionalAlbedo
    diagnostics: dict
    state: Optional[SolverState] = None


def _check(step, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"step {step} produced NaN or Inf", step=step)


def split_bregman(apply, rhs_fixed, u_start, s_u, mu, iterations, cg_tol, cg_max_iter, cg_log=None,
                  diagonal=None):
    """Target update by split Bregman iterations.

    Minimizes the quadratic ``Q(u) = <u, H u> / 2 - <rhs_fixed, u>``-type
    energy (``apply`` is ``H`` without the ``mu`` term) plus
    ``s_u ||u||_{2,1}``, with the splitting ``v = u``.  Returns ``(v, q, u)``
    of the last sweep; ``v`` is the reconstruction.  ``diagonal`` (the
    diagonal of ``apply``) enables Jacobi-preconditioned CG.
    """
    u = np.array(u_start, dtype=float)
    q = np.zeros_like(u)
    v = u
    threshold = s_u / (2.0 * mu)
    for _ in range(iterations):
        v = group_shrink(u - q, threshold)
        rhs = rhs_fixed + mu * (v + q)
        u, info = cg_solve(lambda x: apply(x) + mu * x, rhs, x0=u, tol=cg_tol, max_iter=cg_max_iter,
                           diagonal=None if diagonal is None else diagonal + mu)
        if cg_log is not None:
            cg_log.append(info.iterations)
        if not info.converged:
            warnings.warn(f"CG stopped after {info.iterations} iterations at relative residual "
                          f"{info.residual:.2e}", ConvergenceWarning, stacklevel=2)
        q = q + v - u
    return v, q, u


def relay_plane_depth(signal):
    """Depth of the relay plane when all relay points share one depth, else 0."""
    depths = np.concatenate([signal.illum[:, 0], signal.detect[:, 0]])
    if np.all(depths == depths[0]):
        return float(depths[0])
    return 0.0


def virtual_layout(grid, spec):
    """Column indices of the virtual grid for ``spec`` (None, ``'sqrt'`` or ``(m_y, m_z)``)."""
    if spec is None:
        return None, None
    if spec == "sqrt":
        my = max(1, int(round(np.sqrt(grid.n_y))))
        mz = max(1, int(round(np.sqrt(grid.n_z))))
    else:
        my, mz = (int(x) for x in spec)
    return virtual_columns(grid.n_y, my), virtual_columns(grid.n_z, mz)


def _prior_target(dicts, matching, u_ref):
    """Directional version of ``B*(D_s C D_n^T)`` following the normals of ``u_ref``."""
    magnitude = matching.aggregate(dicts.reconstruct())
    return directional_prior(magnitude, u_ref)


def _fit_albedo_dictionaries(L, p, lambda_pu, previous=None):
    matching = block_match(L, p.block_size, p.window, p.n_neighbors, p.block_stride)
    G = matching.stacks()
    kwargs = {}
    if previous is not None and previous.D_n.shape[0] == G.shape[2]:
        kwargs = {"D_s": previous.D_s, "D_n": previous.D_n}
    dicts = fit_pair_dictionaries(G, lambda_pu, sweeps=p.dict_sweeps, **kwargs)
    return matching, dicts


def _frame(d3, sim3, p, lambda_fd, psi=None):
    if lambda_fd is None:
        # hard threshold at the virtual noise level, read on the [0, 255] scale of the blend
        peak = float(np.max(np.abs((d3 + p.lambda_sd * sim3) / (1.0 + p.lambda_sd))))
        y = p.virtual_noise * peak / SIGNAL_PEAK
        lambda_fd = y * y * (1.0 + p.lambda_sd)
    return learn_tight_frame(d3, sim3, p.lambda_sd, lambda_fd, p.frame_size, p.frame_stride,
                             p.frame_sweeps, Psi=psi)


def reconstruct(signal: SignalSet, grid, params: Optional[SolverParams] = None, keep_state=False):
    """Reconstruct directional albedo, albedo and normals from a measured SignalSet.

    Returns a Reconstruction whose ``diagnostics`` records the parameters
    actually used, objective traces per sub-problem, CG iteration counts and
    wall-clock seconds per step.
    """
    p = params or SolverParams()
    if signal.n_pairs < 1:
        raise ParameterError("need at least one measurement pair")
    _check("input", signal.histogram)
    timings = {"operator": 0.0, "stage1": {}, "stage2": []}
    t_start = time.perf_counter()
    peak = float(np.max(np.abs(signal.histogram)))
    diag = {"signal_scale": 0.0, "operator_scale": 1.0}
    zero = np.zeros(grid.shape + (3,))
    if peak == 0:
        diag.update(params=p.to_dict(), timings=timings, trace={}, note="zero input signal")
        return Reconstruction(np.zeros(grid.shape), zero.copy(), DirectionalAlbedo(grid, zero), diag)
    scale = SIGNAL_PEAK / peak
    b_meas = signal.histogram * scale

    tic = time.perf_counter()
    A_b_raw = TransportOperator.for_signal(grid, signal)
    depth = p.virtual_plane_depth if p.virtual_plane_depth is not None else relay_plane_depth(signal)
    cols_y, cols_z = virtual_layout(grid, p.virtual_grid)
    A_d_raw = TransportOperator.virtual(grid, depth, signal.n_t, signal.bin_width, signal.t0, signal.c,
                                        cols_y, cols_z)
    alpha = operator_norm(A_b_raw, A_b_raw.adjoint(b_meas), p.power_iterations)
    A_b, A_d = ScaledOperator(A_b_raw, alpha), ScaledOperator(A_d_raw, alpha)
    my, mz = A_d_raw.lattice_shape
    shared = shared_pair_index((A_b_raw.illum, A_b_raw.detect), (A_d_raw.illum, A_d_raw.detect),
                               p.shared_tol)
    shared_rows = [(kb, kd[1]) for kb, kd in shared]
    timings["operator"] = time.perf_counter() - tic
    diag.update(signal_scale=scale, operator_scale=alpha, virtual_plane_depth=depth,
                virtual_shape=[my, mz], n_shared=len(shared_rows))

    lam_d0 = p.lambda_d if p.lambda_d is not None else p.lambda_d_imp
    s_b = signal_sparsity(p)
    st = SolverState(u=zero.copy(), b=np.zeros_like(b_meas), d=np.zeros((my * mz, signal.n_t)))
    cg_counts = {"1.2": [], "2.3": []}
    t1 = timings["stage1"]

    def timed(table, key, fn):
        tic = time.perf_counter()
        out = fn()
        table[key] = table.get(key, 0.0) + time.perf_counter() - tic
        return out

    def gram_b(x):
        return A_b.adjoint(A_b.forward(x))

    diag_b = diag_d = None
    if p.jacobi:
        diag_b, diag_d = timed(timings, "preconditioner", lambda: (A_b.gram_diagonal(),
                                                                   A_d.gram_diagonal()))

    # (1.1) approximated signal
    st.b = timed(t1, "1.1", lambda: init_b(b_meas, p.lambda_b, s_b))
    st.log("1.1", init_b_objective(st.b, b_meas, p.lambda_b, s_b))
    _check("1.1", st.b)

    # (1.2) sparse initial target
    def step_1_2():
        v, q, _ = split_bregman(gram_b, A_b.adjoint(st.b), zero, p.s_u_init, p.mu_init,
                                p.J_init or p.J, p.cg_tol, p.cg_max_iter, cg_counts["1.2"], diag_b)
        return v, q
    st.u, st.q = timed(t1, "1.2", step_1_2)
    _check("1.2", st.u)
    sim_b = A_b.forward(st.u)
    st.log("1.2", np.sum((sim_b - st.b) ** 2) + p.s_u_init * np.sum(albedo_of(st.u)))

    # (1.3) albedo dictionaries
    L0 = albedo_of(st.u)
    lambda_pu = p.lambda_pu
    if lambda_pu is None:
        lambda_pu = (p.pu_relative * float(L0.max())) ** 2 if L0.max() > 0 else 1.0
    matching, st.dictionaries = timed(t1, "1.3", lambda: _fit_albedo_dictionaries(L0, p, lambda_pu))
    st.log("1.3", st.dictionaries.objective[-1])
    prior = _prior_target(st.dictionaries, matching, st.u)

    # (1.4) Wiener coefficients
    st.wiener = timed(t1, "1.4", lambda: wiener_update(b_meas, st.b, sim_b, p.lambda_sb, p.sigma_b,
                                                       p.wiener_size, p.wiener_stride))
    _check("1.4", st.wiener.S)

    # (1.5) virtual signal
    def step_1_5():
        sim = A_d.forward(st.u)
        th2 = p.threshold_imp ** 2
        return sim, init_d(sim, st.b, shared_rows, lam_d0, p.lambda_bd, th2 * lam_d0,
                           th2 * (lam_d0 + p.lambda_bd))
    sim_d, st.d = timed(t1, "1.5", step_1_5)
    _check("1.5", st.d)
    st.log("1.5", init_d_objective(st.d, sim_d, st.b, shared_rows, lam_d0, p.lambda_bd,
                                   p.threshold_imp ** 2 * lam_d0,
                                   p.threshold_imp ** 2 * (lam_d0 + p.lambda_bd)))

    # (1.6) tight frame
    shape3 = (my, mz, signal.n_t)
    st.frame = timed(t1, "1.6", lambda: _frame(st.d.reshape(shape3), sim_d.reshape(shape3), p,
                                               p.lambda_fd))
    st.log("1.6", st.frame.objective[-1])
    lambda_fd = st.frame.lambda_fd

    fixed = p
    residuals = None
    for k in range(p.K):
        t2 = {}
        timings["stage2"].append(t2)
        wiener_sig = st.wiener.signal()
        frame_sig = st.frame.signal().reshape(st.d.shape)
        sim_b_k = sim_b

        # (2.1) approximated signal
        st.b = timed(t2, "2.1", lambda: update_b(sim_b_k, b_meas, wiener_sig, st.d, shared_rows,
                                                 p.lambda_b, p.lambda_pb, p.lambda_sb, p.lambda_bd, s_b))
        _check("2.1", st.b)
        st.log("2.1", update_b_objective(st.b, sim_b_k, b_meas, wiener_sig, st.d, shared_rows, p.lambda_b,
                                         p.lambda_pb, p.lambda_sb, p.lambda_bd, s_b))

        # (2.2) Wiener coefficients (simulation from u^k)
        st.wiener = timed(t2, "2.2", lambda: wiener_update(b_meas, st.b, sim_b_k, p.lambda_sb, p.sigma_b,
                                                           p.wiener_size, p.wiener_stride))
        _check("2.2", st.wiener.S)

        if k == 0:
            residuals = (float(np.sum((sim_b - st.b) ** 2)), float(np.sum((st.u - prior) ** 2)),
                         float(np.sum((sim_d - st.d) ** 2)))
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ConvergenceWarning)
                fixed = auto_params(replace(p, lambda_pu=lambda_pu, lambda_fd=lambda_fd, s_b=s_b),
                                    *residuals)
            diag["schedule_warnings"] = [str(w.message) for w in caught]
            for w in caught:
                warnings.warn(w.message, ConvergenceWarning, stacklevel=2)

        # (2.3) target
        lam_u, lam_d, mu = fixed.lambda_u, fixed.lambda_d, fixed.mu
        c_d = lam_d * (1.0 + p.lambda_pd * p.lambda_sd)
        target_d = (lam_d * st.d + lam_d * p.lambda_pd * p.lambda_sd * frame_sig) / c_d if c_d > 0 else st.d
        u_k = st.u

        def system(x):
            out = A_b.adjoint(A_b.forward(x)) + lam_u * x
            if c_d > 0:
                out = out + c_d * A_d.adjoint(A_d.forward(x))
            return out

        def step_2_3():
            rhs = A_b.adjoint(st.b) + lam_u * prior
            if c_d > 0:
                rhs = rhs + c_d * A_d.adjoint(target_d.reshape(-1, signal.n_t))
            diag = None if diag_b is None else diag_b + lam_u + c_d * diag_d
            return split_bregman(system, rhs, u_k, fixed.s_u, mu, p.J, p.cg_tol, p.cg_max_iter,
                                 cg_counts["2.3"], diag)
        st.u, st.q, st.v = timed(t2, "2.3", step_2_3)
        _check("2.3", st.u)
        sim_b = A_b.forward(st.u)

        # (2.4) albedo dictionaries
        L = albedo_of(st.u)
        matching, st.dictionaries = timed(t2, "2.4", lambda: _fit_albedo_dictionaries(
            L, p, lambda_pu, st.dictionaries))
        st.log("2.4", st.dictionaries.objective[-1])
        prior = _prior_target(st.dictionaries, matching, st.u)

        # (2.5) virtual signal
        def step_2_5():
            sim = A_d.forward(st.u)
            return sim, update_d(sim, frame_sig, st.b, shared_rows, lam_d, p.lambda_pd, p.lambda_bd,
                                 fixed.s_d)
        sim_d, st.d = timed(t2, "2.5", step_2_5)
        _check("2.5", st.d)
        st.log("2.5", update_d_objective(st.d, sim_d, frame_sig, st.b, shared_rows, lam_d, p.lambda_pd,
                                         p.lambda_bd, fixed.s_d))

        # (2.6) tight frame
        psi = st.frame.Psi
        st.frame = timed(t2, "2.6", lambda: _frame(st.d.reshape(shape3), sim_d.reshape(shape3), p,
                                                   lambda_fd, psi))
        st.log("2.6", st.frame.objective[-1])
        total = full_objective(st, fixed, A_b, A_d, b_meas, shared_rows, matching, sim_b, sim_d, terms=True)
        st.log("total", sum(total.values()))
        diag.setdefault("objective_terms", []).append(total)

    u_out = st.u / (alpha * scale)
    albedo = albedo_of(u_out)
    normal = normal_of(u_out)
    timings["total"] = time.perf_counter() - t_start
    diag.update(params=fixed.to_dict(), trace=st.trace, timings=timings, cg_iterations=cg_counts,
                schedule_residuals=list(residuals) if residuals else None)
    return Reconstruction(albedo, normal, DirectionalAlbedo(grid, u_out), diag, st if keep_state else None)


def full_objective(st, p, A_b, A_d, b_meas, shared, matching, sim_b=None, sim_d=None, terms=False):
    """The joint objective with the current dictionaries and coefficients frozen.

    Patch and block sums are plain sums over all extracted patches.  With
    ``terms=True`` a dict of the individual terms is returned instead.
    """
    u, b, d = st.u, st.b, st.d
    sim_b = A_b.forward(u) if sim_b is None else sim_b
    sim_d = A_d.forward(u) if sim_d is None else sim_d
    L = albedo_of(u)
    t = {}
    t["data"] = np.sum((sim_b - b) ** 2)
    t["l21"] = p.s_u * np.sum(L)
    t["b_l0"] = p.s_b * np.count_nonzero(b)
    # albedo prior (blocks re-extracted from the current albedo)
    dicts = st.dictionaries
    G = matching.stacks(matching.geometry.extract(L))
    t["albedo_prior"] = p.lambda_u * (np.sum((G - dicts.reconstruct()) ** 2)
                                      + p.lambda_pu * np.count_nonzero(dicts.C))
    # signal terms
    w = st.wiener
    geom = w.geometry
    rec = w.S @ w.D.T
    # the noise penalty uses the simulated coefficients the model was fitted with
    y_sim = w.g if w.g is not None else geom.extract(sim_b) @ w.D
    with np.errstate(divide="ignore", invalid="ignore"):
        pen = np.where(w.S == 0, 0.0, (p.sigma_b * w.S / y_sim) ** 2)
    t["b_fidelity"] = p.lambda_b * np.sum((b - b_meas) ** 2)
    t["wiener_meas"] = p.lambda_b * p.lambda_pb * np.sum((geom.extract(b_meas) - rec) ** 2)
    t["wiener_noise"] = p.lambda_b * p.lambda_pb * np.sum(pen)
    t["wiener_b"] = p.lambda_b * p.lambda_pb * p.lambda_sb * np.sum((geom.extract(b) - rec) ** 2)
    # virtual terms
    f = st.frame
    fg = f.geometry
    shape3 = fg.shape
    t["virtual"] = p.lambda_d * np.sum((sim_d - d) ** 2)
    t["d_l0"] = p.s_d * np.count_nonzero(d)
    t["frame_d"] = p.lambda_d * p.lambda_pd * np.sum((f.Q - fg.extract(d.reshape(shape3)) @ f.Psi) ** 2)
    t["frame_sim"] = p.lambda_d * p.lambda_pd * p.lambda_sd * np.sum(
        (f.Q - fg.extract(sim_d.reshape(shape3)) @ f.Psi) ** 2)
    t["frame_l0"] = p.lambda_d * p.lambda_pd * p.lambda_fd * np.count_nonzero(f.Q)
    t["shared"] = 0.0
    if shared:
        kb = [m[0] for m in shared]
        kd = [m[1] for m in shared]
        t["shared"] = p.lambda_bd * np.sum((b[kb] - d[kd]) ** 2)
    t = {k: float(v) for k, v in t.items()}
    return t if terms else float(sum(t.values()))
