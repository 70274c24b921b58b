"""ARZ macroscopic lane model: exact Riemann solver, Godunov step, gradients.

State per cell is ``q = (rho, y)`` with ``y = rho * (u - u_eq(rho))`` and
``u_eq(rho) = u_max * (1 - rho**gamma)``. The interface state of every
Riemann problem is classified into one of the cases below; the analytical
derivatives of that state with respect to both neighbours (and to
``u_max``) are what the backward pass composes.

Everything operating on arrays is vectorized over interfaces. The scalar
functions (``solve_riemann``, ``riemann_gradients``, ...) are thin wrappers
kept for clarity and for tests.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    EPS_RHO,
    BoundaryKind,
    CellState,
    CflViolation,
    MacroLaneState,
    SolverConfig,
)


class RiemannCase(enum.IntEnum):
    CASE0 = 0
    CASE1_LEFT = 1
    CASE1_MID = 2
    CASE2_LEFT = 3
    CASE2_MID = 4
    CASE2_RAREFACTION = 5
    CASE3_LEFT = 6
    CASE3_RAREFACTION = 7
    CASE4_VACUUM = 8


_LEFT_CASES = (RiemannCase.CASE0, RiemannCase.CASE1_LEFT, RiemannCase.CASE2_LEFT, RiemannCase.CASE3_LEFT)
_MID_CASES = (RiemannCase.CASE1_MID, RiemannCase.CASE2_MID)
_FAN_CASES = (RiemannCase.CASE2_RAREFACTION, RiemannCase.CASE3_RAREFACTION)


# -- constitutive relations -------------------------------------------------


def u_eq(rho, u_max, gamma):
    """Equilibrium ("comfortable") velocity ``u_max * (1 - rho**gamma)``."""
    rho_a = np.asarray(rho, dtype=float)
    if np.any(rho_a < 0):
        raise ValueError("density must be non-negative")
    out = u_max * (1.0 - rho_a**gamma)
    return float(out) if out.ndim == 0 else out


def u_eq_prime(rho, u_max, gamma):
    return -u_max * gamma * np.asarray(rho, dtype=float) ** (gamma - 1.0)


def velocity_from_state(q, u_max, gamma, eps_rho=EPS_RHO):
    """Invert the relative-flow relation. Returns ``(u, is_vacuum)``.

    Vacuum cells (``rho <= eps_rho``) report ``u_max``.
    """
    rho, y = float(q[0]), float(q[1])
    if rho <= eps_rho:
        return float(u_max), True
    return y / rho + u_max * (1.0 - rho**gamma), False


def velocities(rho, y, u_max, gamma, eps_rho=EPS_RHO):
    """Vectorized ``velocity_from_state``; vacuum cells get ``u_max``."""
    vac = rho <= eps_rho
    rs = np.where(vac, 1.0, rho)
    return np.where(vac, u_max, y / rs + u_max * (1.0 - rs**gamma))


def velocity_gradient(rho, y, u_max, gamma, eps_rho=EPS_RHO):
    """``(du/drho, du/dy, du/du_max)`` elementwise; zero in vacuum (except u_max)."""
    rho = np.asarray(rho, dtype=float)
    y = np.asarray(y, dtype=float)
    vac = rho <= eps_rho
    rs = np.where(vac, 1.0, rho)
    rg = rs**gamma
    du_drho = np.where(vac, 0.0, -y / rs**2 - u_max * gamma * rg / rs)
    du_dy = np.where(vac, 0.0, 1.0 / rs)
    du_du = np.where(vac, 1.0, 1.0 - rg)
    return du_drho, du_dy, du_du


def flux(q, u_max, gamma, eps_rho=EPS_RHO) -> np.ndarray:
    """Physical flux ``(rho*u, y*u)``; zero in vacuum."""
    u, vac = velocity_from_state(q, u_max, gamma, eps_rho)
    if vac:
        return np.zeros(2)
    return np.array([q[0] * u, q[1] * u])


def flux_jacobian(q, u_max, gamma, eps_rho=EPS_RHO) -> np.ndarray:
    rho, y = float(q[0]), float(q[1])
    if rho <= eps_rho:
        raise ValueError("flux Jacobian is undefined in vacuum")
    return _flux_jac(np.array([rho]), np.array([y]), u_max, gamma, eps_rho)[0]


def _flux_jac(rho, y, u_max, gamma, eps_rho):
    """Batched flux Jacobian, shape (n, 2, 2); zero blocks at vacuum."""
    vac = rho <= eps_rho
    rs = np.where(vac, 1.0, rho)
    rg = rs**gamma
    ue = u_max * (1.0 - rg)
    uep = -u_max * gamma * rg / rs
    J = np.empty(rho.shape + (2, 2))
    J[:, 0, 0] = ue + rs * uep
    J[:, 0, 1] = 1.0
    J[:, 1, 0] = y * uep - y**2 / rs**2
    J[:, 1, 1] = 2.0 * y / rs + ue
    J[vac] = 0.0
    return J


def _flux_batch(rho, y, u_max, gamma, eps_rho):
    u = velocities(rho, y, u_max, gamma, eps_rho)
    vac = rho <= eps_rho
    return np.where(vac, 0.0, rho * u), np.where(vac, 0.0, y * u)


# -- Riemann problem ---------------------------------------------------------


@dataclass
class RiemannBatch:
    """Interface solutions for a vector of Riemann problems."""

    rho_l: np.ndarray
    y_l: np.ndarray
    rho_r: np.ndarray
    y_r: np.ndarray
    rho0: np.ndarray
    y0: np.ndarray
    case: np.ndarray
    right_vacuum: np.ndarray
    u_l: np.ndarray
    u_r: np.ndarray
    lambda_s: np.ndarray
    lambda_0l: np.ndarray
    lambda_0m: np.ndarray
    rho_m: np.ndarray
    y_m: np.ndarray
    rho_t: np.ndarray
    y_t: np.ndarray


def _safe_pow(base, expo):
    return np.where(base > 0, np.abs(base) ** expo, 0.0)


def riemann_batch(rho_l, y_l, rho_r, y_r, u_max, gamma, eps_rho=EPS_RHO) -> RiemannBatch:
    """Solve the ARZ Riemann problem at every interface.

    Cases are tested in the order 0, 4, 5, 1, 3, 2 so that exactly one
    applies. Case 5 (vacuum on the right) reuses the Case 3 branches and is
    flagged in ``right_vacuum``.
    """
    rho_l = np.asarray(rho_l, dtype=float)
    y_l = np.asarray(y_l, dtype=float)
    rho_r = np.asarray(rho_r, dtype=float)
    y_r = np.asarray(y_r, dtype=float)
    g = gamma
    U = u_max
    vac_l = rho_l <= eps_rho
    vac_r = rho_r <= eps_rho
    u_l = velocities(rho_l, y_l, U, g, eps_rho)
    u_r = velocities(rho_r, y_r, U, g, eps_rho)

    rlg = np.where(vac_l, 0.0, np.where(vac_l, 1.0, rho_l) ** g)
    both = vac_l & vac_r
    c0 = ~both & (u_l == u_r)
    c4 = ~both & ~c0 & vac_l
    c5 = ~both & ~c0 & ~vac_l & vac_r
    rest = ~(both | c0 | c4 | c5)
    c1 = rest & (u_l > u_r)
    c3 = rest & ~c1 & (u_l <= u_r - U * rlg)
    c2 = rest & ~c1 & ~c3

    # intermediate state q_m on the 1-wave through q_l with u_m = u_r
    B = rlg + (u_l - u_r) / U
    rho_m = _safe_pow(B, 1.0 / g)
    y_m = rho_m * (u_r - U * (1.0 - rho_m**g))
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_s = (rho_m * u_r - rho_l * u_l) / (rho_m - rho_l)
    lam_0l = u_l - U * g * rlg
    lam_0m = u_r - U * g * rlg + g * (u_r - u_l)

    # sonic point of the 1-rarefaction from q_l
    W = u_l + U * rlg
    A = W / ((g + 1.0) * U)
    rho_t = _safe_pow(A, 1.0 / g)
    u_t = g / (g + 1.0) * W
    y_t = rho_t * (u_t - U * (1.0 - rho_t**g))

    case = np.full(rho_l.shape, RiemannCase.CASE4_VACUUM, dtype=np.int8)
    case[c0] = RiemannCase.CASE0
    c1l = c1 & ((lam_s >= 0) | (rho_m == rho_l))  # degenerate shock: both sides equal
    case[c1l] = RiemannCase.CASE1_LEFT
    case[c1 & ~c1l] = RiemannCase.CASE1_MID
    c35 = c3 | c5
    c3l = c35 & (lam_0l >= 0)
    case[c3l] = RiemannCase.CASE3_LEFT
    case[c35 & ~c3l] = RiemannCase.CASE3_RAREFACTION
    c2l = c2 & (lam_0l >= 0)
    c2m = c2 & ~c2l & (lam_0m <= 0)
    case[c2l] = RiemannCase.CASE2_LEFT
    case[c2m] = RiemannCase.CASE2_MID
    case[c2 & ~c2l & ~c2m] = RiemannCase.CASE2_RAREFACTION

    left = (case == 0) | (case == 1) | (case == 3) | (case == 6)
    mid = (case == 2) | (case == 4)
    fan = (case == 5) | (case == 7)
    rho0 = np.where(left, rho_l, np.where(mid, rho_m, np.where(fan, rho_t, 0.0)))
    y0 = np.where(left, y_l, np.where(mid, y_m, np.where(fan, y_t, 0.0)))
    return RiemannBatch(
        rho_l, y_l, rho_r, y_r, rho0, y0, case, c5, u_l, u_r, lam_s, lam_0l, lam_0m, rho_m, y_m, rho_t, y_t
    )


@dataclass(frozen=True)
class RiemannSolution:
    q0: CellState
    case_tag: RiemannCase
    q_m: Optional[CellState] = None
    q_tilde0: Optional[CellState] = None
    lambda_s: Optional[float] = None
    lambda_0l: Optional[float] = None
    lambda_0m: Optional[float] = None
    right_vacuum: bool = False

    @property
    def is_case5(self) -> bool:
        return self.right_vacuum


@dataclass(frozen=True)
class RiemannGradients:
    d_q0_d_ql: np.ndarray
    d_q0_d_qr: np.ndarray
    d_q0_d_umax: np.ndarray
    vacuum: bool = False


def solve_riemann(q_l, q_r, u_max, gamma, eps_rho=EPS_RHO) -> RiemannSolution:
    vals = (float(q_l[0]), float(q_l[1]), float(q_r[0]), float(q_r[1]))
    if not all(np.isfinite(vals)):
        raise ValueError("non-finite Riemann input")
    b = riemann_batch(*(np.array([v]) for v in vals), u_max, gamma, eps_rho)
    case = RiemannCase(int(b.case[0]))
    has_m = case in (RiemannCase.CASE1_LEFT, RiemannCase.CASE1_MID, RiemannCase.CASE2_LEFT,
                     RiemannCase.CASE2_MID, RiemannCase.CASE2_RAREFACTION)
    has_t = case in (RiemannCase.CASE2_RAREFACTION, RiemannCase.CASE3_RAREFACTION)
    in_1 = case in (RiemannCase.CASE1_LEFT, RiemannCase.CASE1_MID)
    in_23 = case in (RiemannCase.CASE2_LEFT, RiemannCase.CASE2_MID, RiemannCase.CASE2_RAREFACTION,
                     RiemannCase.CASE3_LEFT, RiemannCase.CASE3_RAREFACTION)
    in_2 = case in (RiemannCase.CASE2_LEFT, RiemannCase.CASE2_MID, RiemannCase.CASE2_RAREFACTION)
    return RiemannSolution(
        q0=CellState(b.rho0[0], b.y0[0]),
        case_tag=case,
        q_m=CellState(b.rho_m[0], b.y_m[0]) if has_m else None,
        q_tilde0=CellState(b.rho_t[0], b.y_t[0]) if has_t else None,
        lambda_s=float(b.lambda_s[0]) if in_1 else None,
        lambda_0l=float(b.lambda_0l[0]) if in_23 else None,
        lambda_0m=float(b.lambda_0m[0]) if in_2 else None,
        right_vacuum=bool(b.right_vacuum[0]),
    )


def riemann_batch_gradients(b: RiemannBatch, u_max, gamma, eps_rho=EPS_RHO):
    """Derivatives of the interface states of ``b``.

    Returns ``(Dl, Dr, dU)`` with shapes (n,2,2), (n,2,2), (n,2): the
    Jacobians of ``q0`` with respect to the left state, the right state and
    ``u_max``. Vacuum interfaces get zero blocks.
    """
    g = gamma
    U = u_max
    n = b.case.shape[0]
    case = b.case
    rl, yl, rr, yr = b.rho_l, b.y_l, b.rho_r, b.y_r
    dul_dr, dul_dy, dul_dU = velocity_gradient(rl, yl, U, g, eps_rho)
    dur_dr, dur_dy, dur_dU = velocity_gradient(rr, yr, U, g, eps_rho)
    rls = np.where(rl > eps_rho, rl, 1.0)
    rlg = rls**g
    d_rlg = g * rlg / rls  # d(rho_l^gamma)/d rho_l

    Dl = np.zeros((n, 2, 2))
    Dr = np.zeros((n, 2, 2))
    dU = np.zeros((n, 2))

    left = (case == 0) | (case == 1) | (case == 3) | (case == 6)
    Dl[left, 0, 0] = 1.0
    Dl[left, 1, 1] = 1.0

    mid = (case == 2) | (case == 4)
    if mid.any():
        i = mid
        B = rlg[i] + (b.u_l[i] - b.u_r[i]) / U
        Bp = B ** ((1.0 - g) / g) / g
        rm = b.rho_m[i]
        rmg = rm**g
        fm = b.u_r[i] - U * (1.0 - rmg)
        neg_uep_m = U * g * rmg / rm  # -u_eq'(rho_m)

        drm_drl = Bp * (d_rlg[i] + dul_dr[i] / U)
        drm_dyl = Bp * (dul_dy[i] / U)
        drm_drr = Bp * (-dur_dr[i] / U)
        drm_dyr = Bp * (-dur_dy[i] / U)
        drm_dU = Bp * ((dul_dU[i] - dur_dU[i]) / U - (b.u_l[i] - b.u_r[i]) / U**2)

        Dl[i, 0, 0] = drm_drl
        Dl[i, 0, 1] = drm_dyl
        Dl[i, 1, 0] = drm_drl * fm + rm * (neg_uep_m * drm_drl)
        Dl[i, 1, 1] = drm_dyl * fm + rm * (neg_uep_m * drm_dyl)
        Dr[i, 0, 0] = drm_drr
        Dr[i, 0, 1] = drm_dyr
        Dr[i, 1, 0] = drm_drr * fm + rm * (dur_dr[i] + neg_uep_m * drm_drr)
        Dr[i, 1, 1] = drm_dyr * fm + rm * (dur_dy[i] + neg_uep_m * drm_dyr)
        dU[i, 0] = drm_dU
        dU[i, 1] = drm_dU * fm + rm * (dur_dU[i] - (1.0 - rmg) + neg_uep_m * drm_dU)

    fan = (case == 5) | (case == 7)
    if fan.any():
        i = fan
        W = b.u_l[i] + U * rlg[i]
        c = 1.0 / ((g + 1.0) * U)
        A = W * c
        Ap = A ** ((1.0 - g) / g) / g
        rt = b.rho_t[i]
        rtg = rt**g
        ut = g / (g + 1.0) * W
        ft = ut - U * (1.0 - rtg)
        with np.errstate(divide="ignore", invalid="ignore"):
            neg_uep_t = np.where(rt > 0, U * g * rtg / rt, 0.0)  # rt * neg_uep_t -> 0 as rt -> 0

        dW_drl = dul_dr[i] + U * d_rlg[i]
        dW_dyl = dul_dy[i]
        dW_dU = dul_dU[i] + rlg[i]
        drt_drl = Ap * c * dW_drl
        drt_dyl = Ap * c * dW_dyl
        drt_dU = Ap * (dW_dU * U - W) / ((g + 1.0) * U**2)
        k = g / (g + 1.0)

        Dl[i, 0, 0] = drt_drl
        Dl[i, 0, 1] = drt_dyl
        Dl[i, 1, 0] = drt_drl * ft + rt * (k * dW_drl + neg_uep_t * drt_drl)
        Dl[i, 1, 1] = drt_dyl * ft + rt * (k * dW_dyl + neg_uep_t * drt_dyl)
        dU[i, 0] = drt_dU
        dU[i, 1] = drt_dU * ft + rt * (k * dW_dU - (1.0 - rtg) + neg_uep_t * drt_dU)
    return Dl, Dr, dU


def riemann_gradients(sol: RiemannSolution, q_l, q_r, u_max, gamma, eps_rho=EPS_RHO) -> RiemannGradients:
    b = riemann_batch(
        np.array([float(q_l[0])]), np.array([float(q_l[1])]),
        np.array([float(q_r[0])]), np.array([float(q_r[1])]),
        u_max, gamma, eps_rho,
    )
    if int(b.case[0]) != int(sol.case_tag):
        raise ValueError("solution does not belong to these states")
    Dl, Dr, dU = riemann_batch_gradients(b, u_max, gamma, eps_rho)
    return RiemannGradients(Dl[0], Dr[0], dU[0], vacuum=sol.case_tag == RiemannCase.CASE4_VACUUM)


# -- finite volume step -------------------------------------------------------


@dataclass
class BoundarySetup:
    """Resolved lane-end behaviour for one step.

    ``*_ghost`` is ``None`` for a copy of the edge cell, otherwise a fixed
    ghost state. ``*_scale`` multiplies the boundary flux (0 closes the end).
    """

    up_ghost: Optional[tuple] = None
    up_scale: float = 1.0
    down_ghost: Optional[tuple] = None
    down_scale: float = 1.0


def boundary_setup(lane: MacroLaneState, signal_weight: float = 1.0,
                   upstream_linked: bool = False, downstream_linked: bool = False) -> BoundarySetup:
    out = BoundarySetup()
    up = lane.upstream_boundary
    if upstream_linked or up.kind is BoundaryKind.WALL:
        out.up_scale = 0.0
    elif up.kind is BoundaryKind.INFLOW:
        out.up_ghost = (up.q.rho, up.q.y)
    down = lane.downstream_boundary
    if downstream_linked:
        pass
    elif down.kind is BoundaryKind.WALL:
        out.down_scale = 0.0
    elif down.kind is BoundaryKind.INFLOW:
        out.down_ghost = (down.q.rho, down.q.y)
    elif down.kind is BoundaryKind.SIGNAL:
        out.down_scale = float(signal_weight)
    return out


@dataclass
class MacroStepCache:
    """What one Godunov step needs to be differentiated later."""

    batch: RiemannBatch
    scale: np.ndarray
    up_copy: bool
    down_copy: bool
    ratio: float
    f_rho: np.ndarray
    f_y: np.ndarray


def _interfaces(rho, y, bs: BoundarySetup):
    if bs.up_ghost is None:
        gl = (rho[0], y[0])
    else:
        gl = bs.up_ghost
    if bs.down_ghost is None:
        gr = (rho[-1], y[-1])
    else:
        gr = bs.down_ghost
    rl = np.concatenate(([gl[0]], rho))
    yl = np.concatenate(([gl[1]], y))
    rr = np.concatenate((rho, [gr[0]]))
    yr = np.concatenate((y, [gr[1]]))
    return rl, yl, rr, yr


def max_wave_speed(rho, y, u_max, gamma, eps_rho=EPS_RHO) -> float:
    u = velocities(rho, y, u_max, gamma, eps_rho)
    rg = np.where(rho > eps_rho, np.abs(rho), 0.0) ** gamma
    lam1 = u - gamma * u_max * rg
    return float(max(np.max(np.abs(u)), np.max(np.abs(lam1))))


def godunov_step(rho, y, dx, u_max, bs: BoundarySetup, cfg: SolverConfig, lane_id="?",
                 check_cfl=True):
    """One explicit Godunov update on raw arrays (no clamping).

    Returns ``(rho_next, y_next, cache)``.
    """
    rl, yl, rr, yr = _interfaces(rho, y, bs)
    if check_cfl:
        speed = max_wave_speed(rl, yl, u_max, cfg.gamma, cfg.eps_rho)
        speed = max(speed, max_wave_speed(rr[-1:], yr[-1:], u_max, cfg.gamma, cfg.eps_rho))
        if cfg.dt * speed > dx * (1 + 1e-12):
            raise CflViolation(
                f"CFL violation on lane {lane_id}: dt*max|lambda| = {cfg.dt * speed:.6g} > dx = {dx:.6g}"
            )
    b = riemann_batch(rl, yl, rr, yr, u_max, cfg.gamma, cfg.eps_rho)
    f_rho, f_y = _flux_batch(b.rho0, b.y0, u_max, cfg.gamma, cfg.eps_rho)
    scale = np.ones(rl.shape[0])
    scale[0] = bs.up_scale
    scale[-1] = bs.down_scale
    Fr = f_rho * scale
    Fy = f_y * scale
    r = cfg.dt / dx
    rho_n = rho - r * (Fr[1:] - Fr[:-1])
    y_n = y - r * (Fy[1:] - Fy[:-1])
    cache = MacroStepCache(b, scale, bs.up_ghost is None, bs.down_ghost is None, r, f_rho, f_y)
    return rho_n, y_n, cache


def godunov_vjp(cache: MacroStepCache, mu: np.ndarray, u_max, cfg: SolverConfig,
                lam_out: float = 0.0, lam_in: float = 0.0):
    """Pull the adjoint ``mu`` (n,2) of the stepped state back one step.

    ``lam_out``/``lam_in`` are extra adjoints on the weighted density flux
    through the downstream/upstream end (e.g. from an outflow counter).
    Returns ``(lam, lam_umax, lam_scale)`` where ``lam`` is the adjoint of
    the previous cell states and ``lam_scale`` the adjoint of the per-interface
    flux weights (used for signal control).
    """
    b = cache.batch
    r = cache.ratio
    n = mu.shape[0]
    lamF = np.zeros((n + 1, 2))
    lamF[:-1] += r * mu
    lamF[1:] -= r * mu
    lamF[-1, 0] += lam_out
    lamF[0, 0] += lam_in
    lam_scale = lamF[:, 0] * cache.f_rho + lamF[:, 1] * cache.f_y
    lamF *= cache.scale[:, None]
    J = _flux_jac(b.rho0, b.y0, u_max, cfg.gamma, cfg.eps_rho)
    Dl, Dr, dU = riemann_batch_gradients(b, u_max, cfg.gamma, cfg.eps_rho)
    lam_q0 = np.einsum("kij,ki->kj", J, lamF)
    lamL = np.einsum("kij,ki->kj", Dl, lam_q0)
    lamR = np.einsum("kij,ki->kj", Dr, lam_q0)
    lam = mu + lamL[1:] + lamR[:-1]
    if cache.up_copy:
        lam[0] += lamL[0]
    if cache.down_copy:
        lam[-1] += lamR[-1]
    # explicit u_max dependence of f(q0) at fixed q0
    vac = b.rho0 <= cfg.eps_rho
    rg = np.where(vac, 0.0, np.where(vac, 1.0, b.rho0) ** cfg.gamma)
    dfdU = np.where(vac, 0.0, 1.0 - rg)
    lam_umax = float(np.sum(lam_q0 * dU) + np.sum((lamF[:, 0] * b.rho0 + lamF[:, 1] * b.y0) * dfdU))
    return lam, lam_umax, lam_scale


def clamp_density(rho, y):
    """Clamp density into [0, 1]. Returns ``(rho, y, active_mask, n_clamped)``."""
    active = (rho >= 0.0) & (rho <= 1.0)
    n = int(rho.size - np.count_nonzero(active))
    if n:
        rho = np.clip(rho, 0.0, 1.0)
    return rho, y, active, n


def fvm_step(lane: MacroLaneState, config: SolverConfig, signal_weight: float = 1.0,
             clamp: bool = True) -> MacroLaneState:
    """Advance a stand-alone macro lane by one time step ``config.dt``.

    Raises ``CflViolation`` instead of sub-stepping when the fixed step is
    too large for the current wave speeds.
    """
    bs = boundary_setup(lane, signal_weight)
    rho, y, _ = godunov_step(lane.rho, lane.y, lane.dx, lane.u_max, bs, config, lane.id)
    if clamp:
        rho, y, _, _ = clamp_density(rho, y)
    return lane.with_state(rho, y)


@dataclass(frozen=True)
class FvmStepJacobians:
    """Block-tridiagonal step Jacobian.

    ``lower[i] = dQ'_i/dQ_{i-1}``, ``diag[i] = dQ'_i/dQ_i`` and
    ``upper[i] = dQ'_i/dQ_{i+1}``; ``lower[0]`` and ``upper[-1]`` are zero.
    """

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    vacuum_interfaces: int = 0

    def dense(self) -> np.ndarray:
        n = self.diag.shape[0]
        out = np.zeros((2 * n, 2 * n))
        for i in range(n):
            out[2 * i:2 * i + 2, 2 * i:2 * i + 2] = self.diag[i]
            if i > 0:
                out[2 * i:2 * i + 2, 2 * i - 2:2 * i] = self.lower[i]
            if i < n - 1:
                out[2 * i:2 * i + 2, 2 * i + 2:2 * i + 4] = self.upper[i]
        return out


def fvm_step_jacobians(lane: MacroLaneState, config: SolverConfig, signal_weight: float = 1.0) -> FvmStepJacobians:
    """Per-cell Jacobian blocks of ``fvm_step`` (before clamping)."""
    bs = boundary_setup(lane, signal_weight)
    _, _, cache = godunov_step(lane.rho, lane.y, lane.dx, lane.u_max, bs, config, lane.id)
    b = cache.batch
    J = _flux_jac(b.rho0, b.y0, lane.u_max, config.gamma, config.eps_rho)
    Dl, Dr, _ = riemann_batch_gradients(b, lane.u_max, config.gamma, config.eps_rho)
    s = cache.scale[:, None, None]
    A = s * (J @ Dl)  # dF_k / dQ_left(k)
    Bm = s * (J @ Dr)  # dF_k / dQ_right(k)
    r = cache.ratio
    n = lane.num_cells
    eye = np.eye(2)
    lower = np.zeros((n, 2, 2))
    upper = np.zeros((n, 2, 2))
    diag = np.broadcast_to(eye, (n, 2, 2)).copy()
    # cell i sits right of interface i and left of interface i+1
    diag -= r * (A[1:] - Bm[:-1])
    lower[1:] = r * A[1:n]
    upper[:-1] = -r * Bm[1:n]
    if cache.up_copy:
        diag[0] += r * A[0]
    if cache.down_copy:
        diag[-1] -= r * Bm[-1]
    vac = int(np.count_nonzero(b.case == RiemannCase.CASE4_VACUUM))
    return FvmStepJacobians(lower, diag, upper, vac)
