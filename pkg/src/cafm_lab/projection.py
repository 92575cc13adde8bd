"""Differentiable projection onto constraint sets.

Every projector runs on :class:`~cafm_lab.diffcore.Tensor` inputs, so the
default (unrolled) backward pass is plain reverse mode through the recorded
iterations.  For the linearized SQP map the fixed-point (implicit) VJP is also
available: it solves ``(I - dPhi/dx)^T w = u`` at the converged point and returns
``(dPhi/dy)^T w``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .constraints import BoxBounds, ConstraintError, ConstraintSet, CountThreshold
from .diffcore import Tensor

log = logging.getLogger(__name__)

COUNT_NUDGE = 1e-12
BACKWARD_MODES = ("unrolled", "implicit")
SQP_MODES = ("qp_linearized", "restoration")
METHODS = ("sqp", "al")
AL_OPTIMIZERS = ("adam", "gd", "newton")


class ProjectionError(RuntimeError):
    pass


@dataclass
class ALConfig:
    inner_iters: int = 64
    outer_iters: int = 8
    inner_lr: float = 1e-2
    rho_init: float = 1.0
    rho_scale: float = 2.0
    rho_max: float = 128.0
    beta: float = 0.0
    optimizer: str = "adam"


@dataclass
class CountConfig:
    step_size: float = 0.1
    n_iter: int = 5


@dataclass
class ProjectionConfig:
    max_iter: int = 3
    damping: float = 1e-6
    backward_mode: str = "unrolled"
    sqp_mode: str = "qp_linearized"
    method: str = "sqp"
    feas_tol: float = 1e-8
    correction_clamp: float | None = None
    count_hard: bool = False
    al: ALConfig = field(default_factory=ALConfig)
    count: CountConfig = field(default_factory=CountConfig)

    def __post_init__(self):
        if isinstance(self.al, dict):
            self.al = ALConfig(**self.al)
        if isinstance(self.count, dict):
            self.count = CountConfig(**self.count)
        self.validate()

    def validate(self) -> None:
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.backward_mode not in BACKWARD_MODES:
            raise ValueError(f"backward_mode must be one of {BACKWARD_MODES}")
        if self.sqp_mode not in SQP_MODES:
            raise ValueError(f"sqp_mode must be one of {SQP_MODES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        a = self.al
        if min(a.inner_iters, a.outer_iters) < 1 or a.rho_init > a.rho_max or a.optimizer not in AL_OPTIMIZERS:
            raise ValueError("invalid augmented Lagrangian schedule")
        if self.count.n_iter < 1:
            raise ValueError("count.n_iter must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProjectionCall:
    """Record of one projection, kept for the standalone backward functions."""

    kind: str
    y: Tensor
    out: Tensor
    cset: ConstraintSet | None
    cfg: ProjectionConfig | None
    converged: bool


@dataclass
class ProjectionResult:
    x_proj: np.ndarray
    iterations_used: int
    final_residual_norm: float
    converged: bool
    call: ProjectionCall | None = None


# ---------------------------------------------------------------------------
# helpers


def _batched(y) -> tuple[Tensor, bool]:
    y = dc.as_tensor(y)
    if y.ndim == 1:
        return dc.reshape(y, (1, -1)), True
    return y, False


def _unbatch(x: Tensor, single: bool) -> Tensor:
    return dc.reshape(x, (-1,)) if single else x


def _jv(J: Tensor, v: Tensor) -> Tensor:
    return dc.einsum("md,bd->bm" if J.ndim == 2 else "bmd,bd->bm", J, v)


def _jtv(J: Tensor, lam: Tensor) -> Tensor:
    return dc.einsum("md,bm->bd" if J.ndim == 2 else "bmd,bm->bd", J, lam)


def _jjt(J: Tensor) -> Tensor:
    return dc.einsum("md,nd->mn", J, J) if J.ndim == 2 else dc.einsum("bmd,bnd->bmn", J, J)


def _row_norm(a: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(a.reshape(a.shape[0], -1), axis=-1)))


def _result(x: Tensor, y: Tensor, single: bool, kind: str, iters: int, res: float, tol: float,
            cset, cfg, record: bool) -> ProjectionResult:
    out = _unbatch(x, single)
    conv = res <= tol
    call = ProjectionCall(kind, y, out, cset, cfg, conv) if record else None
    return ProjectionResult(out.value.copy(), iters, res, conv, call)


def _leaf(y, record: bool) -> Tensor:
    return Tensor(np.array(dc.as_tensor(y).value), requires_grad=True) if record else dc.as_tensor(y)


# ---------------------------------------------------------------------------
# closed forms


def project_affine(A, b, y, damping: float = 1e-6, record: bool = False) -> ProjectionResult:
    """``y - A^T (A A^T + eps I)^{-1} (A y - b)`` with adaptive damping on factorization failure."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    yt = _leaf(y, record)
    yb, single = _batched(yt)
    r = dc.sub(dc.einsum("md,bd->bm", A, yb), b)
    lam = dc.spd_solve(A @ A.T, r, damping)
    x = dc.sub(yb, dc.einsum("md,bm->bd", A, lam))
    res = _row_norm(np.einsum("md,bd->bm", A, x.value) - np.asarray(b))
    return _result(x, yt, single, "affine", 1, res, np.inf, None, None, record)


def project_box(lower, upper, y, record: bool = False) -> ProjectionResult:
    lower, upper = np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64)
    if np.any(lower > upper):
        raise ConstraintError("lower bound exceeds upper bound")
    yt = _leaf(y, record)
    x = dc.clip(yt, lower, upper)
    return ProjectionResult(x.value.copy(), 1, 0.0, True,
                            ProjectionCall("box", yt, x, None, None, True) if record else None)


# ---------------------------------------------------------------------------
# SQP / Gauss-Newton


def sqp_map(cset: ConstraintSet, x: Tensor, y: Tensor, cfg: ProjectionConfig) -> Tensor:
    """One update ``x+ = Phi(x, y)`` of the damped SQP projector (batched tensors)."""
    h = cset.eq_residual(x)
    J = cset.eq_jacobian(x)
    if cfg.sqp_mode == "qp_linearized":
        r = dc.add(h, _jv(J, dc.sub(y, x)))
        base = y
    else:
        r = h
        base = x
    lam = dc.spd_solve(_jjt(J), r, cfg.damping)
    x_new = dc.sub(base, _jtv(J, lam))
    if cfg.correction_clamp is not None:
        c = cfg.correction_clamp
        x_new = dc.add(x, dc.clip(dc.sub(x_new, x), -c, c))
    return x_new


def _sqp_run(cset: ConstraintSet, y: Tensor, cfg: ProjectionConfig) -> tuple[Tensor, int, float]:
    if cset.inequalities or cset.counts:
        raise ConstraintError("SQP projection handles equality constraints only; use method='al'")
    x = y
    with dc.no_grad():
        res = _row_norm(cset.eq_residual(x).value)
    it = 0
    for _ in range(cfg.max_iter):
        if res <= cfg.feas_tol:
            break
        x = sqp_map(cset, x, y, cfg)
        it += 1
        with dc.no_grad():
            res = _row_norm(cset.eq_residual(x).value)
    return x, it, res


def sqp_project(cset: ConstraintSet, y, cfg: ProjectionConfig | None = None,
                record: bool = False) -> ProjectionResult:
    cfg = cfg or ProjectionConfig()
    yt = _leaf(y, record)
    yb, single = _batched(yt)
    x, it, res = _sqp_run(cset, yb, cfg)
    return _result(x, yt, single, "sqp", it, res, cfg.feas_tol, cset, cfg, record)


def implicit_sqp_vjp(cset: ConstraintSet, x_star: np.ndarray, y: np.ndarray, u: np.ndarray,
                     cfg: ProjectionConfig) -> np.ndarray:
    """Fixed-point VJP of the linearized SQP projector, batched over rows."""
    if cfg.sqp_mode != "qp_linearized":
        raise ProjectionError("implicit mode undefined for y-independent update map")
    xs = Tensor(np.atleast_2d(x_star), requires_grad=True)
    ys = Tensor(np.atleast_2d(y), requires_grad=True)
    ub = np.atleast_2d(u)
    out = sqp_map(cset, xs, ys, replace(cfg, correction_clamp=None))
    if cset.all_affine():
        # the affine update does not depend on x, so w = u
        return dc.grad(out, [ys], ub)[0].reshape(np.shape(u))
    B, d = xs.shape
    Jx = np.empty((B, d, d))
    Jy = np.empty((B, d, d))
    for i in range(d):
        seed = np.zeros((B, d))
        seed[:, i] = 1.0
        gx, gy = dc.grad(out, [xs, ys], seed)
        Jx[:, i, :], Jy[:, i, :] = gx, gy
    lhs = np.eye(d) - np.swapaxes(Jx, -1, -2)
    try:
        w = np.linalg.solve(lhs, ub[..., None])[..., 0]
    except np.linalg.LinAlgError:
        w = np.linalg.solve(lhs + max(cfg.damping, 1e-12) * np.eye(d), ub[..., None])[..., 0]
    g = np.einsum("bij,bi->bj", Jy, w)
    return g.reshape(np.shape(u))


def _implicit_sqp(cset: ConstraintSet, y: Tensor, cfg: ProjectionConfig) -> tuple[Tensor, int, float]:
    if cfg.sqp_mode != "qp_linearized":
        raise ProjectionError("implicit mode undefined for y-independent update map")
    with dc.no_grad():
        x, it, res = _sqp_run(cset, dc.detach(y), cfg)
    if res > cfg.feas_tol:
        raise ProjectionError(f"implicit backward needs a converged projection "
                              f"(residual {res:.3e} > feas_tol {cfg.feas_tol:.1e})")
    xv, yv = x.value.copy(), y.value.copy()
    out = dc.custom("implicit_sqp", [y], xv, lambda g: (implicit_sqp_vjp(cset, xv, yv, g, cfg),))
    return out, it, res


# ---------------------------------------------------------------------------
# augmented Lagrangian


def _al_objective(cset, x, y, lam, rho) -> np.ndarray:
    v = 0.5 * np.sum((x - y) ** 2, axis=-1)
    if cset.equalities:
        h = cset.eq_residual(x).value
        v = v + np.sum(lam * h, axis=-1) + 0.5 * rho * np.sum(h * h, axis=-1)
    if cset.inequalities:
        g = np.maximum(cset.ineq_residual(x).value, 0.0)
        v = v + 0.5 * rho * np.sum(g * g, axis=-1)
    return v


def _al_grad(cset, x: Tensor, y: Tensor, lam: Tensor, rho: float) -> Tensor:
    g = dc.sub(x, y)
    if cset.equalities:
        h = cset.eq_residual(x)
        g = dc.add(g, _jtv(cset.eq_jacobian(x), dc.add(lam, dc.mul(h, rho))))
    for blk in cset.inequalities:
        gp = dc.relu(blk.residual(x))
        if isinstance(blk, BoxBounds):
            d = blk.dim
            g = dc.add(g, dc.mul(dc.sub(gp[:, :d], gp[:, d:]), rho))
        else:
            g = dc.add(g, dc.mul(_jtv(blk.jacobian(x), gp), rho))
    return g


def _al_newton_step(cset, x: Tensor, g: Tensor, rho: float) -> Tensor:
    """Gauss-Newton direction ``(I + rho J^T J + rho D_active)^{-1} g`` via Woodbury."""
    B, d = x.shape
    dg = np.ones((B, d))
    rows = []
    if cset.equalities:
        rows.append(cset.eq_jacobian(x))
    for blk in cset.inequalities:
        active = blk.residual(x).value > 0
        if isinstance(blk, BoxBounds):
            dg = dg + rho * (active[:, :d] | active[:, d:])
        else:
            rows.append(dc.mul(blk.jacobian(x), active[:, :, None].astype(np.float64)))
    gd = dc.div(g, dg)
    if not rows:
        return gd
    if len(rows) == 1 and rows[0].ndim == 2 and np.all(dg == 1.0):
        J = rows[0]
        S = dc.add(_jjt(J), np.eye(J.shape[0]) / rho)
    else:
        rows = [r if r.ndim == 3 else dc.add(r, np.zeros((B,) + r.shape)) for r in rows]
        J = rows[0] if len(rows) == 1 else dc.concat(rows, axis=1)
        S = dc.add(dc.einsum("bmd,bnd->bmn", dc.div(J, dg[:, None, :]), J), np.eye(J.shape[1]) / rho)
    corr = _jtv(J, dc.spd_solve(S, _jv(J, gd)))
    return dc.sub(gd, dc.div(corr, dg))


def _al_run(cset: ConstraintSet, y: Tensor, cfg: ProjectionConfig) -> tuple[Tensor, int, float]:
    a = cfg.al
    B = y.shape[0]
    x = y
    lam = Tensor(np.zeros((B, cset.n_eq)))
    lam_prev = lam
    rho = a.rho_init
    m = Tensor(np.zeros(y.shape))
    v = Tensor(np.zeros(y.shape))
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    slack = 1e-6 * (1.0 + 0.5 * np.sum(y.value ** 2, axis=-1))
    it = 0
    for outer in range(a.outer_iters):
        with dc.no_grad():
            obj0 = _al_objective(cset, x.value, y.value, lam.value, rho)
        for _ in range(a.inner_iters):
            try:
                g = _al_grad(cset, x, y, lam, rho)
                if a.optimizer == "gd":
                    x = dc.sub(x, dc.mul(g, a.inner_lr))
                elif a.optimizer == "newton":
                    x = dc.sub(x, _al_newton_step(cset, x, g, rho))
                else:
                    t += 1
                    m = dc.add(dc.mul(m, b1), dc.mul(g, 1.0 - b1))
                    v = dc.add(dc.mul(v, b2), dc.mul(dc.square(g), 1.0 - b2))
                    mhat = dc.mul(m, 1.0 / (1.0 - b1 ** t))
                    vhat = dc.mul(v, 1.0 / (1.0 - b2 ** t))
                    x = dc.sub(x, dc.mul(dc.div(mhat, dc.add(dc.sqrt(vhat), eps)), a.inner_lr))
            except dc.NonFiniteError as exc:
                raise ProjectionError(f"augmented Lagrangian diverged at outer iteration {outer}, "
                                      f"inner step {it}: {exc} (rho={rho})") from exc
            it += 1
        with dc.no_grad():
            obj = _al_objective(cset, x.value, y.value, lam.value, rho)
        # the inner loop should not raise the objective it is minimizing
        bad = ~np.isfinite(obj) | (obj > 10.0 * obj0 + slack)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ProjectionError(f"augmented Lagrangian diverged at outer iteration {outer}: "
                                  f"sample {i} objective {obj[i]:.3e} vs {obj0[i]:.3e} at round start, rho={rho}")
        if cset.equalities:
            h = cset.eq_residual(x)
            new = dc.add(lam, dc.mul(h, rho))
            if a.beta:
                new = dc.add(new, dc.mul(dc.sub(lam, lam_prev), a.beta))
            lam_prev, lam = lam, new
        rho = min(rho * a.rho_scale, a.rho_max)
    with dc.no_grad():
        res = 0.0
        if cset.equalities:
            res = _row_norm(cset.eq_residual(x).value)
        if cset.inequalities:
            res = max(res, _row_norm(np.maximum(cset.ineq_residual(x).value, 0.0)))
    return x, it, res


def al_project(cset: ConstraintSet, y, cfg: ProjectionConfig | None = None,
               record: bool = False) -> ProjectionResult:
    """Augmented Lagrangian projection with an unrolled inner optimizer.

    Minimizes ``0.5|x-y|^2 + lam.h(x) + rho/2 |h(x)|^2 + rho/2 |max(g(x), 0)|^2``
    for ``outer_iters`` rounds of ``inner_iters`` steps, then updates ``lam`` and
    escalates ``rho`` up to ``rho_max``.
    """
    cfg = cfg or ProjectionConfig(method="al")
    if cset.counts:
        raise ConstraintError("count constraints are handled by count_project")
    yt = _leaf(y, record)
    yb, single = _batched(yt)
    x, it, res = _al_run(cset, yb, cfg)
    return _result(x, yt, single, "al", it, res, cfg.feas_tol, cset, cfg, record)


# ---------------------------------------------------------------------------
# count / porosity


def _kth_reduced(ct: CountThreshold, x: np.ndarray) -> np.ndarray:
    g = ct.reduce(x)
    return np.sort(g, axis=-1, kind="stable")[..., ct.target - 1]


def _count_check(ct: CountThreshold) -> None:
    kn = ct.k * ct.n
    if kn < 1 or kn > ct.n - 1:
        raise ConstraintError(f"{ct.name}: k*n = {kn:.3f} outside [1, n-1]")


def _count_run(ct: CountThreshold, y: Tensor, cfg: ProjectionConfig, hard: bool,
               bounds: BoxBounds | None) -> tuple[Tensor, int]:
    _count_check(ct)
    x = y
    C = len(ct.weights)
    if hard:
        xv = y.value
        feasible = ct.indicator(xv) == 0.0
        shift = _kth_reduced(ct, xv) - ct.threshold + COUNT_NUDGE
        shift = np.where(feasible, 0.0, shift)
        x = dc.sub(x, shift[:, None])
        # ties at the k-th value: lift the surplus (by ascending index) back to the threshold
        xv = x.value
        red = ct.reduce(xv)
        rank = np.argsort(np.argsort(red, axis=-1, kind="stable"), axis=-1, kind="stable")
        lift = np.where((rank >= ct.target) & (red < ct.threshold), ct.threshold - red, 0.0)
        if np.any(lift):
            x = dc.add(x, np.repeat(lift, C, axis=-1))
        it = 1
    else:
        for _ in range(cfg.count.n_iter):
            tau = _kth_reduced(ct, x.value)
            x = dc.sub(x, (cfg.count.step_size * (tau - ct.threshold))[:, None])
        it = cfg.count.n_iter
    if bounds is not None:
        x = dc.clip(x, bounds.lower, bounds.upper)
    return x, it


def count_project(ct: CountThreshold, y, cfg: ProjectionConfig | None = None, hard: bool = True,
                  bounds: BoxBounds | None = None, record: bool = False) -> ProjectionResult:
    """Order-statistic shift toward exactly ``floor(k n)`` reduced entries below the threshold.

    ``hard`` shifts every channel by the k-th smallest reduced value (plus a 1e-12
    nudge) so the count is met exactly; otherwise ``n_iter`` damped shifts are
    applied.  Shift magnitudes are treated as constants by the backward pass.
    """
    cfg = cfg or ProjectionConfig()
    yt = _leaf(y, record)
    yb, single = _batched(yt)
    x, it = _count_run(ct, yb, cfg, hard, bounds)
    miss = float(np.max(ct.indicator(x.value)))
    return _result(x, yt, single, "count", it, miss, 0.0, None, cfg, record)


# ---------------------------------------------------------------------------
# dispatch


def project(cset: ConstraintSet, y, cfg: ProjectionConfig | None = None,
            hard: bool | None = None) -> tuple[Tensor, dict]:
    """Project ``y`` (``(d,)`` or ``(B, d)``) onto ``cset`` as a differentiable tensor op.

    Returns the projected tensor and a dict with ``iterations`` and ``residual``.
    ``hard`` overrides ``cfg.count_hard`` for count constraints.
    """
    cfg = cfg or ProjectionConfig()
    yb, single = _batched(y)
    if cset.is_empty():
        return _unbatch(yb, single), {"iterations": 0, "residual": 0.0}
    counts, boxes = cset.counts, cset.boxes
    others = [b for b in cset.blocks if b not in counts and b not in boxes]
    if counts:
        if len(counts) > 1 or others:
            raise ConstraintError("count constraints combine only with box bounds")
        hard = cfg.count_hard if hard is None else hard
        box = _merge_boxes(boxes, cset.ambient_dim)
        x, it = _count_run(counts[0], yb, cfg, hard, box)
        res = float(np.max(counts[0].indicator(x.value)))
    elif not others:
        box = _merge_boxes(boxes, cset.ambient_dim)
        x, it, res = dc.clip(yb, box.lower, box.upper), 1, 0.0
    elif cfg.method == "al":
        x, it, res = _al_run(cset, yb, cfg)
    elif cfg.backward_mode == "implicit" and yb.requires_grad:
        x, it, res = _implicit_sqp(cset, yb, cfg)
    else:
        x, it, res = _sqp_run(cset, yb, cfg)
    return _unbatch(x, single), {"iterations": it, "residual": res}


def _merge_boxes(boxes: list[BoxBounds], dim: int) -> BoxBounds | None:
    if not boxes:
        return None
    lo = np.max([b.lower for b in boxes], axis=0)
    hi = np.min([b.upper for b in boxes], axis=0)
    return BoxBounds(lo, hi, dim, name="box")


def project_values(cset: ConstraintSet, y: np.ndarray, cfg: ProjectionConfig | None = None,
                   hard: bool | None = None) -> np.ndarray:
    with dc.no_grad():
        x, _ = project(cset, Tensor(y), cfg, hard)
    return x.value


def hard_project(cset: ConstraintSet, y: np.ndarray, cfg: ProjectionConfig | None = None) -> np.ndarray:
    """Save-time projection: exact count shift, undamped equality solve."""
    cfg = cfg or ProjectionConfig()
    if cset.is_empty():
        return np.array(y, dtype=np.float64)
    if cset.counts or not cset.equalities or cfg.method == "al":
        return project_values(cset, y, cfg, hard=True)
    hard_cfg = replace(cfg, damping=0.0, correction_clamp=None, max_iter=max(cfg.max_iter, 20),
                       feas_tol=min(cfg.feas_tol, 1e-12))
    return project_values(cset, y, hard_cfg, hard=True)


# ---------------------------------------------------------------------------
# standalone backward passes


def backward_unrolled(call: ProjectionCall | ProjectionResult, u) -> np.ndarray:
    call = call.call if isinstance(call, ProjectionResult) else call
    if call is None:
        raise ProjectionError("projection was not recorded (pass record=True)")
    return dc.grad(call.out, [call.y], np.asarray(u, dtype=np.float64))[0]


def backward_implicit(call: ProjectionCall | ProjectionResult, u) -> np.ndarray:
    call = call.call if isinstance(call, ProjectionResult) else call
    if call is None:
        raise ProjectionError("projection was not recorded (pass record=True)")
    u = np.asarray(u, dtype=np.float64)
    if call.kind == "affine":
        raise ProjectionError("use sqp_project for implicit differentiation of affine sets")
    if call.kind != "sqp":
        raise ProjectionError(f"implicit mode is not defined for the {call.kind} projector")
    if call.cfg.sqp_mode != "qp_linearized":
        raise ProjectionError("implicit mode undefined for y-independent update map")
    if not call.converged:
        raise ProjectionError("implicit backward needs a converged projection")
    return implicit_sqp_vjp(call.cset, call.out.value, call.y.value, u, call.cfg)
