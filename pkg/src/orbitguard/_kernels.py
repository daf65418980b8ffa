"""Jitted numerical core.

Every hot code path lives here as a flat-array kernel decorated with
:func:`orbitguard.backend.njit` so the whole file runs under numba or, with
``ORBITGUARD_NO_JIT=1``, as plain numpy.  Public modules wrap these kernels
in typed dataclass APIs; nothing outside this file should need the packed
layouts below.

State vector layout (float64, length 16)::

    index  symbol     meaning                              unit
    0:3    r          position, Hill frame                 m
    3:6    v          velocity, Hill frame                 m/s
    6:10   q          attitude quaternion body->Hill,      -
                      scalar-last (x, y, z, w), unit norm
    10:13  w          body angular rate                    rad/s
    13     battery    charge fraction in [0, 1]            -
    14     T          bulk temperature                     K
    15     fuel_used  accumulated delta-v, monotone        m/s

Hill frame: x radial (away from Earth), y along-track, z cross-track.
Control vector u (length 6): thrust (N, commanded frame) then torque (N m,
body frame).  Vehicle parameters are packed by ``dynamics.VehicleParams``
into a float64 vector with the P* offsets below.

Constraint configuration is packed per catalog entry, indexed by the
integer ids CID_* (the wire order of the constraint enumeration):
``cpar`` holds up to four scalars per constraint and ``kap`` the class-K
strengths (inner, outer); degree-1 rows read only ``kap[i, 0]``.
"""

from __future__ import annotations

# scalar inverse trig comes from math, not numpy: numba lowers both to the
# C library, but numpy's own scalar routines differ from it by 1 ulp on a
# fair fraction of inputs, which would break bit-parity between backends
import math

import numpy as np

from .backend import njit

# ---------------------------------------------------------------------------
# layouts

IR, IV, IQ, IW = 0, 3, 6, 10
IBAT, ITEMP, IFUEL = 13, 14, 15
NSTATE = 16

PN, PMASS, PFMAX, PTMAX = 0, 1, 2, 3
PIN = 4        # inertia, row-major 3x3
PINV = 13      # inverse inertia, row-major 3x3
PPANEL = 22    # solar panel normal, body frame
PBORE = 25     # sensor boresight, body frame
PANT = 28      # antenna axis, body frame
PGEN, PLOAD, PTHTAU, PTCOLD, PTHOT = 31, 32, 33, 34, 35
PFRAME = 36    # 0 = thrust commanded in Hill frame, 1 = body frame
NPARAMS = 37

CID_SAFE_SEPARATION = 0
CID_DYNAMIC_SPEED = 1
CID_KEEP_IN = 2
CID_PASSIVE_SAFETY = 3
CID_AXIAL_VELOCITY = 4
CID_ATTITUDE_EXCLUSION = 5
CID_COMMUNICATION = 6
CID_TEMPERATURE = 7
CID_BATTERY = 8
CID_ANGULAR_VELOCITY = 9
CID_FUEL_LIMIT = 10
NCON = 11

MODE_BARRIER = 0
MODE_SWITCHING = 1

# filter decision modes
FM_PASS = 0
FM_QP = 1
FM_BACKUP = 2
FM_OVERRIDE = 3

# backup kinds
BK_NONE = 0
BK_COAST = 1
BK_ENMT = 2
BK_DETUMBLE = 3

# QP statuses
QP_OPTIMAL = 0
QP_RELAXED = 1
QP_INFEASIBLE = 2
QP_STALL = 3

FEAS_TOL = 1e-8       # absolute row-residual feasibility tolerance
DEGEN_TOL = 1e-12     # row considered control-degenerate below this norm

MAX_ROWS = 64         # workspace bound: constraint + obstacle + box + slack rows
MAX_DIM = 32          # workspace bound: control dims + slack dims

# policy kinds (kernel codes)
POL_STREAM = 0
POL_DOCK = 1
POL_INSPECT = 2
POL_MLP = 3
POL_ZERO = 4

OBS_HILL = 0
OBS_SPHERICAL = 1

TASK_NONE = 0
TASK_DOCK = 1
TASK_INSPECT = 2

# episode abort codes
ABORT_NONE = 0
ABORT_NONFINITE = 1
ABORT_QP_STALL = 2


# ---------------------------------------------------------------------------
# quaternion and frame helpers (scalar-last, unit quaternions)


@njit(cache=True)
def quat_rotate(q, v, out):
    # out = R(q) v, R the body->Hill rotation for q = (x, y, z, w)
    tx = 2.0 * (q[1] * v[2] - q[2] * v[1])
    ty = 2.0 * (q[2] * v[0] - q[0] * v[2])
    tz = 2.0 * (q[0] * v[1] - q[1] * v[0])
    out[0] = v[0] + q[3] * tx + (q[1] * tz - q[2] * ty)
    out[1] = v[1] + q[3] * ty + (q[2] * tx - q[0] * tz)
    out[2] = v[2] + q[3] * tz + (q[0] * ty - q[1] * tx)


@njit(cache=True)
def quat_rotate_inv(q, v, out):
    # out = R(q)^T v  (rotate by the conjugate)
    tx = 2.0 * (-q[1] * v[2] + q[2] * v[1])
    ty = 2.0 * (-q[2] * v[0] + q[0] * v[2])
    tz = 2.0 * (-q[0] * v[1] + q[1] * v[0])
    out[0] = v[0] + q[3] * tx + (-q[1] * tz + q[2] * ty)
    out[1] = v[1] + q[3] * ty + (-q[2] * tx + q[0] * tz)
    out[2] = v[2] + q[3] * tz + (-q[0] * ty + q[1] * tx)


@njit(cache=True)
def quat_multiply(a, b, out):
    # Hamilton product a (x) b, scalar-last
    out[0] = a[3] * b[0] + b[3] * a[0] + (a[1] * b[2] - a[2] * b[1])
    out[1] = a[3] * b[1] + b[3] * a[1] + (a[2] * b[0] - a[0] * b[2])
    out[2] = a[3] * b[2] + b[3] * a[2] + (a[0] * b[1] - a[1] * b[0])
    out[3] = a[3] * b[3] - (a[0] * b[0] + a[1] * b[1] + a[2] * b[2])


@njit(cache=True)
def sun_direction_at(t, n, out):
    # Unit sun vector in the Hill frame; inertially fixed, so it sweeps the
    # orbital plane at -n: starts at +x at t = 0.
    out[0] = np.cos(n * t)
    out[1] = -np.sin(n * t)
    out[2] = 0.0


# ---------------------------------------------------------------------------
# continuous dynamics


@njit(cache=True)
def state_derivative(s, t, u, par, out):
    """Full 16-state derivative under control u = [thrust, torque]."""
    n = par[PN]
    m = par[PMASS]

    fx, fy, fz = u[0], u[1], u[2]
    if par[PFRAME] == 1.0:
        # thrust commanded in body axes: rotate into Hill
        q0, q1, q2, q3 = s[IQ], s[IQ + 1], s[IQ + 2], s[IQ + 3]
        tx = 2.0 * (q1 * fz - q2 * fy)
        ty = 2.0 * (q2 * fx - q0 * fz)
        tz = 2.0 * (q0 * fy - q1 * fx)
        hx = fx + q3 * tx + (q1 * tz - q2 * ty)
        hy = fy + q3 * ty + (q2 * tx - q0 * tz)
        hz = fz + q3 * tz + (q0 * ty - q1 * tx)
        fx, fy, fz = hx, hy, hz

    # relative orbit: Clohessy-Wiltshire
    out[0] = s[3]
    out[1] = s[4]
    out[2] = s[5]
    out[3] = 3.0 * n * n * s[0] + 2.0 * n * s[4] + fx / m
    out[4] = -2.0 * n * s[3] + fy / m
    out[5] = -n * n * s[2] + fz / m

    # attitude kinematics qdot = q (x) (w, 0) / 2 and Euler's equation
    qx, qy, qz, qw = s[IQ], s[IQ + 1], s[IQ + 2], s[IQ + 3]
    wx, wy, wz = s[IW], s[IW + 1], s[IW + 2]
    out[6] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[7] = 0.5 * (qw * wy + qz * wx - qx * wz)
    out[8] = 0.5 * (qw * wz + qx * wy - qy * wx)
    out[9] = -0.5 * (qx * wx + qy * wy + qz * wz)

    iwx = par[PIN + 0] * wx + par[PIN + 1] * wy + par[PIN + 2] * wz
    iwy = par[PIN + 3] * wx + par[PIN + 4] * wy + par[PIN + 5] * wz
    iwz = par[PIN + 6] * wx + par[PIN + 7] * wy + par[PIN + 8] * wz
    # torque minus gyroscopic coupling w x (I w)
    mx = u[3] - (wy * iwz - wz * iwy)
    my = u[4] - (wz * iwx - wx * iwz)
    mz = u[5] - (wx * iwy - wy * iwx)
    out[10] = par[PINV + 0] * mx + par[PINV + 1] * my + par[PINV + 2] * mz
    out[11] = par[PINV + 3] * mx + par[PINV + 4] * my + par[PINV + 5] * mz
    out[12] = par[PINV + 6] * mx + par[PINV + 7] * my + par[PINV + 8] * mz

    # resources: panel exposure drives charging and the thermal equilibrium
    sx = np.cos(n * t)
    sy = -np.sin(n * t)
    px, py, pz = par[PPANEL], par[PPANEL + 1], par[PPANEL + 2]
    tx = 2.0 * (qy * pz - qz * py)
    ty = 2.0 * (qz * px - qx * pz)
    tz = 2.0 * (qx * py - qy * px)
    phx = px + qw * tx + (qy * tz - qz * ty)
    phy = py + qw * ty + (qz * tx - qx * tz)
    expo = phx * sx + phy * sy
    if expo < 0.0:
        expo = 0.0
    out[IBAT] = par[PGEN] * expo - par[PLOAD]
    teq = par[PTCOLD] + (par[PTHOT] - par[PTCOLD]) * expo
    out[ITEMP] = (teq - s[ITEMP]) / par[PTHTAU]
    # delta-v bookkeeping over commanded thrust components
    out[IFUEL] = (abs(u[0]) + abs(u[1]) + abs(u[2])) / m


@njit(cache=True)
def rk4_step(s, t, u, dt, par, out, scr):
    """Classical RK4 step with zero-order-held control.

    scr is a (5, 16) scratch block.  After the combination step the
    quaternion is renormalized, battery clamped to [0, 1] and fuel kept
    monotone.
    """
    k1 = scr[0]
    k2 = scr[1]
    k3 = scr[2]
    k4 = scr[3]
    tmp = scr[4]

    state_derivative(s, t, u, par, k1)
    for i in range(NSTATE):
        tmp[i] = s[i] + 0.5 * dt * k1[i]
    state_derivative(tmp, t + 0.5 * dt, u, par, k2)
    for i in range(NSTATE):
        tmp[i] = s[i] + 0.5 * dt * k2[i]
    state_derivative(tmp, t + 0.5 * dt, u, par, k3)
    for i in range(NSTATE):
        tmp[i] = s[i] + dt * k3[i]
    state_derivative(tmp, t + dt, u, par, k4)
    for i in range(NSTATE):
        out[i] = s[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])

    qn = np.sqrt(out[6] * out[6] + out[7] * out[7] + out[8] * out[8] + out[9] * out[9])
    if qn > 0.0:
        out[6] /= qn
        out[7] /= qn
        out[8] /= qn
        out[9] /= qn
    if out[IBAT] < 0.0:
        out[IBAT] = 0.0
    elif out[IBAT] > 1.0:
        out[IBAT] = 1.0
    if out[IFUEL] < s[IFUEL]:
        out[IFUEL] = s[IFUEL]


@njit(cache=True)
def cw_stm_fill(n, t, out):
    """Closed-form Clohessy-Wiltshire state transition matrix (6x6)."""
    c = np.cos(n * t)
    sn = np.sin(n * t)
    for i in range(6):
        for j in range(6):
            out[i, j] = 0.0
    out[0, 0] = 4.0 - 3.0 * c
    out[0, 3] = sn / n
    out[0, 4] = 2.0 * (1.0 - c) / n
    out[1, 0] = 6.0 * (sn - n * t)
    out[1, 1] = 1.0
    out[1, 3] = 2.0 * (c - 1.0) / n
    out[1, 4] = (4.0 * sn - 3.0 * n * t) / n
    out[2, 2] = c
    out[2, 5] = sn / n
    out[3, 0] = 3.0 * n * sn
    out[3, 3] = c
    out[3, 4] = 2.0 * sn
    out[4, 0] = 6.0 * n * (c - 1.0)
    out[4, 3] = -2.0 * sn
    out[4, 4] = 4.0 * c - 3.0
    out[5, 2] = -n * sn
    out[5, 5] = c


@njit(cache=True)
def build_drift_stack(n, horizon, sample_dt):
    """Position rows of the CW STM at sample times over [0, horizon].

    Returns (N, 3, 6): stack[k] maps [r0, v0] to r(t_k).  The endpoint is
    always included so a full monitor horizon closes the sweep.
    """
    nsamp = int(horizon / sample_dt) + 1
    extra = 1 if (nsamp - 1) * sample_dt < horizon else 0
    out = np.empty((nsamp + extra, 3, 6))
    full = np.empty((6, 6))
    for k in range(nsamp + extra):
        tk = k * sample_dt
        if k == nsamp + extra - 1 and extra == 1:
            tk = horizon
        cw_stm_fill(n, tk, full)
        for i in range(3):
            for j in range(6):
                out[k, i, j] = full[i, j]
    return out


@njit(cache=True)
def drift_min_margin(pv, stack, r_col):
    """min over samples of ||r(t_k)|| - r_col for free drift from pv."""
    best = 1e300
    for k in range(stack.shape[0]):
        x = 0.0
        y = 0.0
        z = 0.0
        for j in range(6):
            x += stack[k, 0, j] * pv[j]
            y += stack[k, 1, j] * pv[j]
            z += stack[k, 2, j] * pv[j]
        d = np.sqrt(x * x + y * y + z * z)
        if d - r_col < best:
            best = d - r_col
    return best


@njit(cache=True)
def drift_clears(pv, stack, r_col):
    """True iff free drift from pv keeps ||r|| > r_col at every sample."""
    rc2 = r_col * r_col
    for k in range(stack.shape[0]):
        x = 0.0
        y = 0.0
        z = 0.0
        for j in range(6):
            x += stack[k, 0, j] * pv[j]
            y += stack[k, 1, j] * pv[j]
            z += stack[k, 2, j] * pv[j]
        if x * x + y * y + z * z <= rc2:
            return False
    return True


# ---------------------------------------------------------------------------
# constraint margins


@njit(cache=True)
def margin_one(cid, s, t, par, cpar, stack):
    """Raw margin h for one constraint id at (state, time).

    The passive-safety margin sweeps the drift stack; pass a zero-length
    stack to skip it (returns +inf).  Angles in radians.
    """
    if cid == CID_SAFE_SEPARATION:
        d = np.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
        return d - cpar[CID_SAFE_SEPARATION, 0]
    if cid == CID_DYNAMIC_SPEED:
        d = np.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
        nv = np.sqrt(s[3] * s[3] + s[4] * s[4] + s[5] * s[5])
        return cpar[CID_DYNAMIC_SPEED, 0] + cpar[CID_DYNAMIC_SPEED, 1] * d - nv
    if cid == CID_KEEP_IN:
        d = np.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
        return cpar[CID_KEEP_IN, 0] - d
    if cid == CID_PASSIVE_SAFETY:
        if stack.shape[0] == 0:
            return np.inf
        return drift_min_margin(s[0:6], stack, cpar[CID_PASSIVE_SAFETY, 0])
    if cid == CID_AXIAL_VELOCITY:
        worst = abs(s[3])
        if abs(s[4]) > worst:
            worst = abs(s[4])
        if abs(s[5]) > worst:
            worst = abs(s[5])
        return cpar[CID_AXIAL_VELOCITY, 0] - worst
    if cid == CID_ATTITUDE_EXCLUSION:
        b = np.empty(3)
        bh = np.empty(3)
        b[0] = par[PBORE]
        b[1] = par[PBORE + 1]
        b[2] = par[PBORE + 2]
        quat_rotate(s[IQ:IQ + 4], b, bh)
        cs = bh[0] * np.cos(par[PN] * t) - bh[1] * np.sin(par[PN] * t)
        if cs > 1.0:
            cs = 1.0
        elif cs < -1.0:
            cs = -1.0
        return math.acos(cs) - cpar[CID_ATTITUDE_EXCLUSION, 0]
    if cid == CID_COMMUNICATION:
        a = np.empty(3)
        ah = np.empty(3)
        a[0] = par[PANT]
        a[1] = par[PANT + 1]
        a[2] = par[PANT + 2]
        quat_rotate(s[IQ:IQ + 4], a, ah)
        cs = -ah[0]  # cosine of the angle to the -x ground direction
        if cs > 1.0:
            cs = 1.0
        elif cs < -1.0:
            cs = -1.0
        return cpar[CID_COMMUNICATION, 0] - math.acos(cs)
    if cid == CID_TEMPERATURE:
        hi = cpar[CID_TEMPERATURE, 1] - s[ITEMP]
        lo = s[ITEMP] - cpar[CID_TEMPERATURE, 0]
        return hi if hi < lo else lo
    if cid == CID_BATTERY:
        return s[IBAT] - cpar[CID_BATTERY, 0]
    if cid == CID_ANGULAR_VELOCITY:
        worst = abs(s[10])
        if abs(s[11]) > worst:
            worst = abs(s[11])
        if abs(s[12]) > worst:
            worst = abs(s[12])
        return cpar[CID_ANGULAR_VELOCITY, 0] - worst
    # fuel limit
    return cpar[CID_FUEL_LIMIT, 0] - s[IFUEL]


@njit(cache=True)
def margins_all(s, t, par, enabled, cpar, stack, out):
    """All 11 margins; disabled constraints get nan (not computed for the
    drift sweep, which is the expensive one)."""
    for cid in range(NCON):
        if not enabled[cid]:
            out[cid] = np.nan
        elif cid == CID_PASSIVE_SAFETY:
            out[cid] = margin_one(cid, s, t, par, cpar, stack)
        else:
            out[cid] = margin_one(cid, s, t, par, cpar, stack[:0])


# ---------------------------------------------------------------------------
# barrier rows
#
# Each row encodes L_f h + L_g h u + kappa(h) >= 0 (or the second-order
# extension psi in place of h) as a . u >= b over u = [thrust, torque].
# Rows are normalized to unit |a|; degenerate rows follow the drop/backup
# rule in build_rows.


@njit(cache=True)
def _thrust_row(q, gx, gy, gz, m, body_frame, arow):
    # write thrust-block coefficients (gradient g over Hill velocity) / m,
    # rotated into the commanded frame when thrust is body-framed
    if body_frame:
        g = np.empty(3)
        gb = np.empty(3)
        g[0] = gx
        g[1] = gy
        g[2] = gz
        quat_rotate_inv(q, g, gb)
        arow[0] = gb[0] / m
        arow[1] = gb[1] / m
        arow[2] = gb[2] / m
    else:
        arow[0] = gx / m
        arow[1] = gy / m
        arow[2] = gz / m
    arow[3] = 0.0
    arow[4] = 0.0
    arow[5] = 0.0


@njit(cache=True)
def build_rows(s, t, par, enabled, modes, cpar, kap, obst, normalize,
               A, bvec, src, hrow):
    """Assemble all active barrier rows at (state, time).

    obst: (D, 6) frozen [r, v] of other deputies (pairwise separation rows).
    With normalize, rows are rescaled to unit |a| (pure conditioning; the
    encoded inequality is unchanged).  Returns (n_rows, trigger): trigger
    >= 0 names a constraint whose row is control-degenerate while violated
    (h <= 0), demanding backup.
    """
    n = par[PN]
    m = par[PMASS]
    body = par[PFRAME] == 1.0
    q = s[IQ:IQ + 4]

    x, y, z = s[0], s[1], s[2]
    vx, vy, vz = s[3], s[4], s[5]
    d = np.sqrt(x * x + y * y + z * z)
    nv = np.sqrt(vx * vx + vy * vy + vz * vz)
    acwx = 3.0 * n * n * x + 2.0 * n * vy
    acwy = -2.0 * n * vx
    acwz = -n * n * z

    nr = 0
    trigger = -1

    # -- safe separation (chief), second order
    if enabled[CID_SAFE_SEPARATION] and modes[CID_SAFE_SEPARATION] == MODE_BARRIER:
        h = d - cpar[CID_SAFE_SEPARATION, 0]
        if d < 1e-9:
            trigger = CID_SAFE_SEPARATION
        else:
            k1 = kap[CID_SAFE_SEPARATION, 0]
            k2 = kap[CID_SAFE_SEPARATION, 1]
            rhx, rhy, rhz = x / d, y / d, z / d
            hdot = rhx * vx + rhy * vy + rhz * vz
            psi = hdot + k1 * h
            lf = (nv * nv - hdot * hdot) / d + rhx * acwx + rhy * acwy + rhz * acwz + k1 * hdot
            _thrust_row(q, rhx, rhy, rhz, m, body, A[nr])
            bvec[nr] = -lf - k2 * psi
            src[nr] = CID_SAFE_SEPARATION
            hrow[nr] = h
            nr += 1
        # pairwise deputy separation, same geometry on relative state
        for ob in range(obst.shape[0]):
            rx = x - obst[ob, 0]
            ry = y - obst[ob, 1]
            rz = z - obst[ob, 2]
            ux = vx - obst[ob, 3]
            uy = vy - obst[ob, 4]
            uz = vz - obst[ob, 5]
            dd = np.sqrt(rx * rx + ry * ry + rz * rz)
            hp = dd - cpar[CID_SAFE_SEPARATION, 1]
            if dd < 1e-9:
                trigger = CID_SAFE_SEPARATION
                continue
            k1 = kap[CID_SAFE_SEPARATION, 0]
            k2 = kap[CID_SAFE_SEPARATION, 1]
            rhx, rhy, rhz = rx / dd, ry / dd, rz / dd
            nv2 = ux * ux + uy * uy + uz * uz
            hdot = rhx * ux + rhy * uy + rhz * uz
            psi = hdot + k1 * hp
            # CW is linear, so relative drift acceleration is CW of the
            # relative state (other deputy treated as ballistic this cycle)
            rax = 3.0 * n * n * rx + 2.0 * n * uy
            ray = -2.0 * n * ux
            raz = -n * n * rz
            lf = (nv2 - hdot * hdot) / dd + rhx * rax + rhy * ray + rhz * raz + k1 * hdot
            _thrust_row(q, rhx, rhy, rhz, m, body, A[nr])
            bvec[nr] = -lf - k2 * psi
            src[nr] = CID_SAFE_SEPARATION
            hrow[nr] = hp
            nr += 1

    # -- dynamic speed, first order
    if enabled[CID_DYNAMIC_SPEED] and modes[CID_DYNAMIC_SPEED] == MODE_BARRIER:
        nu0 = cpar[CID_DYNAMIC_SPEED, 0]
        nu1 = cpar[CID_DYNAMIC_SPEED, 1]
        h = nu0 + nu1 * d - nv
        if nv < 1e-9:
            # |v| not differentiable at rest; h > 0 there, row dropped
            pass
        else:
            k = kap[CID_DYNAMIC_SPEED, 0]
            vhx, vhy, vhz = vx / nv, vy / nv, vz / nv
            rterm = 0.0
            if d > 1e-9:
                rterm = nu1 * (x * vx + y * vy + z * vz) / d
            lf = rterm - (vhx * acwx + vhy * acwy + vhz * acwz)
            _thrust_row(q, -vhx, -vhy, -vhz, m, body, A[nr])
            bvec[nr] = -lf - k * h
            src[nr] = CID_DYNAMIC_SPEED
            hrow[nr] = h
            nr += 1

    # -- keep in, second order
    if enabled[CID_KEEP_IN] and modes[CID_KEEP_IN] == MODE_BARRIER:
        h = cpar[CID_KEEP_IN, 0] - d
        if d < 1e-9:
            pass  # at the origin the radial direction is undefined; h ~ r_max
        else:
            k1 = kap[CID_KEEP_IN, 0]
            k2 = kap[CID_KEEP_IN, 1]
            rhx, rhy, rhz = x / d, y / d, z / d
            rv = rhx * vx + rhy * vy + rhz * vz
            hdot = -rv
            psi = hdot + k1 * h
            lf = -((nv * nv - rv * rv) / d + rhx * acwx + rhy * acwy + rhz * acwz) + k1 * hdot
            _thrust_row(q, -rhx, -rhy, -rhz, m, body, A[nr])
            bvec[nr] = -lf - k2 * psi
            src[nr] = CID_KEEP_IN
            hrow[nr] = h
            nr += 1

    # -- axial velocity, first order, one row per axis
    if enabled[CID_AXIAL_VELOCITY] and modes[CID_AXIAL_VELOCITY] == MODE_BARRIER:
        vmax = cpar[CID_AXIAL_VELOCITY, 0]
        k = kap[CID_AXIAL_VELOCITY, 0]
        for i in range(3):
            vi = s[3 + i]
            sg = 0.0
            if vi > 0.0:
                sg = 1.0
            elif vi < 0.0:
                sg = -1.0
            h = vmax - abs(vi)
            if sg == 0.0:
                continue  # subgradient 0 at the kink; h = vmax > 0
            ai = acwx
            if i == 1:
                ai = acwy
            elif i == 2:
                ai = acwz
            gx = -sg if i == 0 else 0.0
            gy = -sg if i == 1 else 0.0
            gz = -sg if i == 2 else 0.0
            _thrust_row(q, gx, gy, gz, m, body, A[nr])
            bvec[nr] = sg * ai - k * h
            src[nr] = CID_AXIAL_VELOCITY
            hrow[nr] = h
            nr += 1

    # -- attitude cones, second order over torque.  Rows use the cosine
    # form (same safe set as the angle margin, smooth in q): for the
    # exclusion cone h_c = cos(theta_ez) - c, for the comm cone
    # h_c = c - cos(theta_comm), with c the axis-target cosine.
    for which in range(2):
        cid = CID_ATTITUDE_EXCLUSION if which == 0 else CID_COMMUNICATION
        if not (enabled[cid] and modes[cid] == MODE_BARRIER):
            continue
        axis = np.empty(3)
        if cid == CID_ATTITUDE_EXCLUSION:
            axis[0] = par[PBORE]
            axis[1] = par[PBORE + 1]
            axis[2] = par[PBORE + 2]
        else:
            axis[0] = par[PANT]
            axis[1] = par[PANT + 1]
            axis[2] = par[PANT + 2]

        # target direction and its Hill-frame rates
        tgt = np.empty(3)
        tgtd = np.empty(3)
        tgtdd = np.empty(3)
        if cid == CID_ATTITUDE_EXCLUSION:
            sun_direction_at(t, n, tgt)
            tgtd[0] = -n * np.sin(n * t)
            tgtd[1] = -n * np.cos(n * t)
            tgtd[2] = 0.0
            tgtdd[0] = -n * n * tgt[0]
            tgtdd[1] = -n * n * tgt[1]
            tgtdd[2] = 0.0
        else:
            tgt[0] = -1.0
            tgt[1] = 0.0
            tgt[2] = 0.0
            tgtd[0] = 0.0
            tgtd[1] = 0.0
            tgtd[2] = 0.0
            tgtdd[0] = 0.0
            tgtdd[1] = 0.0
            tgtdd[2] = 0.0

        e = np.empty(3)
        ed0 = np.empty(3)
        edd0 = np.empty(3)
        quat_rotate_inv(q, tgt, e)       # target in body axes
        quat_rotate_inv(q, tgtd, ed0)    # R^T tgt_dot
        quat_rotate_inv(q, tgtdd, edd0)  # R^T tgt_ddot

        wx, wy, wz = s[IW], s[IW + 1], s[IW + 2]
        c = axis[0] * e[0] + axis[1] * e[1] + axis[2] * e[2]

        # g0 = axis x e; cdot = w . g0 + axis . (R^T tgt_dot)
        g0x = axis[1] * e[2] - axis[2] * e[1]
        g0y = axis[2] * e[0] - axis[0] * e[2]
        g0z = axis[0] * e[1] - axis[1] * e[0]
        m0 = axis[0] * ed0[0] + axis[1] * ed0[1] + axis[2] * ed0[2]
        cdot = wx * g0x + wy * g0y + wz * g0z + m0

        # drift pieces of cddot
        # e_dot = R^T tgt_dot - w x e
        edx = ed0[0] - (wy * e[2] - wz * e[1])
        edy = ed0[1] - (wz * e[0] - wx * e[2])
        edz = ed0[2] - (wx * e[1] - wy * e[0])
        # g0_dot = axis x e_dot
        gdx = axis[1] * edz - axis[2] * edy
        gdy = axis[2] * edx - axis[0] * edz
        gdz = axis[0] * edy - axis[1] * edx
        # m0_dot = axis . (R^T tgt_ddot - w x (R^T tgt_dot))
        cxx = wy * ed0[2] - wz * ed0[1]
        cxy = wz * ed0[0] - wx * ed0[2]
        cxz = wx * ed0[1] - wy * ed0[0]
        m0d = axis[0] * (edd0[0] - cxx) + axis[1] * (edd0[1] - cxy) + axis[2] * (edd0[2] - cxz)
        # free angular acceleration wdot_f = I^-1 (-(w x I w))
        iwx = par[PIN + 0] * wx + par[PIN + 1] * wy + par[PIN + 2] * wz
        iwy = par[PIN + 3] * wx + par[PIN + 4] * wy + par[PIN + 5] * wz
        iwz = par[PIN + 6] * wx + par[PIN + 7] * wy + par[PIN + 8] * wz
        gx_ = -(wy * iwz - wz * iwy)
        gy_ = -(wz * iwx - wx * iwz)
        gz_ = -(wx * iwy - wy * iwx)
        wfx = par[PINV + 0] * gx_ + par[PINV + 1] * gy_ + par[PINV + 2] * gz_
        wfy = par[PINV + 3] * gx_ + par[PINV + 4] * gy_ + par[PINV + 5] * gz_
        wfz = par[PINV + 6] * gx_ + par[PINV + 7] * gy_ + par[PINV + 8] * gz_
        cdd_f = wfx * g0x + wfy * g0y + wfz * g0z + wx * gdx + wy * gdy + wz * gdz + m0d

        # I^-1 g0: torque sensitivity of cddot
        ig0x = par[PINV + 0] * g0x + par[PINV + 1] * g0y + par[PINV + 2] * g0z
        ig0y = par[PINV + 3] * g0x + par[PINV + 4] * g0y + par[PINV + 5] * g0z
        ig0z = par[PINV + 6] * g0x + par[PINV + 7] * g0y + par[PINV + 8] * g0z

        k1 = kap[cid, 0]
        k2 = kap[cid, 1]
        if cid == CID_ATTITUDE_EXCLUSION:
            hc = np.cos(cpar[cid, 0]) - c
            psi = -cdot + k1 * hc
            A[nr, 0] = 0.0
            A[nr, 1] = 0.0
            A[nr, 2] = 0.0
            A[nr, 3] = -ig0x
            A[nr, 4] = -ig0y
            A[nr, 5] = -ig0z
            bvec[nr] = cdd_f + k1 * cdot - k2 * psi
            hcur = hc
        else:
            hc = c - np.cos(cpar[cid, 0])
            psi = cdot + k1 * hc
            A[nr, 0] = 0.0
            A[nr, 1] = 0.0
            A[nr, 2] = 0.0
            A[nr, 3] = ig0x
            A[nr, 4] = ig0y
            A[nr, 5] = ig0z
            bvec[nr] = -cdd_f - k1 * cdot - k2 * psi
            hcur = hc
        # degenerate when axis is (anti)parallel to target
        nrm = np.sqrt(A[nr, 3] ** 2 + A[nr, 4] ** 2 + A[nr, 5] ** 2)
        if nrm < DEGEN_TOL:
            if hcur <= 0.0:
                trigger = cid
            continue
        src[nr] = cid
        hrow[nr] = hcur
        nr += 1

    # -- temperature band and battery floor: control never appears in their
    # dynamics, so the rows are degenerate by construction (dropped while
    # satisfied, backup otherwise)
    if enabled[CID_TEMPERATURE] and modes[CID_TEMPERATURE] == MODE_BARRIER:
        hi = cpar[CID_TEMPERATURE, 1] - s[ITEMP]
        lo = s[ITEMP] - cpar[CID_TEMPERATURE, 0]
        if hi <= 0.0 or lo <= 0.0:
            trigger = CID_TEMPERATURE
    if enabled[CID_BATTERY] and modes[CID_BATTERY] == MODE_BARRIER:
        if s[IBAT] - cpar[CID_BATTERY, 0] <= 0.0:
            trigger = CID_BATTERY

    # -- angular rate box, first order over torque, one row per axis
    if enabled[CID_ANGULAR_VELOCITY] and modes[CID_ANGULAR_VELOCITY] == MODE_BARRIER:
        wmax = cpar[CID_ANGULAR_VELOCITY, 0]
        k = kap[CID_ANGULAR_VELOCITY, 0]
        wx, wy, wz = s[IW], s[IW + 1], s[IW + 2]
        iwx = par[PIN + 0] * wx + par[PIN + 1] * wy + par[PIN + 2] * wz
        iwy = par[PIN + 3] * wx + par[PIN + 4] * wy + par[PIN + 5] * wz
        iwz = par[PIN + 6] * wx + par[PIN + 7] * wy + par[PIN + 8] * wz
        gx_ = -(wy * iwz - wz * iwy)
        gy_ = -(wz * iwx - wx * iwz)
        gz_ = -(wx * iwy - wy * iwx)
        wfx = par[PINV + 0] * gx_ + par[PINV + 1] * gy_ + par[PINV + 2] * gz_
        wfy = par[PINV + 3] * gx_ + par[PINV + 4] * gy_ + par[PINV + 5] * gz_
        wfz = par[PINV + 6] * gx_ + par[PINV + 7] * gy_ + par[PINV + 8] * gz_
        for i in range(3):
            wi = s[IW + i]
            sg = 0.0
            if wi > 0.0:
                sg = 1.0
            elif wi < 0.0:
                sg = -1.0
            h = wmax - abs(wi)
            if sg == 0.0:
                continue
            wfi = wfx
            if i == 1:
                wfi = wfy
            elif i == 2:
                wfi = wfz
            A[nr, 0] = 0.0
            A[nr, 1] = 0.0
            A[nr, 2] = 0.0
            A[nr, 3] = -sg * par[PINV + 3 * i + 0]
            A[nr, 4] = -sg * par[PINV + 3 * i + 1]
            A[nr, 5] = -sg * par[PINV + 3 * i + 2]
            bvec[nr] = sg * wfi - k * h
            src[nr] = CID_ANGULAR_VELOCITY
            hrow[nr] = h
            nr += 1

    # degenerate rows follow the drop rule; optional unit-norm rescale
    out_n = 0
    for i in range(nr):
        na = 0.0
        for j in range(6):
            na += A[i, j] * A[i, j]
        na = np.sqrt(na)
        if na < DEGEN_TOL:
            if hrow[i] <= 0.0:
                trigger = src[i]
            continue
        if not normalize:
            na = 1.0
        for j in range(6):
            A[out_n, j] = A[i, j] / na
        bvec[out_n] = bvec[i] / na
        src[out_n] = src[i]
        hrow[out_n] = hrow[i]
        out_n += 1

    return out_n, trigger


# ---------------------------------------------------------------------------
# dual active-set QP:  min |x - x0|^2  s.t.  G x >= d
#
# Goldfarb-Idnani structure specialized to an identity Hessian: start at the
# unconstrained minimizer, repeatedly add the most-violated row (ties broken
# by lowest index), taking primal steps in the null-space direction and dual
# steps that drop blocking rows.  Every working set stays linearly
# independent, so the small KKT solves are well-posed.


@njit(cache=True)
def solve_small(M, rhs):
    """Gaussian elimination with partial pivoting, destructive on M.

    The working-set Gram matrices are at most 6 x 6; a fixed-order
    elimination keeps both backends on the exact same arithmetic, where
    a library solve would dispatch to whatever BLAS each backend links.
    """
    n = rhs.shape[0]
    x = rhs.copy()
    for col in range(n):
        piv = col
        best = abs(M[col, col])
        for row in range(col + 1, n):
            mag = abs(M[row, col])
            if mag > best:
                best = mag
                piv = row
        if piv != col:
            for j in range(col, n):
                tmp = M[col, j]
                M[col, j] = M[piv, j]
                M[piv, j] = tmp
            tmp = x[col]
            x[col] = x[piv]
            x[piv] = tmp
        diag = M[col, col]
        for row in range(col + 1, n):
            f = M[row, col] / diag
            if f != 0.0:
                for j in range(col + 1, n):
                    M[row, j] -= f * M[col, j]
                x[row] -= f * x[col]
    for col in range(n - 1, -1, -1):
        acc = x[col]
        for j in range(col + 1, n):
            acc -= M[col, j] * x[j]
        x[col] = acc / M[col, col]
    return x


@njit(cache=True)
def gi_solve(x0, G, d, cap, work_idx, work_lam):
    """Returns (x, status, nact, iters); active row indices and multipliers
    are written into work_idx / work_lam (first nact entries)."""
    k = x0.shape[0]
    mrows = G.shape[0]
    x = x0.copy()
    nact = 0
    iters = 0

    while True:
        # most violated row; ties keep the lowest index
        worst = -FEAS_TOL
        p = -1
        for i in range(mrows):
            ri = -d[i]
            for j in range(k):
                ri += G[i, j] * x[j]
            if ri < worst:
                worst = ri
                p = i
        if p < 0:
            return x, QP_OPTIMAL, nact, iters

        lam_p = 0.0
        while True:
            iters += 1
            if iters > cap:
                return x, QP_STALL, nact, iters

            # z = projection of g_p onto the null space of the working set,
            # r = (Gw Gw^T)^-1 Gw g_p
            gp = G[p]
            if nact == 0:
                z = gp.copy()
                r = np.empty(0)
            else:
                Gw = np.empty((nact, k))
                for a in range(nact):
                    row = work_idx[a]
                    for j in range(k):
                        Gw[a, j] = G[row, j]
                M = np.empty((nact, nact))
                rhs = np.empty(nact)
                for a in range(nact):
                    dv = 0.0
                    for j in range(k):
                        dv += Gw[a, j] * gp[j]
                    rhs[a] = dv
                    for b in range(a + 1):
                        gram = 0.0
                        for j in range(k):
                            gram += Gw[a, j] * Gw[b, j]
                        M[a, b] = gram
                        M[b, a] = gram
                r = solve_small(M, rhs)
                z = gp.copy()
                for a in range(nact):
                    for j in range(k):
                        z[j] -= r[a] * Gw[a, j]

            zz = 0.0
            for j in range(k):
                zz += z[j] * z[j]

            if zz > 1e-18:
                gpx = 0.0
                for j in range(k):
                    gpx += gp[j] * x[j]
                t_full = (d[p] - gpx) / zz
                # blocking dual step
                t_dual = np.inf
                qdrop = -1
                for a in range(nact):
                    if r[a] > 1e-14:
                        tq = work_lam[a] / r[a]
                        if tq < t_dual:
                            t_dual = tq
                            qdrop = a
                if t_full <= t_dual:
                    for j in range(k):
                        x[j] += t_full * z[j]
                    for a in range(nact):
                        work_lam[a] -= t_full * r[a]
                    lam_p += t_full
                    work_idx[nact] = p
                    work_lam[nact] = lam_p
                    nact += 1
                    break
                for j in range(k):
                    x[j] += t_dual * z[j]
                for a in range(nact):
                    work_lam[a] -= t_dual * r[a]
                lam_p += t_dual
                for a in range(qdrop, nact - 1):
                    work_idx[a] = work_idx[a + 1]
                    work_lam[a] = work_lam[a + 1]
                nact -= 1
            else:
                # g_p lies in the span of the working set: dual-only step
                t_dual = np.inf
                qdrop = -1
                for a in range(nact):
                    if r[a] > 1e-14:
                        tq = work_lam[a] / r[a]
                        if tq < t_dual:
                            t_dual = tq
                            qdrop = a
                if qdrop < 0:
                    return x, QP_INFEASIBLE, nact, iters
                for a in range(nact):
                    work_lam[a] -= t_dual * r[a]
                lam_p += t_dual
                for a in range(qdrop, nact - 1):
                    work_idx[a] = work_idx[a + 1]
                    work_lam[a] = work_lam[a + 1]
                nact -= 1


@njit(cache=True)
def rows_feasible(G, d, x, nrows):
    for i in range(nrows):
        ri = -d[i]
        for j in range(x.shape[0]):
            ri += G[i, j] * x[j]
        if ri < -FEAS_TOL:
            return False
    return True


@njit(cache=True)
def solve_box_qp(u_des, A, bvec, nrows, lower, upper, cap, work_idx, work_lam):
    """min |u - u_des|^2 s.t. A u >= b and box; box appended as rows.

    Returns (u, status, nact_rows, iters) where work_idx holds active
    CONSTRAINT row indices only (box rows filtered out).
    """
    k = u_des.shape[0]
    mtot = nrows + 2 * k
    G = np.empty((mtot, k))
    dd = np.empty(mtot)
    for i in range(nrows):
        for j in range(k):
            G[i, j] = A[i, j]
        dd[i] = bvec[i]
    for j in range(k):
        for jj in range(k):
            G[nrows + j, jj] = 0.0
            G[nrows + k + j, jj] = 0.0
        G[nrows + j, j] = 1.0
        dd[nrows + j] = lower[j]
        G[nrows + k + j, j] = -1.0
        dd[nrows + k + j] = -upper[j]

    x, status, nact, iters = gi_solve(u_des, G, dd, cap, work_idx, work_lam)
    # keep only constraint rows in the reported active set
    keep = 0
    for a in range(nact):
        if work_idx[a] < nrows:
            work_idx[keep] = work_idx[a]
            work_lam[keep] = work_lam[a]
            keep += 1
    return x, status, keep, iters


@njit(cache=True)
def solve_relaxed_qp(u_des, A, bvec, nrows, lower, upper, weights, hard,
                     cap, work_idx, work_lam, slacks):
    """Priority-weighted slack relaxation.

    min |u - u_des|^2 + sum w_i s_i^2 with soft rows a.u + s_i >= b,
    s_i >= 0, hard rows unrelaxed.  Solved in scaled slack variables
    st_i = sqrt(w_i) s_i, which keeps the Hessian the identity.
    Returns (u, status, nact_rows, iters, max_slack).
    """
    k = u_des.shape[0]
    nsoft = 0
    for i in range(nrows):
        if not hard[i]:
            nsoft += 1
    kx = k + nsoft
    mtot = nrows + nsoft + 2 * k
    G = np.zeros((mtot, kx))
    dd = np.empty(mtot)
    x0 = np.zeros(kx)
    for j in range(k):
        x0[j] = u_des[j]

    scol = np.full(nrows, -1, np.int64)
    sj = 0
    for i in range(nrows):
        for j in range(k):
            G[i, j] = A[i, j]
        dd[i] = bvec[i]
        if not hard[i]:
            G[i, k + sj] = 1.0 / np.sqrt(weights[i])
            scol[i] = sj
            sj += 1
    for j in range(nsoft):
        G[nrows + j, k + j] = 1.0
        dd[nrows + j] = 0.0
    base = nrows + nsoft
    for j in range(k):
        G[base + j, j] = 1.0
        dd[base + j] = lower[j]
        G[base + k + j, j] = -1.0
        dd[base + k + j] = -upper[j]

    x, status, nact, iters = gi_solve(x0, G, dd, cap, work_idx, work_lam)

    u = x[:k].copy()
    max_slack = 0.0
    for i in range(nrows):
        slacks[i] = 0.0
        if scol[i] >= 0:
            sv = x[k + scol[i]] / np.sqrt(weights[i])
            if sv < 0.0:
                sv = 0.0
            slacks[i] = sv
            if sv > max_slack:
                max_slack = sv
    keep = 0
    for a in range(nact):
        if work_idx[a] < nrows:
            work_idx[keep] = work_idx[a]
            work_lam[keep] = work_lam[a]
            keep += 1
    if status == QP_OPTIMAL and max_slack > FEAS_TOL:
        status = QP_RELAXED
    return u, status, keep, iters, max_slack


# ---------------------------------------------------------------------------
# backup controllers and switching monitors


@njit(cache=True)
def backup_command(s, par, kind, gains, out):
    """Backup command: eNMT insertion, zero-thrust coast, or detumble.

    eNMT insertion drives v_y + 2 n x to zero (kills the secular drift
    term) and damps v_x; the z harmonic is naturally periodic and is left
    alone.  All backups carry a gentle rate-damping torque.
    """
    n = par[PN]
    m = par[PMASS]
    fmax = par[PFMAX]
    tmax = par[PTMAX]
    for j in range(6):
        out[j] = 0.0
    if kind == BK_ENMT:
        ax = -gains[0] * s[3]
        ay = -gains[1] * (s[4] + 2.0 * n * s[0])
        fx = m * ax
        fy = m * ay
        if fx > fmax:
            fx = fmax
        elif fx < -fmax:
            fx = -fmax
        if fy > fmax:
            fy = fmax
        elif fy < -fmax:
            fy = -fmax
        if par[PFRAME] == 1.0:
            fh = np.empty(3)
            fb = np.empty(3)
            fh[0] = fx
            fh[1] = fy
            fh[2] = 0.0
            quat_rotate_inv(s[IQ:IQ + 4], fh, fb)
            # re-saturate after the frame change
            for j in range(3):
                v = fb[j]
                if v > fmax:
                    v = fmax
                elif v < -fmax:
                    v = -fmax
                out[j] = v
        else:
            out[0] = fx
            out[1] = fy
    # rate damping for every backup kind
    for i in range(3):
        tv = -gains[2] * s[IW + i]
        if tv > tmax:
            tv = tmax
        elif tv < -tmax:
            tv = -tmax
        out[3 + i] = tv


@njit(cache=True)
def fuel_monitor_ok(fuel_used, budget, hysteresis):
    # trips (returns False) at the hysteresis margin below the budget
    return fuel_used < budget * (1.0 - hysteresis)


@njit(cache=True)
def monitor_rk4_ok(s, t, u_des, par, enabled, modes, cpar,
                   ctrl_dt, nsub, bk_kind, bk_gains,
                   horizon, sample_dt, step_dt):
    """Implicit switching monitor, RK4 engine.

    One control step under u_des, then the backup flow; true iff every
    enabled constraint (other than the drift sweep itself, checked by its
    own monitor) keeps h >= 0 at every sample.  horizon = 0 degenerates to
    an instantaneous margin check.
    """
    scr = np.empty((5, NSTATE))
    cur = s.copy()
    nxt = np.empty(NSTATE)
    ub = np.empty(6)
    empty_stack = np.empty((0, 3, 6))

    tt = t
    if horizon > 0.0:
        # the commanded step being vetted
        sub = ctrl_dt / nsub
        for _ in range(nsub):
            rk4_step(cur, tt, u_des, sub, par, nxt, scr)
            for i in range(NSTATE):
                cur[i] = nxt[i]
            tt += sub

    # sample 0 checks the post-step (or current, for horizon 0) state;
    # the horizon endpoint is always checked even when it falls between
    # regular samples
    elapsed = 0.0
    next_sample = 0.0
    while True:
        at_end = elapsed >= horizon
        if at_end or elapsed >= next_sample - 1e-9:
            for cid in range(NCON):
                if not enabled[cid] or cid == CID_PASSIVE_SAFETY:
                    continue
                h = margin_one(cid, cur, tt, par, cpar, empty_stack)
                if h < 0.0:
                    return False
            next_sample += sample_dt
        if at_end:
            return True
        step = step_dt
        if elapsed + step > horizon:
            step = horizon - elapsed
        backup_command(cur, par, bk_kind, bk_gains, ub)
        rk4_step(cur, tt, ub, step, par, nxt, scr)
        for i in range(NSTATE):
            cur[i] = nxt[i]
        tt += step
        elapsed += step


# ---------------------------------------------------------------------------
# policies


@njit(cache=True)
def dock_command(s, gains, par, out):
    """PD toward the origin with a speed-limit-aware reference velocity."""
    kp, kv, frac, nu0, nu1 = gains[0], gains[1], gains[2], gains[3], gains[4]
    n = par[PN]
    m = par[PMASS]
    fmax = par[PFMAX]
    x, y, z = s[0], s[1], s[2]
    vx, vy, vz = s[3], s[4], s[5]
    d = np.sqrt(x * x + y * y + z * z)
    vmag = kp * d
    cap = frac * (nu0 + nu1 * d)
    if vmag > cap:
        vmag = cap
    if d > 1e-9:
        vrx = -vmag * x / d
        vry = -vmag * y / d
        vrz = -vmag * z / d
    else:
        vrx = 0.0
        vry = 0.0
        vrz = 0.0
    acwx = 3.0 * n * n * x + 2.0 * n * vy
    acwy = -2.0 * n * vx
    acwz = -n * n * z
    fx = m * (kv * (vrx - vx) - acwx)
    fy = m * (kv * (vry - vy) - acwy)
    fz = m * (kv * (vrz - vz) - acwz)
    out[0] = min(max(fx, -fmax), fmax)
    out[1] = min(max(fy, -fmax), fmax)
    out[2] = min(max(fz, -fmax), fmax)
    out[3] = 0.0
    out[4] = 0.0
    out[5] = 0.0


@njit(cache=True)
def pick_inspect_target(s, t, par, points, done):
    """Index of the nearest (by direction cosine) uninspected point,
    preferring currently illuminated ones; -1 when all are done."""
    n = par[PN]
    sx = np.cos(n * t)
    sy = -np.sin(n * t)
    x, y, z = s[0], s[1], s[2]
    d = np.sqrt(x * x + y * y + z * z)
    if d < 1e-9:
        d = 1.0
    rhx, rhy, rhz = x / d, y / d, z / d
    best_lit = -1
    best_lit_c = -2.0
    best_any = -1
    best_any_c = -2.0
    for p in range(points.shape[0]):
        if done[p]:
            continue
        cos_dep = points[p, 0] * rhx + points[p, 1] * rhy + points[p, 2] * rhz
        lit = points[p, 0] * sx + points[p, 1] * sy > 0.0
        if cos_dep > best_any_c:
            best_any_c = cos_dep
            best_any = p
        if lit and cos_dep > best_lit_c:
            best_lit_c = cos_dep
            best_lit = p
    if best_lit >= 0:
        return best_lit
    return best_any


@njit(cache=True)
def inspect_command(s, t, par, points, done, gains, standoff, out):
    """PD toward the standoff above the chosen inspection point."""
    kp, kv, frac, nu0, nu1 = gains[0], gains[1], gains[2], gains[3], gains[4]
    tgt = pick_inspect_target(s, t, par, points, done)
    if tgt < 0:
        for j in range(6):
            out[j] = 0.0
        return
    n = par[PN]
    m = par[PMASS]
    fmax = par[PFMAX]
    x, y, z = s[0], s[1], s[2]
    vx, vy, vz = s[3], s[4], s[5]
    ex = x - standoff * points[tgt, 0]
    ey = y - standoff * points[tgt, 1]
    ez = z - standoff * points[tgt, 2]
    en = np.sqrt(ex * ex + ey * ey + ez * ez)
    d = np.sqrt(x * x + y * y + z * z)
    vmag = kp * en
    cap = frac * (nu0 + nu1 * d)
    if vmag > cap:
        vmag = cap
    if en > 1e-9:
        vrx = -vmag * ex / en
        vry = -vmag * ey / en
        vrz = -vmag * ez / en
    else:
        vrx = 0.0
        vry = 0.0
        vrz = 0.0
    acwx = 3.0 * n * n * x + 2.0 * n * vy
    acwy = -2.0 * n * vx
    acwz = -n * n * z
    fx = m * (kv * (vrx - vx) - acwx)
    fy = m * (kv * (vry - vy) - acwy)
    fz = m * (kv * (vrz - vz) - acwz)
    out[0] = min(max(fx, -fmax), fmax)
    out[1] = min(max(fy, -fmax), fmax)
    out[2] = min(max(fz, -fmax), fmax)
    out[3] = 0.0
    out[4] = 0.0
    out[5] = 0.0


@njit(cache=True)
def build_observation_into(s, t, par, frame, points, done, out):
    """Observation vector (length 10); see control-policies docs for the
    component order.  The remaining-point slot is zero when no inspection
    target exists."""
    n = par[PN]
    x, y, z = s[0], s[1], s[2]
    vx, vy, vz = s[3], s[4], s[5]
    sun_angle = math.atan2(-np.sin(n * t), np.cos(n * t))
    px = 0.0
    py = 0.0
    pz = 0.0
    if points.shape[0] > 0:
        tgt = pick_inspect_target(s, t, par, points, done)
        if tgt >= 0:
            px = points[tgt, 0]
            py = points[tgt, 1]
            pz = points[tgt, 2]
    if frame == OBS_HILL:
        out[0] = x / 1000.0
        out[1] = y / 1000.0
        out[2] = z / 1000.0
        out[3] = vx
        out[4] = vy
        out[5] = vz
    else:
        rho = np.sqrt(x * x + y * y + z * z)
        az = math.atan2(y, x)
        sel = z / rho if rho > 1e-12 else 0.0
        if sel > 1.0:
            sel = 1.0
        elif sel < -1.0:
            sel = -1.0
        el = math.asin(sel)
        # local orthonormal basis (radial, azimuthal, elevation)
        if rho > 1e-12:
            erx, ery, erz = x / rho, y / rho, z / rho
        else:
            erx, ery, erz = 1.0, 0.0, 0.0
        eax = -np.sin(az)
        eay = np.cos(az)
        eaz = 0.0
        eex = eay * erz - eaz * ery
        eey = eaz * erx - eax * erz
        eez = eax * ery - eay * erx
        out[0] = rho / 1000.0
        out[1] = az
        out[2] = el
        out[3] = vx * erx + vy * ery + vz * erz
        out[4] = vx * eax + vy * eay + vz * eaz
        out[5] = vx * eex + vy * eey + vz * eez
    out[6] = sun_angle
    out[7] = px
    out[8] = py
    out[9] = pz


@njit(cache=True)
def mlp_forward(obs, dims, wflat, bflat, scale, table, fmax, tmax, out, buf_a, buf_b):
    """Feed-forward pass: tanh hidden layers, linear output.

    With a nonempty action table the output is treated as logits and the
    argmax row of the table is the command; otherwise outputs are scaled
    per component and clipped to the box.
    """
    nlayers = dims.shape[0] - 1
    nin = dims[0]
    for i in range(nin):
        buf_a[i] = obs[i]
    off_w = 0
    off_b = 0
    for layer in range(nlayers):
        ni = dims[layer]
        no = dims[layer + 1]
        for j in range(no):
            acc = bflat[off_b + j]
            for i in range(ni):
                acc += wflat[off_w + j * ni + i] * buf_a[i]
            if layer < nlayers - 1:
                buf_b[j] = np.tanh(acc)
            else:
                buf_b[j] = acc
        off_w += ni * no
        off_b += no
        for j in range(no):
            buf_a[j] = buf_b[j]
    nout = dims[nlayers]

    if table.shape[0] > 0:
        best = 0
        for j in range(1, nout):
            if buf_a[j] > buf_a[best]:
                best = j
        for j in range(6):
            out[j] = table[best, j]
        return

    for j in range(6):
        out[j] = 0.0
    for j in range(nout):
        v = buf_a[j] * scale[j]
        lim = fmax if j < 3 else tmax
        if v > lim:
            v = lim
        elif v < -lim:
            v = -lim
        out[j] = v


# ---------------------------------------------------------------------------
# filter pipeline, one control cycle


@njit(cache=True)
def pipeline_decide(s, t, u_des, par, enabled, modes, cpar, kap,
                    hard_cid, weight_cid, stack, obst,
                    ctrl_dt, nsub, override_active, bk_gains,
                    out_u, out_margins,
                    A, bvec, src, hrow, work_idx, work_lam, slacks, scr):
    """Run the full assurance pipeline for one control cycle (no propagation).

    Returns (mode, cause_bits, qp_status, qp_iters, nact, backup_kind).
    out_u gets the actuated command and out_margins the current margins
    (nan where disabled).  After return, the first nact entries of work_idx
    hold the source constraint ids of the active rows.
    """
    margins_all(s, t, par, enabled, cpar, stack, out_margins)
    fmax = par[PFMAX]
    tmax = par[PTMAX]
    cause = 0
    qp_status = -1
    qp_iters = 0
    nact = 0
    bk = BK_NONE

    if override_active:
        mode = FM_OVERRIDE
        for j in range(6):
            lim = fmax if j < 3 else tmax
            v = u_des[j]
            if v > lim:
                v = lim
            elif v < -lim:
                v = -lim
            out_u[j] = v
        for cid in range(NCON):
            if enabled[cid] and out_margins[cid] == out_margins[cid] and out_margins[cid] < 0.0:
                cause |= 1 << cid
    else:
        want_backup = False
        psafe_bad = False
        if enabled[CID_FUEL_LIMIT] and modes[CID_FUEL_LIMIT] == MODE_SWITCHING:
            if not fuel_monitor_ok(s[IFUEL], cpar[CID_FUEL_LIMIT, 0], cpar[CID_FUEL_LIMIT, 1]):
                want_backup = True
                cause |= 1 << CID_FUEL_LIMIT
        if enabled[CID_PASSIVE_SAFETY] and modes[CID_PASSIVE_SAFETY] == MODE_SWITCHING:
            # vet one step under u_des, then require the drift to clear
            tmp = s.copy()
            nxt = np.empty(NSTATE)
            tt = t
            sub = ctrl_dt / nsub
            for _ in range(nsub):
                rk4_step(tmp, tt, u_des, sub, par, nxt, scr)
                for i in range(NSTATE):
                    tmp[i] = nxt[i]
                tt += sub
            if not drift_clears(tmp[0:6], stack, cpar[CID_PASSIVE_SAFETY, 0]):
                want_backup = True
                psafe_bad = True
                cause |= 1 << CID_PASSIVE_SAFETY

        if want_backup:
            mode = FM_BACKUP
            if psafe_bad:
                bk = BK_ENMT
            elif drift_clears(s[0:6], stack, cpar[CID_PASSIVE_SAFETY, 0]):
                bk = BK_COAST
            else:
                bk = BK_ENMT
            backup_command(s, par, bk, bk_gains, out_u)
        else:
            nrows, trig = build_rows(s, t, par, enabled, modes, cpar, kap,
                                     obst, True, A, bvec, src, hrow)
            if trig >= 0:
                mode = FM_BACKUP
                bk = BK_ENMT
                cause |= 1 << trig
                backup_command(s, par, bk, bk_gains, out_u)
            else:
                # pass-through fast path: u_des already feasible
                ok = rows_feasible(A, bvec, u_des, nrows)
                if ok:
                    for j in range(6):
                        lim = fmax if j < 3 else tmax
                        if u_des[j] < -lim - FEAS_TOL or u_des[j] > lim + FEAS_TOL:
                            ok = False
                if ok:
                    mode = FM_PASS
                    qp_status = QP_OPTIMAL
                    for j in range(6):
                        out_u[j] = u_des[j]
                else:
                    lower = np.empty(6)
                    upper = np.empty(6)
                    for j in range(6):
                        lim = fmax if j < 3 else tmax
                        lower[j] = -lim
                        upper[j] = lim
                    cap = 100 * 6
                    u, st, na, it = solve_box_qp(u_des, A, bvec, nrows, lower,
                                                 upper, cap, work_idx, work_lam)
                    qp_status = st
                    qp_iters = it
                    if st == QP_OPTIMAL:
                        mode = FM_QP
                        nact = na
                        for j in range(6):
                            out_u[j] = u[j]
                        for a in range(na):
                            cause |= 1 << src[work_idx[a]]
                    elif st == QP_STALL:
                        mode = FM_BACKUP
                        bk = BK_ENMT
                        backup_command(s, par, bk, bk_gains, out_u)
                    else:
                        # infeasible: relax soft rows by priority weight
                        wrows = np.empty(MAX_ROWS)
                        hrows = np.empty(MAX_ROWS, np.bool_)
                        for i in range(nrows):
                            wrows[i] = weight_cid[src[i]]
                            hrows[i] = hard_cid[src[i]]
                        cap2 = 100 * (6 + nrows)
                        u, st, na, it, mslack = solve_relaxed_qp(
                            u_des, A, bvec, nrows, lower, upper,
                            wrows[:nrows], hrows[:nrows], cap2,
                            work_idx, work_lam, slacks)
                        qp_status = st
                        qp_iters += it
                        if st == QP_OPTIMAL or st == QP_RELAXED:
                            mode = FM_QP
                            nact = na
                            for j in range(6):
                                out_u[j] = u[j]
                            for a in range(na):
                                cause |= 1 << src[work_idx[a]]
                            for i in range(nrows):
                                if slacks[i] > FEAS_TOL:
                                    cause |= 1 << src[i]
                        else:
                            mode = FM_BACKUP
                            bk = BK_ENMT
                            backup_command(s, par, bk, bk_gains, out_u)
                            for i in range(nrows):
                                if hrows[i]:
                                    cause |= 1 << src[i]

    # map active work_idx entries to source ids for the caller
    for a in range(nact):
        work_idx[a] = src[work_idx[a]]

    return mode, cause, qp_status, qp_iters, nact, bk


@njit(cache=True)
def pipeline_cycle(s, t, u_des, par, enabled, modes, cpar, kap,
                   hard_cid, weight_cid, stack, obst,
                   ctrl_dt, nsub, override_active, bk_gains,
                   out_s, out_u, out_margins,
                   A, bvec, src, hrow, work_idx, work_lam, slacks, scr):
    """pipeline_decide followed by zero-order-hold propagation over the
    control cycle; out_s gets the post-cycle state."""
    mode, cause, qp_status, qp_iters, nact, bk = pipeline_decide(
        s, t, u_des, par, enabled, modes, cpar, kap,
        hard_cid, weight_cid, stack, obst,
        ctrl_dt, nsub, override_active, bk_gains,
        out_u, out_margins,
        A, bvec, src, hrow, work_idx, work_lam, slacks, scr)

    tmp = s.copy()
    nxt = np.empty(NSTATE)
    tt = t
    sub = ctrl_dt / nsub
    for _ in range(nsub):
        rk4_step(tmp, tt, out_u, sub, par, nxt, scr)
        for i in range(NSTATE):
            tmp[i] = nxt[i]
        tt += sub
    for i in range(NSTATE):
        out_s[i] = tmp[i]

    return mode, cause, qp_status, qp_iters, nact, bk


# ---------------------------------------------------------------------------
# whole-episode loop (single deputy)


@njit(cache=True)
def run_cycles(s0, t0, ncycles, ctrl_dt, nsub,
               par, enabled, modes, cpar, kap, hard_cid, weight_cid,
               stack, bk_gains,
               policy_kind, udes_stream, pol_gains,
               mlp_dims, mlp_w, mlp_b, mlp_scale, act_table, obs_frame,
               task_kind, points, standoff, chief_radius, dock_radius,
               insp_done, insp_time,
               rec_stride, rec_t, rec_s, rec_udes, rec_uact, rec_margins,
               rec_mode, rec_cause, rec_qpst, rec_iters,
               min_margins, counters):
    """Fused episode loop: policy, assurance pipeline, propagation,
    inspection bookkeeping, reductions, thinned recording.

    counters: [pass, qp, backup, override, qp_calls, max_iters, insp_count,
    dock_flag].  Returns (cycles_done, abort_code, completion_time,
    records_written).
    """
    s = s0.copy()
    u_des = np.empty(6)
    out_s = np.empty(NSTATE)
    out_u = np.empty(6)
    margins = np.empty(NCON)
    obs = np.empty(10)
    buf_a = np.empty(64)
    buf_b = np.empty(64)
    A = np.empty((MAX_ROWS, 6))
    bvec = np.empty(MAX_ROWS)
    src = np.empty(MAX_ROWS, np.int64)
    hrowbuf = np.empty(MAX_ROWS)
    work_idx = np.empty(MAX_DIM + MAX_ROWS, np.int64)
    work_lam = np.empty(MAX_DIM + MAX_ROWS)
    slacks = np.empty(MAX_ROWS)
    scr = np.empty((5, NSTATE))
    obst = np.empty((0, 6))

    completion = -1.0
    ninsp = 0
    for p in range(insp_done.shape[0]):
        if insp_done[p]:
            ninsp += 1
    nrec = 0
    abort = ABORT_NONE
    cycles_done = 0

    for c in range(ncycles):
        t = t0 + c * ctrl_dt

        # desired command
        if policy_kind == POL_STREAM:
            for j in range(6):
                u_des[j] = udes_stream[c, j]
        elif policy_kind == POL_DOCK:
            dock_command(s, pol_gains, par, u_des)
        elif policy_kind == POL_INSPECT:
            inspect_command(s, t, par, points, insp_done, pol_gains, standoff, u_des)
        elif policy_kind == POL_MLP:
            build_observation_into(s, t, par, obs_frame, points, insp_done, obs)
            mlp_forward(obs, mlp_dims, mlp_w, mlp_b, mlp_scale, act_table,
                        par[PFMAX], par[PTMAX], u_des, buf_a, buf_b)
        else:
            for j in range(6):
                u_des[j] = 0.0

        mode, cause, qpst, qpit, nact, bk = pipeline_cycle(
            s, t, u_des, par, enabled, modes, cpar, kap,
            hard_cid, weight_cid, stack, obst,
            ctrl_dt, nsub, False, bk_gains,
            out_s, out_u, margins,
            A, bvec, src, hrowbuf, work_idx, work_lam, slacks, scr)

        # reductions
        for cid in range(NCON):
            mi = margins[cid]
            if mi == mi and mi < min_margins[cid]:
                min_margins[cid] = mi
        counters[mode] += 1
        if qpst >= 0 and mode != FM_PASS:
            counters[4] += 1
        if qpit > counters[5]:
            counters[5] = qpit
        if qpst == QP_STALL:
            abort = ABORT_QP_STALL

        # inspection bookkeeping on the pre-step state
        if task_kind == TASK_INSPECT and ninsp < insp_done.shape[0]:
            d = np.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
            if d > chief_radius:
                n_ = par[PN]
                sx = np.cos(n_ * t)
                sy = -np.sin(n_ * t)
                rhx, rhy, rhz = s[0] / d, s[1] / d, s[2] / d
                for p in range(insp_done.shape[0]):
                    if insp_done[p]:
                        continue
                    if (points[p, 0] * rhx + points[p, 1] * rhy + points[p, 2] * rhz) > 0.0 \
                            and (points[p, 0] * sx + points[p, 1] * sy) > 0.0:
                        insp_done[p] = True
                        insp_time[p] = t
                        ninsp += 1
                if ninsp == insp_done.shape[0] and completion < 0.0:
                    completion = t
        elif task_kind == TASK_DOCK and completion < 0.0:
            d = np.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
            nv = np.sqrt(s[3] * s[3] + s[4] * s[4] + s[5] * s[5])
            if d < dock_radius and nv < pol_gains[3]:
                completion = t
                counters[7] = 1

        if rec_stride > 0 and c % rec_stride == 0:
            rec_t[nrec] = t
            for i in range(NSTATE):
                rec_s[nrec, i] = s[i]
            for j in range(6):
                rec_udes[nrec, j] = u_des[j]
                rec_uact[nrec, j] = out_u[j]
            for cid in range(NCON):
                rec_margins[nrec, cid] = margins[cid]
            rec_mode[nrec] = mode
            rec_cause[nrec] = cause
            rec_qpst[nrec] = qpst
            rec_iters[nrec] = qpit
            nrec += 1

        # abort on non-finite state
        finite = True
        for i in range(NSTATE):
            if not np.isfinite(out_s[i]):
                finite = False
        if not finite:
            abort = ABORT_NONFINITE
            cycles_done = c + 1
            break
        if abort == ABORT_QP_STALL:
            cycles_done = c + 1
            break

        for i in range(NSTATE):
            s[i] = out_s[i]
        cycles_done = c + 1

    counters[6] = ninsp
    for i in range(NSTATE):
        out_s[i] = s[i]
    return s, cycles_done, abort, completion, nrec
