"""Batched planar multibody dynamics.

Generalized coordinates (11 per robot): base x, base z, pitch, six chain
joints (unified slots 0-5) and two wheel angles (slots 6-7). Coordinate
``3 + i`` is unified slot ``i``. Absent joints have zero Jacobian columns and
a unit dummy inertia, so they never move and never couple to anything.

The state carries the generalized momentum ``p = M(q) qd``. A step updates
``p`` with the applied forces at the current configuration, solves for the new
velocity and moves ``q`` with it (semi-implicit Euler in momentum form). With no
external forces the base momenta are constant to round-off, since the kinetic
energy does not depend on x, z or pitch. Contact damping and the stiffness of
the ground spring are treated linearly implicitly for stability.

Bodies: trunk, 3 links per chain, 1 wheel per chain (9). Segments, the rigid
vectors summed to reach points, are: trunk com offset, 2 attachments, 6 link
vectors, 2 trunk end vectors (11).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .morph import MAX_JOINTS, N_CHAINS, N_SLOTS, MorphSpec

N_COORD = 3 + N_SLOTS
N_BODY = 1 + N_CHAINS * MAX_JOINTS + N_CHAINS
N_SEG = 1 + N_CHAINS + N_CHAINS * MAX_JOINTS + 2
N_CONTACT = 2 + N_CHAINS * MAX_JOINTS + N_CHAINS

GRAVITY = 9.81
ARMATURE = 0.02
CONTACT_K = 2.0e4
CONTACT_C = 200.0
TANGENT_C = 2.0e3

SEG_COM, SEG_ATTACH, SEG_LINK, SEG_END = 0, 1, 3, 9


def _link_seg(c, j):
    return SEG_LINK + MAX_JOINTS * c + j


def _joint_coord(c, j):
    return 3 + MAX_JOINTS * c + j


def _wheel_coord(c):
    return 3 + N_CHAINS * MAX_JOINTS + c


def _structure():
    # segment angle dependence, before masking by active coordinates
    dep = np.zeros((N_SEG, N_COORD))
    dep[:, 2] = 1.0
    for c in range(N_CHAINS):
        for j in range(MAX_JOINTS):
            for k in range(j + 1):
                dep[_link_seg(c, j), _joint_coord(c, k)] = 1.0
    # body com = base + sum_s body_seg[b, s] * r_s
    body_seg = np.zeros((N_BODY, N_SEG))
    body_rot = np.zeros((N_BODY, N_COORD))
    body_seg[0, SEG_COM] = 1.0
    body_rot[0, 2] = 1.0
    for c in range(N_CHAINS):
        for j in range(MAX_JOINTS):
            b = 1 + MAX_JOINTS * c + j
            body_seg[b, SEG_ATTACH + c] = 1.0
            body_seg[b, [_link_seg(c, i) for i in range(j)]] = 1.0
            body_seg[b, _link_seg(c, j)] = 0.5
            body_rot[b, 2] = 1.0
            body_rot[b, [_joint_coord(c, i) for i in range(j + 1)]] = 1.0
        w = 1 + N_CHAINS * MAX_JOINTS + c
        body_seg[w, SEG_ATTACH + c] = 1.0
        body_seg[w, [_link_seg(c, i) for i in range(MAX_JOINTS)]] = 1.0
        body_rot[w, 2] = 1.0
        body_rot[w, [_joint_coord(c, i) for i in range(MAX_JOINTS)]] = 1.0
        body_rot[w, _wheel_coord(c)] = 1.0
    # contact points: trunk ends, link distal ends, wheel bottoms
    contact_seg = np.zeros((N_CONTACT, N_SEG))
    contact_seg[0, SEG_END] = 1.0
    contact_seg[1, SEG_END + 1] = 1.0
    for c in range(N_CHAINS):
        for j in range(MAX_JOINTS):
            p = 2 + MAX_JOINTS * c + j
            contact_seg[p, SEG_ATTACH + c] = 1.0
            contact_seg[p, [_link_seg(c, i) for i in range(j + 1)]] = 1.0
        w = 2 + N_CHAINS * MAX_JOINTS + c
        contact_seg[w, SEG_ATTACH + c] = 1.0
        contact_seg[w, [_link_seg(c, i) for i in range(MAX_JOINTS)]] = 1.0
    return dep, body_seg, body_rot, contact_seg


DEP, BODY_SEG, BODY_ROT, CONTACT_SEG = _structure()
WHEEL_BODY = np.arange(1 + N_CHAINS * MAX_JOINTS, N_BODY)
WHEEL_CONTACT = np.arange(2 + N_CHAINS * MAX_JOINTS, N_CONTACT)


@dataclass
class Robots:
    """Batched model parameters; row b describes robot b."""

    active: np.ndarray  # (B, 11) bool
    is_wheel: np.ndarray  # (B, 11) bool
    mass: np.ndarray  # (B, 9)
    inertia: np.ndarray  # (B, 9)
    seg_local: np.ndarray  # (B, 11, 2) local segment vectors
    seg_kind: np.ndarray  # (N_SEG,) 0: rotates like trunk axis, 1: hangs (link)
    contact_mask: np.ndarray  # (B, 10) bool
    wheel_radius: np.ndarray  # (B, 2)
    kp: np.ndarray  # (B, 11)
    kd: np.ndarray
    torque_limit: np.ndarray
    q_lo: np.ndarray
    q_hi: np.ndarray
    q_mid: np.ndarray
    armature: np.ndarray  # (B, 11)
    friction: np.ndarray  # (B,)
    gravity: np.ndarray  # (B,)
    latency: np.ndarray  # (B,) int
    obs_noise: np.ndarray  # (B,)
    nominal_height: np.ndarray  # (B,)

    @property
    def batch(self) -> int:
        return self.active.shape[0]

    def fields(self):
        return [k for k in self.__dataclass_fields__ if k != "seg_kind"]

    def set_row(self, i: int, other: "Robots", j: int = 0) -> None:
        for k in self.fields():
            getattr(self, k)[i] = getattr(other, k)[j]

    def select(self, idx) -> "Robots":
        kw = {k: getattr(self, k)[idx] for k in self.fields()}
        return Robots(seg_kind=self.seg_kind, **kw)


def _seg_kind():
    kind = np.zeros(N_SEG, dtype=int)
    kind[SEG_LINK:SEG_LINK + N_CHAINS * MAX_JOINTS] = 1
    return kind


def empty_robots(batch: int) -> Robots:
    z = lambda *s: np.zeros((batch,) + s)  # noqa: E731
    return Robots(
        active=np.zeros((batch, N_COORD), dtype=bool),
        is_wheel=np.zeros((batch, N_COORD), dtype=bool),
        mass=z(N_BODY),
        inertia=z(N_BODY),
        seg_local=z(N_SEG, 2),
        seg_kind=_seg_kind(),
        contact_mask=np.zeros((batch, N_CONTACT), dtype=bool),
        wheel_radius=z(N_CHAINS),
        kp=z(N_COORD),
        kd=z(N_COORD),
        torque_limit=z(N_COORD),
        q_lo=np.full((batch, N_COORD), -np.inf),
        q_hi=np.full((batch, N_COORD), np.inf),
        q_mid=z(N_COORD),
        armature=z(N_COORD),
        friction=np.ones(batch),
        gravity=np.full(batch, GRAVITY),
        latency=np.zeros(batch, dtype=int),
        obs_noise=z(),
        nominal_height=z(),
    )


def build_robots(specs) -> Robots:
    specs = list(specs)
    rb = empty_robots(len(specs))
    for b, s in enumerate(specs):
        _fill_row(rb, b, s)
    return rb


def _fill_row(rb: Robots, b: int, spec: MorphSpec) -> None:
    rb.active[b] = False
    rb.active[b, :3] = True
    rb.is_wheel[b] = False
    rb.mass[b] = 0.0
    rb.inertia[b] = 0.0
    rb.seg_local[b] = 0.0
    rb.contact_mask[b] = False
    rb.kp[b] = rb.kd[b] = rb.torque_limit[b] = rb.q_mid[b] = rb.armature[b] = 0.0
    rb.q_lo[b] = -np.inf
    rb.q_hi[b] = np.inf
    rb.wheel_radius[b] = 0.0

    rb.mass[b, 0] = spec.trunk_mass
    rb.inertia[b, 0] = spec.trunk_inertia
    half = 0.5 * spec.trunk_length
    rb.seg_local[b, SEG_COM] = (spec.dynamics.com_offset, 0.0)
    rb.seg_local[b, SEG_END] = (half, 0.0)
    rb.seg_local[b, SEG_END + 1] = (-half, 0.0)
    rb.contact_mask[b, :2] = True
    for c, chain in enumerate(spec.chains):
        rb.seg_local[b, SEG_ATTACH + c] = (chain.attach_x, 0.0)
        for j in range(chain.n_joints):
            k = _joint_coord(c, j)
            l, m = chain.link_lengths[j], chain.link_masses[j]
            rb.seg_local[b, _link_seg(c, j)] = (0.0, -l)
            body = 1 + MAX_JOINTS * c + j
            rb.mass[b, body] = m
            rb.inertia[b, body] = m * l * l / 12.0
            jt = chain.joints[j]
            rb.active[b, k] = True
            rb.kp[b, k], rb.kd[b, k], rb.torque_limit[b, k] = jt.kp, jt.kd, jt.torque_limit
            rb.q_lo[b, k], rb.q_hi[b, k], rb.q_mid[b, k] = jt.lower, jt.upper, jt.mid
            rb.armature[b, k] = ARMATURE
            last_with_wheel = chain.wheel is not None and j == chain.n_joints - 1
            rb.contact_mask[b, 2 + MAX_JOINTS * c + j] = not last_with_wheel
        if chain.wheel is not None:
            k = _wheel_coord(c)
            w = chain.wheel
            body = 1 + N_CHAINS * MAX_JOINTS + c
            rb.mass[b, body] = w.mass
            rb.inertia[b, body] = 0.5 * w.mass * w.radius**2
            rb.active[b, k] = True
            rb.is_wheel[b, k] = True
            rb.kd[b, k], rb.torque_limit[b, k] = w.kd, w.torque_limit
            rb.armature[b, k] = ARMATURE
            rb.wheel_radius[b, c] = w.radius
            rb.contact_mask[b, 2 + N_CHAINS * MAX_JOINTS + c] = True
    d = spec.dynamics
    rb.friction[b] = d.friction
    rb.gravity[b] = GRAVITY * d.gravity_scale
    rb.latency[b] = d.latency_steps
    rb.obs_noise[b] = d.obs_noise_std
    rb.nominal_height[b] = spec.nominal_height


def set_robot(rb: Robots, b: int, spec: MorphSpec) -> None:
    _fill_row(rb, b, spec)


# ---------------------------------------------------------------------------
# kinematics


@dataclass
class Kinematics:
    seg: np.ndarray  # (B, S, 2) world segment vectors
    body_pos: np.ndarray  # (B, 9, 2)
    body_jac: np.ndarray  # (B, 9, 2, K)
    body_rot: np.ndarray  # (B, 9, K)
    contact_pos: np.ndarray  # (B, P, 2)
    contact_jac: np.ndarray  # (B, P, 2, K)
    dep: np.ndarray  # (B, S, K)
    mass_matrix: np.ndarray  # (B, K, K)


def _mv(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched matrix-vector product."""
    return (m @ v[..., None])[..., 0]


def _perp(v: np.ndarray) -> np.ndarray:
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def kinematics(rb: Robots, q: np.ndarray) -> Kinematics:
    act = rb.active.astype(float)
    dep = DEP[None] * act[:, None, :]  # (B, S, K)
    body_rot = BODY_ROT[None] * act[:, None, :]
    phi = _mv(dep, q)
    c, s = np.cos(phi), np.sin(phi)
    loc = rb.seg_local
    seg = np.stack([c * loc[..., 0] - s * loc[..., 1], s * loc[..., 0] + c * loc[..., 1]], axis=-1)
    perp = _perp(seg)
    base = q[:, :2]

    # d(point)/dq_k = e_k for base translation, plus perp(r_s) for every rotating segment
    seg_jac = perp[:, :, :, None] * dep[:, :, None, :]  # (B, S, 2, K)
    base_jac = np.zeros((1, 2, N_COORD))
    base_jac[0, 0, 0] = base_jac[0, 1, 1] = 1.0
    base_jac = base_jac * act[:, None, :]

    B = q.shape[0]
    flat = seg_jac.reshape(B, N_SEG, 2 * N_COORD)
    body_pos = base[:, None, :] + BODY_SEG @ seg
    body_jac = base_jac[:, None] + (BODY_SEG @ flat).reshape(B, N_BODY, 2, N_COORD)
    contact_pos = base[:, None, :] + CONTACT_SEG @ seg
    contact_jac = base_jac[:, None] + (CONTACT_SEG @ flat).reshape(B, N_CONTACT, 2, N_COORD)
    # wheel contacts sit one radius below the hub; material-point velocity adds omega x (0, -r)
    r = rb.wheel_radius
    contact_pos[:, WHEEL_CONTACT, 1] -= r
    contact_jac[:, WHEEL_CONTACT, 0, :] += r[:, :, None] * body_rot[:, WHEEL_BODY, :]

    J = body_jac.reshape(B, 2 * N_BODY, N_COORD)
    mj = np.repeat(rb.mass, 2, axis=1)[:, :, None] * J
    M = np.swapaxes(mj, 1, 2) @ J
    M += np.swapaxes(rb.inertia[:, :, None] * body_rot, 1, 2) @ body_rot
    diag = rb.armature + (~rb.active)
    idx = np.arange(N_COORD)
    M[:, idx, idx] += diag
    return Kinematics(seg, body_pos, body_jac, body_rot, contact_pos, contact_jac, dep, M)


def kinetic_gradient(rb: Robots, kin: Kinematics, qd: np.ndarray) -> np.ndarray:
    """dT/dq at fixed qd."""
    B = qd.shape[0]
    v = _mv(kin.body_jac.reshape(B, 2 * N_BODY, N_COORD), qd).reshape(B, N_BODY, 2)
    phid = _mv(kin.dep, qd)  # (B, S)
    vr = v @ np.swapaxes(kin.seg, 1, 2)  # (B, 9, S)
    w = rb.mass[:, :, None] * BODY_SEG[None] * vr * phid[:, None, :]  # (B, 9, S)
    return -_mv(np.swapaxes(kin.dep, 1, 2), w.sum(axis=1))


def gravity_force(rb: Robots, kin: Kinematics) -> np.ndarray:
    return -_mv(np.swapaxes(kin.body_jac[:, :, 1, :], 1, 2), rb.mass * rb.gravity[:, None])


def energy(rb: Robots, kin: Kinematics, qd: np.ndarray) -> np.ndarray:
    kinetic = 0.5 * np.einsum("bk,bkl,bl->b", qd, kin.mass_matrix, qd)
    potential = np.einsum("bp,bp->b", rb.mass * rb.gravity[:, None], kin.body_pos[:, :, 1])
    return kinetic + potential


def linear_momentum(rb: Robots, kin: Kinematics, qd: np.ndarray) -> np.ndarray:
    """Sum of m_b v_b over bodies, from body velocities."""
    v = np.einsum("bpik,bk->bpi", kin.body_jac, qd)
    return np.einsum("bp,bpi->bi", rb.mass, v)


# ---------------------------------------------------------------------------
# state and stepping


@dataclass
class PhysState:
    q: np.ndarray  # (B, 11)
    p: np.ndarray  # (B, 11) generalized momentum
    qd: np.ndarray  # (B, 11) velocity consistent with (q, p)
    kin: Kinematics | None = None
    torque: np.ndarray | None = None  # last applied actuator torques
    fault: np.ndarray | None = None

    def copy(self) -> "PhysState":
        return PhysState(self.q.copy(), self.p.copy(), self.qd.copy(), self.kin,
                         None if self.torque is None else self.torque.copy(),
                         None if self.fault is None else self.fault.copy())


def make_state(rb: Robots, q: np.ndarray, qd: np.ndarray) -> PhysState:
    q = np.where(rb.active, q, 0.0)
    qd = np.where(rb.active, qd, 0.0)
    kin = kinematics(rb, q)
    p = np.einsum("bkl,bl->bk", kin.mass_matrix, qd)
    B = q.shape[0]
    return PhysState(q, p, qd, kin, np.zeros((B, N_COORD)), np.zeros(B, dtype=bool))


def actuator_torque(rb: Robots, q: np.ndarray, qd: np.ndarray, target: np.ndarray) -> np.ndarray:
    """PD on revolute joints, velocity servo on wheels, clipped to limits; zero on absent slots."""
    tau = np.where(rb.is_wheel, rb.kd * (target - qd), rb.kp * (target - q) - rb.kd * qd)
    tau = np.clip(tau, -rb.torque_limit, rb.torque_limit)
    return np.where(rb.active & (np.arange(N_COORD) >= 3), tau, 0.0)


def contact_terms(rb: Robots, kin: Kinematics, qd: np.ndarray, dt: float):
    """Explicit generalized contact force and implicit damping matrix."""
    z = kin.contact_pos[..., 1]
    B = qd.shape[0]
    vel = _mv(kin.contact_jac.reshape(B, 2 * N_CONTACT, N_COORD), qd).reshape(B, N_CONTACT, 2)
    pen = np.maximum(-z, 0.0)
    fn_est = CONTACT_K * pen - CONTACT_C * vel[..., 1]
    on = rb.contact_mask & (pen > 0.0) & (fn_est > 0.0)
    cn = np.where(on, CONTACT_C + CONTACT_K * dt, 0.0)
    ct = np.where(on, np.minimum(TANGENT_C, rb.friction[:, None] * fn_est / (np.abs(vel[..., 0]) + 1e-6)), 0.0)
    jn = kin.contact_jac[:, :, 1, :]
    jt = kin.contact_jac[:, :, 0, :]
    force = _mv(np.swapaxes(jn, 1, 2), np.where(on, CONTACT_K * pen, 0.0))
    damp = np.swapaxes(cn[:, :, None] * jn, 1, 2) @ jn + np.swapaxes(ct[:, :, None] * jt, 1, 2) @ jt
    return force, damp, on


def step(rb: Robots, st: PhysState, target: np.ndarray, dt: float, contact: bool = True,
         actuate: bool = True) -> PhysState:
    """One integration substep. ``target`` is (B, 11) in coordinate order."""
    kin = st.kin if st.kin is not None else kinematics(rb, st.q)
    q, p, qd = st.q, st.p, st.qd
    tau = actuator_torque(rb, q, qd, target) if actuate else np.zeros_like(q)
    force = gravity_force(rb, kin) + tau
    A = kin.mass_matrix
    if contact:
        fc, damp, _ = contact_terms(rb, kin, qd, dt)
        force = force + fc
        A = A + dt * damp
    Ainv = np.linalg.inv(A)
    # dT/dq is evaluated at the new velocity (symplectic Euler); one fixed-point pass suffices
    qd_new = qd
    for _ in range(2):
        total = np.where(rb.active, force + kinetic_gradient(rb, kin, qd_new), 0.0)
        qd_new = _mv(Ainv, p + dt * total)

    # joint limits: impulses on the joint coordinate only (internal, momentum-neutral)
    nxt = q + dt * qd_new
    for k in range(3, 3 + N_CHAINS * MAX_JOINTS):
        hit = rb.active[:, k] & (((nxt[:, k] > rb.q_hi[:, k]) & (qd_new[:, k] > 0)) |
                                 ((nxt[:, k] < rb.q_lo[:, k]) & (qd_new[:, k] < 0)))
        if hit.any():
            lam = np.where(hit, -qd_new[:, k] / Ainv[:, k, k], 0.0)
            qd_new = qd_new + Ainv[:, :, k] * lam[:, None]
    qd_new = np.where(rb.active, qd_new, 0.0)

    p_new = _mv(kin.mass_matrix, qd_new)
    q_new = np.clip(q + dt * qd_new, rb.q_lo, rb.q_hi)
    q_new = np.where(rb.active, q_new, 0.0)
    fault = ~np.all(np.isfinite(q_new) & np.isfinite(p_new), axis=1)
    if fault.any():
        q_new = np.where(fault[:, None], q, q_new)
        p_new = np.where(fault[:, None], p, p_new)
    kin_new = kinematics(rb, q_new)
    qd_rep = np.linalg.solve(kin_new.mass_matrix, p_new[..., None])[..., 0]
    qd_rep = np.where(rb.active, qd_rep, 0.0)
    prev_fault = st.fault if st.fault is not None else np.zeros(q.shape[0], dtype=bool)
    return PhysState(q_new, p_new, qd_rep, kin_new, tau, prev_fault | fault)
