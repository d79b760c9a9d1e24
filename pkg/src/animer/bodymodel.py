"""Quadruped and avian parametric body models.

Both taxa share one recipe: shape blendshapes on a rest mesh, a linear joint
regressor, forward kinematics from per-joint axis-angle rotations and linear
blend skinning.  The avian model additionally scales the length of every
bone by ``1 + alpha`` before posing.

All differentiable entry points accept :class:`~animer.numkernel.Tensor`
inputs with a leading batch axis; :func:`model_forward` is the plain-array
convenience wrapper.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkernel import Tensor, concat, constant, elementwise, matmul, stack

TAXA = ("quadruped", "avian")

# Reference sizes of the licensed assets; toy templates are much smaller.
FULL_SCALE = {
    "quadruped": dict(n_vertices=3889, n_faces=7774, n_joints=35, n_betas=41, n_keypoints=26),
    "avian": dict(n_vertices=8210, n_faces=12468, n_joints=25, n_betas=15, n_keypoints=18),
}


class TemplateError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModelTemplate:
    """Geometric prior for one taxon.

    ``keypoint_map`` has one row per evaluation keypoint: ``(0, j)`` selects
    joint ``j`` and ``(1, v)`` selects vertex ``v``.  By convention the last
    two keypoints are the nose and the tail tip.
    """

    taxon: str
    rest_vertices: np.ndarray
    faces: np.ndarray
    shape_basis: np.ndarray
    skin_weights: np.ndarray
    joint_regressor: np.ndarray
    parents: np.ndarray
    keypoint_map: np.ndarray
    vertex_part: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        conv = {
            "rest_vertices": np.float64, "shape_basis": np.float64, "skin_weights": np.float64,
            "joint_regressor": np.float64, "faces": np.int64, "parents": np.int64,
            "keypoint_map": np.int64,
        }
        for name, dt in conv.items():
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=dt))
        validate_template(self)
        object.__setattr__(self, "vertex_part", _vertex_parts(self.joint_regressor, self.skin_weights))

    @property
    def n_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_betas(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def n_bones(self) -> int:
        return self.n_joints - 1 if self.taxon == "avian" else 0

    @property
    def n_keypoints(self) -> int:
        return self.keypoint_map.shape[0]

    @property
    def head_tail(self) -> tuple[int, int]:
        return self.n_keypoints - 2, self.n_keypoints - 1

    def rest_joints(self) -> np.ndarray:
        return self.joint_regressor @ self.rest_vertices


def validate_template(t: ModelTemplate) -> None:
    if t.taxon not in TAXA:
        raise TemplateError(f"unknown taxon {t.taxon!r}")
    nv, nj = t.rest_vertices.shape[0], t.parents.shape[0]
    if t.rest_vertices.shape != (nv, 3):
        raise TemplateError("rest_vertices must be n_V x 3")
    if t.faces.ndim != 2 or t.faces.shape[1] != 3:
        raise TemplateError("faces must be n_F x 3")
    if t.faces.size and (t.faces.min() < 0 or t.faces.max() >= nv):
        raise TemplateError("face index out of range")
    if t.shape_basis.ndim != 3 or t.shape_basis.shape[1:] != (nv, 3):
        raise TemplateError("shape_basis must be n_beta x n_V x 3")
    if t.skin_weights.shape != (nv, nj):
        raise TemplateError("skin_weights must be n_V x n_J")
    if (t.skin_weights < 0).any() or np.abs(t.skin_weights.sum(1) - 1.0).max() > 1e-9:
        raise TemplateError("skin weight rows must be nonnegative and sum to 1")
    if t.joint_regressor.shape != (nj, nv):
        raise TemplateError("joint_regressor must be n_J x n_V")
    kinematic_order(t.parents)
    km = t.keypoint_map
    if km.ndim != 2 or km.shape[1] != 2 or km.shape[0] < 2:
        raise TemplateError("keypoint_map must be n_K x 2 with n_K >= 2")
    limits = np.where(km[:, 0] == 0, nj, nv)
    if not np.isin(km[:, 0], (0, 1)).all() or (km[:, 1] < 0).any() or (km[:, 1] >= limits).any():
        raise TemplateError("keypoint_map entry out of range")


def kinematic_order(parents: np.ndarray) -> list[int]:
    """Joints ordered so that each parent precedes its children."""
    parents = np.asarray(parents)
    n = len(parents)
    if n == 0 or parents[0] != -1:
        raise TemplateError("joint 0 must be the root (parent -1)")
    if (parents[1:] < 0).any() or (parents >= n).any():
        raise TemplateError("invalid parent index")
    depth = np.full(n, -1)
    depth[0] = 0
    for j in range(1, n):
        chain, k = [], j
        while depth[k] < 0:
            if k in chain:
                raise TemplateError(f"cyclic parents through joint {k}")
            chain.append(k)
            k = parents[k]
        for c in reversed(chain):
            depth[c] = depth[parents[c]] + 1
    return sorted(range(n), key=lambda j: (depth[j], j))


def _vertex_parts(regressor: np.ndarray, skin: np.ndarray) -> np.ndarray:
    """Joint that owns each vertex when bones are rescaled.

    Vertices used by the regressor belong to the joint whose row uses them
    most; all others follow their dominant skinning joint.
    """
    part = np.argmax(skin, axis=1)
    used = np.abs(regressor).max(axis=0) > 0
    part[used] = np.argmax(np.abs(regressor[:, used]), axis=0)
    return part


@dataclass
class BodyParams:
    beta: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray | None = None

    @classmethod
    def zeros(cls, template: ModelTemplate) -> "BodyParams":
        return cls(
            beta=np.zeros(template.n_betas),
            theta=np.zeros((template.n_joints, 3)),
            gamma=np.zeros(3),
            alpha=np.zeros(template.n_bones) if template.taxon == "avian" else None,
        )

    def check(self, template: ModelTemplate) -> None:
        if np.shape(self.beta) != (template.n_betas,):
            raise ValueError(f"beta must have length {template.n_betas}")
        if np.shape(self.theta) != (template.n_joints, 3):
            raise ValueError(f"theta must be {template.n_joints} x 3")
        if np.shape(self.gamma) != (3,):
            raise ValueError("gamma must be a 3-vector")
        if template.taxon == "avian":
            if self.alpha is None or np.shape(self.alpha) != (template.n_bones,):
                raise ValueError(f"avian params need alpha of length {template.n_bones}")
        elif self.alpha is not None:
            raise ValueError("quadruped params must not carry alpha")


@dataclass
class MeshOutput:
    vertices: np.ndarray
    joints: np.ndarray
    keypoints3d: np.ndarray


# ---------------------------------------------------------------------------
# rotations

# K_flat = v @ _SKEW gives the row-major cross-product matrix of v.
_SKEW = np.zeros((3, 9))
_SKEW[2, 1], _SKEW[1, 2] = -1.0, 1.0
_SKEW[2, 3], _SKEW[0, 5] = 1.0, -1.0
_SKEW[1, 6], _SKEW[0, 7] = -1.0, 1.0

_SERIES_CUTOFF = 1e-2  # on theta^2


def _sinc_a(t):
    th = np.sqrt(np.maximum(t, _SERIES_CUTOFF))
    small = 1 - t / 6 + t**2 / 120 - t**3 / 5040 + t**4 / 362880
    return np.where(t < _SERIES_CUTOFF, small, np.sin(th) / th)


def _sinc_a_prime(t):
    th = np.sqrt(np.maximum(t, _SERIES_CUTOFF))
    small = -1 / 6 + t / 60 - t**2 / 1680 + t**3 / 90720
    return np.where(t < _SERIES_CUTOFF, small, (th * np.cos(th) - np.sin(th)) / (2 * th**3))


def _cosc_b(t):
    th = np.sqrt(np.maximum(t, _SERIES_CUTOFF))
    small = 0.5 - t / 24 + t**2 / 720 - t**3 / 40320 + t**4 / 3628800
    return np.where(t < _SERIES_CUTOFF, small, (1 - np.cos(th)) / th**2)


def _cosc_b_prime(t):
    th = np.sqrt(np.maximum(t, _SERIES_CUTOFF))
    small = -1 / 24 + t / 360 - t**2 / 13440 + t**3 / 907200
    return np.where(t < _SERIES_CUTOFF, small, (0.5 * th * np.sin(th) - 1 + np.cos(th)) / th**4)


def rodrigues(axis_angle):
    """Rotation matrices from axis-angle vectors of shape ``(..., 3)``.

    Returns a Tensor when given one, otherwise a numpy array.
    """
    as_array = not isinstance(axis_angle, Tensor)
    v = constant(axis_angle) if as_array else axis_angle
    lead = v.shape[:-1]
    t = (v * v).sum(axis=-1)
    a = elementwise(t, _sinc_a, _sinc_a_prime).reshape(lead + (1, 1))
    b = elementwise(t, _cosc_b, _cosc_b_prime).reshape(lead + (1, 1))
    k = matmul(v, _SKEW).reshape(lead + (3, 3))
    r = a * k + b * matmul(k, k) + np.eye(3)
    return r.data if as_array else r


# ---------------------------------------------------------------------------
# model stages (batched, differentiable)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def rest_shape(template: ModelTemplate, beta, alpha=None):
    """Shaped (and for birds bone-scaled) rest geometry.

    ``beta`` is ``(B, n_beta)``; ``alpha`` is ``(B, n_bone)`` for the avian
    taxon.  Returns ``(vertices (B, n_V, 3), joints (B, n_J, 3))`` Tensors.
    """
    beta = _t(beta)
    if beta.ndim != 2 or beta.shape[1] != template.n_betas:
        raise ValueError(f"beta must be (B, {template.n_betas}), got {beta.shape}")
    if template.taxon == "avian":
        if alpha is None:
            raise ValueError("avian rest shape needs alpha")
        alpha = _t(alpha)
        if alpha.shape != (beta.shape[0], template.n_bones):
            raise ValueError(f"alpha must be (B, {template.n_bones}), got {alpha.shape}")
    elif alpha is not None:
        raise ValueError("quadruped rest shape takes no alpha")

    nv = template.n_vertices
    basis = template.shape_basis.reshape(template.n_betas, nv * 3)
    verts = matmul(beta, basis).reshape(-1, nv, 3) + template.rest_vertices
    joints = regress_joints(template.joint_regressor, verts)
    if alpha is None:
        return verts, joints

    parents = template.parents
    new = {0: joints[:, 0]}
    for j in kinematic_order(parents)[1:]:
        p = parents[j]
        bone = joints[:, j] - joints[:, p]
        scale = alpha[:, j - 1:j] + 1.0
        new[j] = new[p] + bone * scale
    scaled = stack([new[j] for j in range(template.n_joints)], axis=1)
    shift = scaled - joints
    verts = verts + shift.take(template.vertex_part, axis=1)
    return verts, scaled


def _affine(rot: Tensor, trans: Tensor) -> Tensor:
    """Stack ``(B, 3, 3)`` and ``(B, 3)`` into ``(B, 4, 4)``."""
    b = rot.shape[0]
    top = concat([rot, trans.reshape(b, 3, 1)], axis=2)
    bottom = np.broadcast_to(np.array([0.0, 0.0, 0.0, 1.0]), (b, 1, 4))
    return concat([top, constant(bottom)], axis=1)


def kinematic_forward(theta, rest_joints, parents, gamma):
    """World transforms ``(B, n_J, 4, 4)`` of every joint.

    The root is placed at ``gamma + rest_joint_0`` and rotated by
    ``theta_0``; every child is offset from its parent by the rest-pose bone
    vector and rotated by its own ``theta`` in the parent frame.
    """
    theta, rest_joints, gamma = _t(theta), _t(rest_joints), _t(gamma)
    parents = np.asarray(parents)
    nj = len(parents)
    if theta.ndim != 3 or theta.shape[1:] != (nj, 3):
        raise ValueError(f"theta must be (B, {nj}, 3), got {theta.shape}")
    if rest_joints.shape[1:] != (nj, 3):
        raise ValueError("rest_joints do not match parents")
    order = kinematic_order(parents)
    local_rot = rodrigues(theta)
    rots: dict[int, Tensor] = {}
    trans: dict[int, Tensor] = {}
    rots[0] = local_rot[:, 0]
    trans[0] = rest_joints[:, 0] + gamma
    for j in order[1:]:
        p = parents[j]
        offset = rest_joints[:, j] - rest_joints[:, p]
        rots[j] = matmul(rots[p], local_rot[:, j])
        trans[j] = matmul(rots[p], offset.reshape(-1, 3, 1)).reshape(-1, 3) + trans[p]
    rot_all = stack([rots[j] for j in range(nj)], axis=1)
    trans_all = stack([trans[j] for j in range(nj)], axis=1)
    b = rot_all.shape[0]
    return _affine(rot_all.reshape(b * nj, 3, 3), trans_all.reshape(b * nj, 3)).reshape(b, nj, 4, 4)


def lbs_pose(rest_vertices, transforms, rest_joints, skin_weights):
    """Linear blend skinning of ``(B, n_V, 3)`` rest vertices."""
    rest_vertices, transforms, rest_joints = _t(rest_vertices), _t(transforms), _t(rest_joints)
    b, nj = transforms.shape[:2]
    if rest_vertices.shape[0] != b or rest_joints.shape != (b, nj, 3):
        raise ValueError("batch or joint count mismatch in lbs_pose")
    if np.shape(skin_weights) != (rest_vertices.shape[1], nj):
        raise ValueError("skin_weights do not match vertices/joints")
    rot = transforms[:, :, :3, :3]
    t = transforms[:, :, :3, 3]
    # move each transform so it acts on rest-pose coordinates
    t_rel = t - matmul(rot, rest_joints.reshape(b, nj, 3, 1)).reshape(b, nj, 3)
    rel = concat([rot, t_rel.reshape(b, nj, 3, 1)], axis=3).reshape(b, nj, 12)
    blended = matmul(skin_weights, rel).reshape(b, -1, 3, 4)
    posed = (blended[..., :3] * rest_vertices.reshape(b, -1, 1, 3)).sum(axis=-1)
    return posed + blended[..., 3]


def regress_joints(W, vertices):
    """``W @ vertices`` for ``(n_J, n_V)`` W and ``(..., n_V, 3)`` vertices."""
    W = np.asarray(W) if not isinstance(W, Tensor) else W
    if W.shape[-1] != vertices.shape[-2]:
        raise ValueError(f"regressor has {W.shape[-1]} columns but mesh has {vertices.shape[-2]} vertices")
    if isinstance(vertices, Tensor) or isinstance(W, Tensor):
        return matmul(W, vertices)
    return W @ vertices


def extract_keypoints(template: ModelTemplate, joints: Tensor, vertices: Tensor) -> Tensor:
    km = template.keypoint_map
    flat = np.where(km[:, 0] == 0, km[:, 1], template.n_joints + km[:, 1])
    return concat([joints, vertices], axis=1).take(flat, axis=1)


def forward_tensors(template: ModelTemplate, beta, theta, gamma, alpha=None) -> dict[str, Tensor]:
    """Differentiable batched model: returns vertices, joints and keypoints3d."""
    theta, gamma = _t(theta), _t(gamma)
    verts, joints = rest_shape(template, beta, alpha)
    transforms = kinematic_forward(theta, joints, template.parents, gamma)
    posed = lbs_pose(verts, transforms, joints, template.skin_weights)
    posed_joints = regress_joints(template.joint_regressor, posed)
    kps = extract_keypoints(template, posed_joints, posed)
    return {"vertices": posed, "joints": posed_joints, "keypoints3d": kps}


def model_forward(template: ModelTemplate, params: BodyParams) -> MeshOutput:
    """Evaluate the model for one parameter set (plain arrays in and out)."""
    params.check(template)
    alpha = None if params.alpha is None else np.asarray(params.alpha, dtype=float)[None]
    out = forward_tensors(template, np.asarray(params.beta, float)[None], np.asarray(params.theta, float)[None],
                          np.asarray(params.gamma, float)[None], alpha)
    return MeshOutput(*(out[k].data[0].copy() for k in ("vertices", "joints", "keypoints3d")))


# ---------------------------------------------------------------------------
# toy templates


def _unit(v):
    return v / np.linalg.norm(v)


def toy_skeleton(taxon: str, n_joints: int, seed: int):
    """Joint positions and parents of a random branched toy skeleton."""
    rng = np.random.default_rng([seed, TAXA.index(taxon), n_joints])
    parents = np.full(n_joints, -1)
    joints = np.zeros((n_joints, 3))
    # birds are stretched along x, quadrupeds get a longer body axis
    lengths = (0.45, 0.75) if taxon == "quadruped" else (0.35, 0.65)
    heading = np.array([1.0, 0.0, 0.0])
    for j in range(1, n_joints):
        for _ in range(100):
            p = 0 if j == 1 else int(rng.integers(max(0, j - 3), j))
            d = _unit(rng.normal(size=3) + (heading if j < 3 else 0.0))
            cand = joints[p] + rng.uniform(*lengths) * d
            if np.linalg.norm(joints[:j] - cand, axis=1).min() > 0.3:
                break
        parents[j], joints[j] = p, cand
    return joints, parents


def _ring_frame(direction):
    helper = np.array([0.0, 0.0, 1.0]) if abs(direction[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = _unit(np.cross(direction, helper))
    w = np.cross(direction, u)
    return u, w


def _bridge(a: list[int], b: list[int]) -> list[tuple[int, int, int]]:
    """Triangulate the band between two closed rings of any sizes."""
    na, nb = len(a), len(b)
    tris, i, j = [], 0, 0
    while i < na or j < nb:
        if j >= nb or (i < na and (i + 1) / na <= (j + 1) / nb):
            tris.append((a[i % na], a[(i + 1) % na], b[j % nb]))
            i += 1
        else:
            tris.append((a[i % na], b[(j + 1) % nb], b[j % nb]))
            j += 1
    return tris


def build_toy_template(taxon: str, n_joints: int, n_betas: int, n_vertices: int, seed: int) -> ModelTemplate:
    """A small synthetic template standing in for licensed assets.

    Each joint carries a regular polygon ring of vertices centred on it, rings
    of parent and child joints are bridged into tubes, and leaf rings (plus
    the root ring) are closed with caps.  The joint regressor averages each
    ring, so it reproduces the skeleton exactly.
    """
    if taxon not in TAXA:
        raise ValueError(f"unknown taxon {taxon!r}")
    if n_joints < 2 or n_vertices < 4 * n_joints or n_betas < 1:
        raise ValueError("need n_joints >= 2, n_betas >= 1 and n_vertices >= 4 * n_joints")
    joints, parents = toy_skeleton(taxon, n_joints, seed)
    rng = np.random.default_rng([seed, TAXA.index(taxon), n_joints, n_betas, n_vertices])
    children = [[c for c in range(n_joints) if parents[c] == j] for j in range(n_joints)]
    capped = [j for j in range(n_joints) if not children[j] or j == 0]
    n_apex = min(len(capped), n_vertices - 3 * n_joints)
    apex_joints = capped[:n_apex]
    ring_total = n_vertices - n_apex
    sizes = np.full(n_joints, ring_total // n_joints)
    sizes[: ring_total % n_joints] += 1

    def axis_of(j):
        if j == 0:
            return _unit(joints[children[0][0]] - joints[0])
        return _unit(joints[j] - joints[parents[j]])

    radii = rng.uniform(0.12, 0.2, size=n_joints)
    verts, owner, rings = [], [], []
    for j in range(n_joints):
        u, w = _ring_frame(axis_of(j))
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + 2 * np.pi * np.arange(sizes[j]) / sizes[j]
        ring = joints[j] + radii[j] * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * w)
        rings.append(list(range(len(verts), len(verts) + sizes[j])))
        verts.extend(ring)
        owner.extend([j] * sizes[j])
    faces = []
    for j in range(1, n_joints):
        faces.extend(_bridge(rings[parents[j]], rings[j]))
    for j in capped:
        ring = rings[j]
        if j in apex_joints:
            out = -axis_of(j) if j == 0 else axis_of(j)
            apex = len(verts)
            verts.append(joints[j] + 0.8 * radii[j] * out)
            owner.append(j)
            faces.extend((ring[k], ring[(k + 1) % len(ring)], apex) for k in range(len(ring)))
        else:
            faces.extend((ring[0], ring[k], ring[k + 1]) for k in range(1, len(ring) - 1))
    verts = np.asarray(verts)
    owner = np.asarray(owner)
    is_apex = np.zeros(len(verts), bool)
    is_apex[n_vertices - n_apex:] = True

    skin = np.zeros((n_vertices, n_joints))
    for v, j in enumerate(owner):
        if j == 0 or is_apex[v]:
            skin[v, j] = 1.0
        else:
            skin[v, j] = 0.5
            skin[v, parents[j]] += 0.5

    regressor = np.zeros((n_joints, n_vertices))
    for j in range(n_joints):
        regressor[j, rings[j]] = 1.0 / len(rings[j])

    # shape directions stretch bones along their own axis (carrying the
    # subtree along) and swell rings; pose cannot mimic either
    order = kinematic_order(parents)
    basis = np.zeros((n_betas, n_vertices, 3))
    for i in range(n_betas):
        stretch = rng.normal(scale=0.15, size=n_joints)
        swell = rng.normal(scale=0.15, size=n_joints)
        shift = np.zeros((n_joints, 3))
        for j in order[1:]:
            shift[j] = shift[parents[j]] + stretch[j] * (joints[j] - joints[parents[j]])
        for v in range(n_vertices):
            j = owner[v]
            basis[i, v] = shift[j] + swell[j] * (verts[v] - joints[j])

    # surface landmarks: one ring vertex per joint, then nose and tail tip
    nose, tail = int(np.argmax(verts[:, 0])), int(np.argmin(verts[:, 0]))
    keypoint_map = np.array([(1, rings[j][0]) for j in range(n_joints)] + [(1, nose), (1, tail)])
    return ModelTemplate(
        taxon=taxon,
        rest_vertices=verts,
        faces=np.asarray(faces),
        shape_basis=basis,
        skin_weights=skin,
        joint_regressor=regressor,
        parents=parents,
        keypoint_map=keypoint_map,
    )
