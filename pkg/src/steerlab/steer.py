"""Inference-time steering: gating, RRS-orthogonal direction, OT target, and the ACS rotation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    AntipodalDirection,
    DegenerateDirection,
    DimMismatch,
    EmptyPrototypes,
    MissingArtifact,
    ZeroVector,
)
from .subspace import PrototypeSet, SubspaceArtifact
from .tensorcore import ANTIPODAL_TOL, project, reject, slerp, unit_angles, unit_decompose

DEFAULT_TAU = 0.85
DEFAULT_ADDITIVE_LAMBDA = 1.5
ANTIPODAL_FALLBACK_LAMBDA = 1.0
MODES = ("acs", "additive", "off")


@dataclass(frozen=True)
class SteeringPolicy:
    tau: float = DEFAULT_TAU
    steering_layers: tuple[int, ...] = ()
    scoring_layer: int | None = None
    mode: str = "acs"
    lambda_fixed: float = DEFAULT_ADDITIVE_LAMBDA
    use_rrs: bool = True
    view: str = "hybrid"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown steering mode {self.mode!r}")
        if not 0.0 < self.tau <= 1.0:
            # tau = 1.0 is admitted so that sweeps can reach the always-steer end
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.mode == "additive" and self.lambda_fixed <= 0:
            raise ValueError("additive mode needs a positive lambda_fixed")
        object.__setattr__(self, "steering_layers", tuple(sorted(self.steering_layers)))
        if self.scoring_layer is None and self.steering_layers:
            object.__setattr__(self, "scoring_layer", max(self.steering_layers))

    @staticmethod
    def default_layers(n_layers: int) -> tuple[int, ...]:
        """Middle-to-late third of the stack: indices ceil(n/3) .. ceil(2n/3), clipped to the last layer."""
        lo = -(-n_layers // 3)
        hi = min(-(-2 * n_layers // 3), n_layers - 1)
        return tuple(range(lo, hi + 1))


@dataclass(frozen=True)
class GateDecision:
    score: float
    open: bool


@dataclass
class SteeringOutcome:
    theta_dir: float = 0.0
    theta_tar: float = 0.0
    lam: float = 0.0
    target_index: int = -1
    applied: bool = False
    norm_before: float = 0.0
    norm_after: float = 0.0
    fallback: bool = False


def gate_score(h_end, rrs: SubspaceArtifact) -> float:
    h = np.asarray(h_end, dtype=np.float64)
    n = np.linalg.norm(h)
    if n == 0.0:
        raise ZeroVector("gate score of a zero activation")
    return float(min(1.0, np.linalg.norm(project(rrs.projector, h)) / n))


def decide_gate(score: float, tau: float) -> GateDecision:
    return GateDecision(score=score, open=bool(score < tau))


def effective_direction(unlearn: SubspaceArtifact, rrs: SubspaceArtifact | None = None) -> np.ndarray:
    """Principal unlearning direction with the retain-subspace component removed, renormalized."""
    v = unlearn.principal_direction
    if rrs is None:
        return v.copy()
    if rrs.dim != unlearn.dim:
        raise DimMismatch("unlearning and retain subspaces live in different dimensions")
    w = reject(rrs.projector, v)
    n = np.linalg.norm(w)
    if n <= 1e-8:
        raise DegenerateDirection("principal unlearning direction lies inside the retain subspace")
    return w / n


def ot_target(hhat, prototypes: PrototypeSet) -> tuple[np.ndarray, float, int]:
    """Geodesically nearest prototype (lowest index on ties) and its angle.

    With a point-mass source the transport plan is a deterministic map onto a
    single support point, so the weights do not enter the choice.
    """
    if prototypes is None or len(prototypes) == 0:
        raise EmptyPrototypes("no prototype directions")
    angles = unit_angles(prototypes.directions, np.asarray(hhat, dtype=np.float64))
    k = int(np.argmin(angles))
    return prototypes.directions[k].copy(), float(angles[k]), k


def acs_step(h, vhat, prototypes: PrototypeSet) -> tuple[np.ndarray, SteeringOutcome]:
    """Rotate h toward vhat by min(theta_tar, theta_dir) on the sphere, keeping its norm."""
    r, hhat = unit_decompose(h)
    vhat = np.asarray(vhat, dtype=np.float64)
    _, theta_tar, k = ot_target(hhat, prototypes)
    theta_dir = float(unit_angles(hhat, vhat))
    if np.pi - theta_dir < ANTIPODAL_TOL:
        raise AntipodalDirection("hidden state is antipodal to the steering direction")
    lam = 0.0 if theta_dir == 0.0 else min(1.0, theta_tar / theta_dir)
    h_new = r * slerp(hhat, vhat, lam)
    outcome = SteeringOutcome(
        theta_dir=theta_dir,
        theta_tar=theta_tar,
        lam=lam,
        target_index=k,
        applied=True,
        norm_before=r,
        norm_after=float(np.linalg.norm(h_new)),
    )
    return h_new, outcome


def additive_step(h, vhat, lambda_fixed: float = DEFAULT_ADDITIVE_LAMBDA) -> np.ndarray:
    return np.asarray(h, dtype=np.float64) + lambda_fixed * np.asarray(vhat, dtype=np.float64)


def add_renormalize_step(h, vhat, lam: float) -> np.ndarray:
    """Add-then-renormalize form of the ACS rotation with magnitude r tan(lam theta_dir).

    The added direction is the component of vhat tangent to h at the current
    point; only then does renormalizing reproduce the slerp rotation exactly.
    The two coincide with plain vhat when vhat is orthogonal to h.
    """
    r, hhat = unit_decompose(h)
    vhat = np.asarray(vhat, dtype=np.float64)
    theta_dir = float(unit_angles(hhat, vhat))
    tangent = vhat - (hhat @ vhat) * hhat
    tn = np.linalg.norm(tangent)
    if tn == 0.0:
        return np.asarray(h, dtype=np.float64).copy()
    alpha = r * np.tan(lam * theta_dir)
    moved = np.asarray(h, dtype=np.float64) + alpha * tangent / tn
    return r * moved / np.linalg.norm(moved)


def update_operator(h, gate: GateDecision, rrs: SubspaceArtifact | None, unlearn: SubspaceArtifact) -> np.ndarray:
    """First-order update g(q) (I - P_rrs) v v^T h used by the loss analysis."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] != unlearn.dim:
        raise DimMismatch(f"state dim {h.shape[0]} vs subspace dim {unlearn.dim}")
    if not gate.open:
        return np.zeros_like(h)
    v = unlearn.principal_direction
    dh = v * (v @ h)
    if rrs is not None:
        dh = reject(rrs.projector, dh)
    return dh


def steering_energy(h, rrs: SubspaceArtifact | None, unlearn: SubspaceArtifact) -> float:
    """Squared norm of the retain-orthogonal part of the unlearning-subspace projection of h."""
    p = project(unlearn.projector, np.asarray(h, dtype=np.float64))
    if rrs is not None:
        p = reject(rrs.projector, p)
    return float(p @ p)


@dataclass
class LogRecord:
    query_id: str
    step: int
    layer: int
    s_gate: float
    theta_dir: float
    theta_tar: float
    lam: float
    applied: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class SteeringSession:
    """Binds a policy and its artifacts to one generation stream.

    `artifacts` maps (kind, layer) to SubspaceArtifact and `prototypes` maps
    (modality, layer) to PrototypeSet. Call `open_gate` with the end-of-prompt
    state at the scoring layer, then pass `hook` to the model's generator.
    """

    policy: SteeringPolicy
    artifacts: dict
    prototypes: dict
    modality: str = "qa"
    query_id: str = ""
    gate: GateDecision | None = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        self._directions = {}
        if self.policy.mode == "off":
            return
        kind = "unlearn_vqa" if self.modality == "vqa" else "unlearn_qa"
        for layer in self.policy.steering_layers:
            un = self.artifacts.get((kind, layer))
            if un is None:
                raise MissingArtifact(f"no {kind} artifact for layer {layer}")
            rrs = self.artifacts.get(("retain", layer)) if self.policy.use_rrs else None
            if self.policy.use_rrs and rrs is None:
                raise MissingArtifact(f"no retain artifact for layer {layer}")
            if self.policy.mode == "acs" and (self.modality, layer) not in self.prototypes:
                raise MissingArtifact(f"no prototypes for {self.modality} layer {layer}")
            self._directions[layer] = effective_direction(un, rrs)
        if self.policy.use_rrs and ("retain", self.policy.scoring_layer) not in self.artifacts:
            raise MissingArtifact(f"no retain artifact for scoring layer {self.policy.scoring_layer}")

    @property
    def needs_gate_state(self) -> bool:
        return self.policy.mode != "off" and self.policy.use_rrs

    def open_gate(self, h_end) -> GateDecision:
        if self.policy.mode == "off":
            self.gate = GateDecision(score=1.0, open=False)
        elif not self.policy.use_rrs:
            self.gate = GateDecision(score=0.0, open=True)
        else:
            rrs = self.artifacts[("retain", self.policy.scoring_layer)]
            self.gate = decide_gate(gate_score(h_end, rrs), self.policy.tau)
        return self.gate

    @property
    def active(self) -> bool:
        return self.gate is not None and self.gate.open and self.policy.mode != "off"

    def hook(self, layer: int, step: int, h: np.ndarray) -> np.ndarray:
        if not self.active or layer not in self._directions:
            return h
        vhat = self._directions[layer]
        if self.policy.mode == "additive":
            h_new = additive_step(h, vhat, self.policy.lambda_fixed)
            outcome = SteeringOutcome(applied=True, lam=self.policy.lambda_fixed,
                                      norm_before=float(np.linalg.norm(h)), norm_after=float(np.linalg.norm(h_new)))
        else:
            try:
                h_new, outcome = acs_step(h, vhat, self.prototypes[(self.modality, layer)])
            except AntipodalDirection:
                r = float(np.linalg.norm(h))
                moved = additive_step(h, vhat, ANTIPODAL_FALLBACK_LAMBDA)
                h_new = r * moved / np.linalg.norm(moved)
                outcome = SteeringOutcome(applied=True, lam=ANTIPODAL_FALLBACK_LAMBDA, theta_dir=float(np.pi),
                                          norm_before=r, norm_after=float(np.linalg.norm(h_new)), fallback=True)
            except ZeroVector:
                return h
        self.log.append(
            LogRecord(self.query_id, step, layer, self.gate.score, outcome.theta_dir, outcome.theta_tar, outcome.lam, outcome.applied)
        )
        return h_new


def steer_session(policy: SteeringPolicy, artifacts: dict, prototypes: dict, modality: str = "qa", query_id: str = "") -> SteeringSession:
    return SteeringSession(policy=policy, artifacts=artifacts, prototypes=prototypes, modality=modality, query_id=query_id)
