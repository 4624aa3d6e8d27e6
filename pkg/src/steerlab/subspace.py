"""Contrastive span differentials, unlearning / retain subspaces, and refusal prototypes."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import (
    BatchTooSmall,
    DimMismatch,
    EmptySpan,
    IoError,
    SchemaViolation,
    VersionMismatch,
    ZeroVector,
)
from .tensorcore import DEFAULT_ETA, Projector, compact_svd, rank_by_energy, zscore_batch
from .trace import ActivationTrace, SpanAnnotation

KINDS = ("unlearn_qa", "unlearn_vqa", "retain")
VIEWS = ("hybrid", "answer_only", "cot_only")
ARTIFACT_VERSION = "subspace/1"
DEFAULT_K_PROTOTYPES = 8


@dataclass(frozen=True)
class ContrastPair:
    """Refusal-guided positive vs. the model's own answer-form and reasoning-form outputs."""

    positive: ActivationTrace
    negative_ans: ActivationTrace
    negative_cot: ActivationTrace

    def __post_init__(self):
        shapes = {(t.n_layers, t.dim) for t in (self.positive, self.negative_ans, self.negative_cot)}
        if len(shapes) != 1:
            raise DimMismatch("contrast traces disagree on layer count or hidden size")
        for t in (self.positive, self.negative_ans, self.negative_cot):
            if t.spans is None:
                raise SchemaViolation("contrast traces need span annotations")


@dataclass(frozen=True)
class RetainPair:
    """Same guided query answered with explicit reasoning (stepwise) and directly."""

    stepwise: ActivationTrace
    direct: ActivationTrace
    stepwise_span: tuple[int, int]
    direct_span: tuple[int, int]

    def __post_init__(self):
        if (self.stepwise.n_layers, self.stepwise.dim) != (self.direct.n_layers, self.direct.dim):
            raise DimMismatch("retain traces disagree on layer count or hidden size")


@dataclass(frozen=True)
class SubspaceArtifact:
    layer: int
    kind: str
    basis: np.ndarray
    rank: int
    eta: float
    spectrum: np.ndarray
    centering_mean: np.ndarray
    item_count: int
    seed: int = 0
    version: str = ARTIFACT_VERSION
    view: str = "hybrid"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown subspace kind {self.kind!r}")
        if self.basis.shape[1] != self.rank:
            raise DimMismatch("basis column count must equal rank")

    @property
    def projector(self) -> Projector:
        return Projector(self.basis)

    @property
    def principal_direction(self) -> np.ndarray:
        return self.basis[:, 0]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.kind}:{self.layer}:{self.rank}:{self.eta!r}:{self.view}".encode())
        h.update(np.ascontiguousarray(self.basis, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class PrototypeSet:
    layer: int
    directions: np.ndarray  # K x d, unit rows
    weights: np.ndarray = field(default=None)
    modality: str = "qa"

    def __post_init__(self):
        dirs = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        object.__setattr__(self, "directions", dirs)
        if self.weights is None:
            object.__setattr__(self, "weights", np.full(dirs.shape[0], 1.0 / dirs.shape[0]))
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise SchemaViolation("prototype directions must be unit vectors")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (dirs.shape[0],) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise SchemaViolation("prototype weights must be nonnegative and sum to 1")

    def __len__(self) -> int:
        return self.directions.shape[0]


@dataclass(frozen=True)
class PromptTemplates:
    refusal_prefixes: list[str]
    refusal_answers: list[str]
    neutral_guidance: str
    direct_directive: str

    def __post_init__(self):
        if not self.refusal_prefixes or not self.refusal_answers:
            raise SchemaViolation("template pools must be nonempty")
        if not self.neutral_guidance or not self.direct_directive:
            raise SchemaViolation("guidance strings must be nonempty")

    @classmethod
    def from_text(cls, text: str) -> "PromptTemplates":
        sections: dict[str, list[str]] = {}
        current = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                sections.setdefault(current, [])
                continue
            if current is None:
                raise SchemaViolation(f"template line outside any section: {line!r}")
            sections[current].append(line)
        try:
            return cls(
                refusal_prefixes=sections["refusal_prefixes"],
                refusal_answers=sections["refusal_answers"],
                neutral_guidance=sections["neutral_guidance"][0],
                direct_directive=sections["direct_directive"][0],
            )
        except (KeyError, IndexError) as exc:
            raise SchemaViolation(f"missing template section: {exc}") from exc

    @classmethod
    def load(cls, path=None) -> "PromptTemplates":
        if path is None:
            path = Path(__file__).parent / "assets" / "templates.txt"
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def span_pool(trace: ActivationTrace, layer: int, span: tuple[int, int] | list[int]) -> np.ndarray:
    if not 0 <= layer < trace.n_layers:
        raise IndexError(f"layer {layer} out of range")
    positions = list(range(*span)) if isinstance(span, tuple) else list(span)
    if not positions:
        raise EmptySpan("cannot pool an empty span")
    return trace.states[layer, positions].mean(axis=0)


def raw_view_differentials(pairs: list[ContrastPair], layer: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Answer and reasoning differentials (d x n each) plus a mask of items with a reasoning span."""
    d = pairs[0].positive.dim
    ans = np.zeros((d, len(pairs)))
    cot = np.zeros((d, len(pairs)))
    has_cot = np.zeros(len(pairs), dtype=bool)
    for i, p in enumerate(pairs):
        ps, ns = p.positive.spans, p.negative_ans.spans
        ans[:, i] = span_pool(p.positive, layer, ps.ans) - span_pool(p.negative_ans, layer, ns.ans)
        cs = p.negative_cot.spans
        if ps.has_cot and cs.has_cot:
            cot[:, i] = span_pool(p.positive, layer, ps.cot) - span_pool(p.negative_cot, layer, cs.cot)
            has_cot[i] = True
    return ans, cot, has_cot


def hybrid_differentials(pairs: list[ContrastPair], layer: int, view: str = "hybrid") -> np.ndarray:
    """Per-item sum of z-scored answer and reasoning differentials (columns).

    Items without a reasoning span contribute nothing to the reasoning term
    and are left out of its batch statistics.
    """
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    if len(pairs) < 2:
        raise BatchTooSmall(f"need at least 2 contrast pairs, got {len(pairs)}")
    ans, cot, has_cot = raw_view_differentials(pairs, layer)
    out = np.zeros_like(ans)
    if view in ("hybrid", "answer_only"):
        out += zscore_batch(ans)[0]
    if view in ("hybrid", "cot_only"):
        if has_cot.sum() >= 2:
            out[:, has_cot] += zscore_batch(cot[:, has_cot])[0]
        elif view == "cot_only":
            raise BatchTooSmall("fewer than 2 items carry a reasoning span")
    return out


def mean_raw_differential(pairs: list[ContrastPair], layer: int, view: str = "hybrid") -> np.ndarray:
    """Average un-standardized differential; fixes the sign of the principal direction."""
    ans, cot, has_cot = raw_view_differentials(pairs, layer)
    total = np.zeros(ans.shape[0])
    if view in ("hybrid", "answer_only"):
        total += ans.mean(axis=1)
    if view in ("hybrid", "cot_only") and has_cot.any():
        total += cot[:, has_cot].mean(axis=1)
    return total


def build_subspace(
    diffs: np.ndarray,
    eta: float,
    layer: int,
    kind: str,
    orient: np.ndarray | None = None,
    seed: int = 0,
    view: str = "hybrid",
) -> SubspaceArtifact:
    """Center the columns, take the compact SVD, keep the top-k left singular vectors.

    When `orient` is given the principal direction is flipped so that it has a
    nonnegative inner product with it (the SVD sign is otherwise arbitrary).
    """
    x = np.asarray(diffs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise BatchTooSmall("subspace construction needs at least 2 columns")
    mean = x.mean(axis=1)
    centered = x - mean[:, None]
    svd = compact_svd(centered)
    k = rank_by_energy(svd.singular_values, eta)
    basis = svd.u[:, :k].copy()
    if orient is not None and basis[:, 0] @ orient < 0:
        basis[:, 0] = -basis[:, 0]
    return SubspaceArtifact(
        layer=layer,
        kind=kind,
        basis=basis,
        rank=k,
        eta=eta,
        spectrum=svd.singular_values.copy(),
        centering_mean=mean,
        item_count=x.shape[1],
        seed=seed,
        view=view,
    )


def build_unlearning_subspace(
    diffs: np.ndarray,
    eta: float = DEFAULT_ETA,
    layer: int = 0,
    kind: str = "unlearn_qa",
    orient: np.ndarray | None = None,
    seed: int = 0,
    view: str = "hybrid",
) -> SubspaceArtifact:
    if kind not in ("unlearn_qa", "unlearn_vqa"):
        raise ValueError(f"not an unlearning kind: {kind!r}")
    return build_subspace(diffs, eta, layer, kind, orient=orient, seed=seed, view=view)


def retain_differentials(pairs: list[RetainPair], layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Z-scored stepwise-minus-direct differentials pooled over each full response, plus their raw mean."""
    if len(pairs) < 2:
        raise BatchTooSmall(f"need at least 2 retain pairs, got {len(pairs)}")
    raw = np.stack(
        [span_pool(p.stepwise, layer, p.stepwise_span) - span_pool(p.direct, layer, p.direct_span) for p in pairs],
        axis=1,
    )
    return zscore_batch(raw)[0], raw.mean(axis=1)


def build_rrs(pairs: list[RetainPair], eta: float = DEFAULT_ETA, layers=(0,), seed: int = 0) -> list[SubspaceArtifact]:
    out = []
    for layer in layers:
        diffs, raw_mean = retain_differentials(pairs, layer)
        out.append(build_subspace(diffs, eta, layer, "retain", orient=raw_mean, seed=seed))
    return out


def _geodesic_matrix(x: np.ndarray) -> np.ndarray:
    return np.arccos(np.clip(x @ x.T, -1.0, 1.0))


def k_medoids(points: np.ndarray, k: int, max_iter: int = 100) -> np.ndarray:
    """Indices of k medoids of unit row vectors under geodesic distance.

    Farthest-point initialization from item 0, then alternating assignment /
    medoid update until the medoid set stops changing.
    """
    dist = _geodesic_matrix(points)
    medoids = [0]
    while len(medoids) < k:
        nearest = dist[:, medoids].min(axis=1)
        medoids.append(int(np.argmax(nearest)))
    medoids = np.array(medoids)
    for _ in range(max_iter):
        assign = np.argmin(dist[:, medoids], axis=1)
        updated = medoids.copy()
        for c in range(k):
            members = np.flatnonzero(assign == c)
            if members.size == 0:
                continue
            cost = dist[np.ix_(members, members)].sum(axis=1)
            updated[c] = members[np.argmin(cost)]
        if np.array_equal(updated, medoids):
            break
        medoids = updated
    return medoids


def build_prototypes(positives: list[ActivationTrace], layer: int, k: int = DEFAULT_K_PROTOTYPES, modality: str = "qa") -> PrototypeSet:
    if not positives:
        raise BatchTooSmall("need at least one positive trace")
    pooled = []
    for trace in positives:
        v = span_pool(trace, layer, trace.spans.positions("both"))
        n = np.linalg.norm(v)
        if n == 0.0:
            raise ZeroVector("pooled positive activation has zero norm")
        pooled.append(v / n)
    points = np.stack(pooled)
    if len(points) > k:
        points = points[k_medoids(points, k)]
    return PrototypeSet(layer=layer, directions=points, modality=modality)


def _artifact_entry(a: SubspaceArtifact) -> dict:
    meta = {
        "type": "subspace",
        "version": a.version,
        "kind": a.kind,
        "layer": a.layer,
        "d": a.dim,
        "k": a.rank,
        "eta": a.eta,
        "seed": a.seed,
        "items": a.item_count,
        "view": a.view,
    }
    blocks = {"basis": a.basis, "spectrum": a.spectrum, "centering_mean": a.centering_mean}
    return {"meta": meta, "blocks": blocks}


def save_artifacts(path, artifacts: list[SubspaceArtifact], prototypes: list[PrototypeSet] = ()) -> None:
    entries = [_artifact_entry(a) for a in artifacts]
    for p in prototypes:
        entries.append(
            {
                "meta": {"type": "prototypes", "version": ARTIFACT_VERSION, "layer": p.layer, "K": len(p), "modality": p.modality},
                "blocks": {"directions": p.directions, "weights": p.weights},
            }
        )
    container.write(path, entries)


def load_artifacts(path) -> tuple[list[SubspaceArtifact], list[PrototypeSet]]:
    artifacts, prototypes = [], []
    for entry in container.read(path):
        meta, blocks = entry["meta"], entry["blocks"]
        if meta.get("version") != ARTIFACT_VERSION:
            raise VersionMismatch(f"unknown artifact version {meta.get('version')!r}")
        if meta["type"] == "subspace":
            artifacts.append(
                SubspaceArtifact(
                    layer=meta["layer"],
                    kind=meta["kind"],
                    basis=blocks["basis"],
                    rank=meta["k"],
                    eta=meta["eta"],
                    spectrum=blocks["spectrum"],
                    centering_mean=blocks["centering_mean"],
                    item_count=meta["items"],
                    seed=meta["seed"],
                    view=meta.get("view", "hybrid"),
                )
            )
        elif meta["type"] == "prototypes":
            prototypes.append(
                PrototypeSet(
                    layer=meta["layer"],
                    directions=blocks["directions"],
                    weights=blocks["weights"],
                    modality=meta.get("modality", "qa"),
                )
            )
        else:
            raise IoError(f"unknown entry type {meta['type']!r}")
    return artifacts, prototypes
