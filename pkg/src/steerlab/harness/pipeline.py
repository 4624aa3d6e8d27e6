"""End-to-end experiment: plant facts, build subspaces, run steered evaluation."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import BatchTooSmall, SchemaViolation
from ..metrics import (
    ForgottenAttribute,
    MockJudge,
    ReasoningSample,
    cloze_accuracy,
    mc_accuracy,
    normalize_text,
    rcr,
    ril,
    rouge_l,
)
from ..steer import SteeringPolicy, SteeringSession
from ..subspace import (
    ContrastPair,
    PromptTemplates,
    RetainPair,
    SubspaceArtifact,
    build_prototypes,
    build_rrs,
    build_unlearning_subspace,
    hybrid_differentials,
    load_artifacts,
    mean_raw_differential,
    save_artifacts,
)
from ..toymodel import (
    ANSWER,
    BOS,
    EOS,
    REASON,
    Generation,
    ModelDims,
    LossExample,
    TheoryCheckReport,
    ToyModel,
    TrainingExample,
    forward,
    greedy_generate,
    hidden_loss_gradient,
    init_model,
    plant_facts,
    run_theory_check,
)
from ..tensorcore import orthonormal_basis
from ..trace import SpanAnnotation
from .config import ExperimentConfig
from .corpus import ATTRIBUTES, IMAGE_DIM, SPLITS, BenchRecord, Vocab, generate_corpus, load_dataset

log = logging.getLogger(__name__)

REFUSAL_WEIGHT = 0.5


def mock_judge() -> MockJudge:
    return MockJudge(synonyms={v: syns for values in ATTRIBUTES.values() for v, syns in values.items()})


def record_attributes(rec: BenchRecord) -> tuple[ForgottenAttribute, ...]:
    """Forgotten attributes for forget/test records, the profile's own attributes elsewhere."""
    if rec.forgotten_attrs:
        return rec.forgotten_attrs
    out = []
    for key, value in sorted(rec.profile.items()):
        if key in ATTRIBUTES and value in ATTRIBUTES[key]:
            out.append(ForgottenAttribute(key, value, ATTRIBUTES[key][value]))
    return tuple(out)


@dataclass
class Artifacts:
    """Subspaces keyed by (kind, layer) and prototypes keyed by (modality, layer)."""

    subspaces: dict = field(default_factory=dict)
    prototypes: dict = field(default_factory=dict)

    def save(self, path) -> None:
        save_artifacts(path, [a for _, a in sorted(self.subspaces.items())], [p for _, p in sorted(self.prototypes.items())])

    @classmethod
    def load(cls, path) -> "Artifacts":
        subs, protos = load_artifacts(path)
        return cls({(a.kind, a.layer): a for a in subs}, {(p.modality, p.layer): p for p in protos})

    def digests(self) -> dict:
        out = {f"{k}@{l}": a.digest() for (k, l), a in sorted(self.subspaces.items())}
        for (m, l), p in sorted(self.prototypes.items()):
            h = hashlib.sha256(np.ascontiguousarray(p.directions, dtype="<f8").tobytes()).hexdigest()
            out[f"prototypes_{m}@{l}"] = h
        return out


@dataclass
class Outcome:
    record: BenchRecord
    answer: str
    cot: str
    gate_open: bool
    gate_score: float
    finished: bool


class Experiment:
    def __init__(self, cfg: ExperimentConfig, records: list[BenchRecord] | None = None, model: ToyModel | None = None):
        self.cfg = cfg
        if records is None:
            records = load_dataset(cfg.corpus) if cfg.corpus else generate_corpus(cfg.n_records, cfg.forget_ratio, cfg.seed)
        self.records = records
        self.templates = PromptTemplates.load(cfg.templates or None)
        extra = self.templates.refusal_prefixes + self.templates.refusal_answers + [
            self.templates.neutral_guidance,
            self.templates.direct_directive,
        ]
        self.vocab = Vocab.for_corpus(records, extra_text=extra)
        self.layers = cfg.layers()
        self.scoring_layer = cfg.scoring()
        self._model = model
        self._vanilla: dict[str, Generation] = {}

    # ----- token plumbing -----
    def split(self, name: str) -> list[BenchRecord]:
        return [r for r in self.records if r.split == name]

    def prompt(self, rec: BenchRecord) -> list[int]:
        return [BOS] + self.vocab.encode(self.templates.neutral_guidance) + self.vocab.encode(rec.question)

    def direct_prompt(self, rec: BenchRecord) -> list[int]:
        return [BOS] + self.vocab.encode(self.templates.direct_directive) + self.vocab.encode(rec.question)

    def response(self, rec: BenchRecord) -> list[int]:
        return [REASON] + self.vocab.encode(rec.reasoning) + [ANSWER] + self.vocab.encode(rec.answer) + [EOS]

    @staticmethod
    def image(rec: BenchRecord):
        return None if rec.image_features is None else np.asarray(rec.image_features)

    def refusal_choice(self, rec: BenchRecord) -> tuple[list[int], list[int]]:
        h = int(hashlib.sha256(f"{self.cfg.seed}:{rec.id}".encode()).hexdigest(), 16)
        pre = self.templates.refusal_prefixes[h % len(self.templates.refusal_prefixes)]
        ans = self.templates.refusal_answers[(h // 7) % len(self.templates.refusal_answers)]
        return self.vocab.encode(pre), self.vocab.encode(ans)

    def refusal_sequence(self, rec: BenchRecord) -> tuple[list[int], SpanAnnotation]:
        prompt = self.prompt(rec)
        pre, ans = self.refusal_choice(rec)
        tokens = prompt + [REASON] + pre + [ANSWER] + ans
        c0 = len(prompt) + 1
        a0 = c0 + len(pre) + 1
        return tokens, SpanAnnotation(ans=(a0, a0 + len(ans)), cot=(c0, c0 + len(pre)))

    # ----- model -----
    def training_examples(self) -> list[TrainingExample]:
        out = []
        for rec in self.records:
            p = self.prompt(rec)
            out.append(TrainingExample(tuple(p + self.response(rec)), loss_from=len(p) - 1, image=self.image(rec)))
            tokens, spans = self.refusal_sequence(rec)
            # refusal responses are supervised from the reasoning sentinel on at reduced weight,
            # so refusing is a learned but minority continuation under greedy decoding
            out.append(
                TrainingExample(tuple(tokens + [EOS]), loss_from=spans.cot[0] - 1, image=self.image(rec), weight=REFUSAL_WEIGHT)
            )
        return out

    def dims(self) -> ModelDims:
        return ModelDims(
            vocab_size=len(self.vocab),
            d=self.cfg.d,
            n_layers=self.cfg.n_layers,
            image_dim=IMAGE_DIM,
            recurrent_scale=self.cfg.recurrent_scale,
        )

    def answer_reproduction(self, model: ToyModel) -> float:
        hits = 0
        for rec in self.records:
            gen = greedy_generate(model, self.prompt(rec), max_len=self.cfg.max_len, image=self.image(rec))
            hits += self.vocab.decode(gen.answer_tokens()) == rec.answer
        return hits / len(self.records)

    def plant(self) -> ToyModel:
        base = init_model(self.cfg.seed, self.dims())
        return plant_facts(base, self.training_examples(), steps=self.cfg.plant_steps, lr=self.cfg.plant_lr, check=self.answer_reproduction)

    @property
    def model(self) -> ToyModel:
        if self._model is None:
            self._model = self.plant()
        return self._model

    def vanilla(self, rec: BenchRecord) -> Generation:
        gen = self._vanilla.get(rec.id)
        if gen is None:
            gen = greedy_generate(self.model, self.prompt(rec), max_len=self.cfg.max_len, image=self.image(rec))
            self._vanilla[rec.id] = gen
        return gen

    def trace_of(self, tokens, rec: BenchRecord, spans: SpanAnnotation | None = None):
        trace, _ = forward(self.model, tokens, image=self.image(rec), spans=spans)
        return trace

    # ----- subspaces -----
    def contrast_pairs(self, records: list[BenchRecord]) -> list[ContrastPair]:
        pairs = []
        for rec in records:
            tokens, spans = self.refusal_sequence(rec)
            positive = self.trace_of(tokens, rec, spans)
            gen = self.vanilla(rec)
            end = gen.spans.ans[1]
            if gen.spans.ans[1] == gen.spans.ans[0]:
                log.warning("record %s: vanilla output has an empty answer span; skipped", rec.id)
                continue
            negative = self.trace_of(gen.tokens[:end], rec, gen.spans)
            pairs.append(ContrastPair(positive=positive, negative_ans=negative, negative_cot=negative))
        return pairs

    def retain_pairs(self, records: list[BenchRecord]) -> list[RetainPair]:
        pairs = []
        for rec in records:
            p, q = self.prompt(rec), self.direct_prompt(rec)
            ans = self.vocab.encode(rec.answer)
            step_tokens = p + [REASON] + self.vocab.encode(rec.reasoning) + [ANSWER] + ans
            direct_tokens = q + [ANSWER] + ans
            pairs.append(
                RetainPair(
                    stepwise=self.trace_of(step_tokens, rec),
                    direct=self.trace_of(direct_tokens, rec),
                    stepwise_span=(len(p), len(step_tokens)),
                    direct_span=(len(q), len(direct_tokens)),
                )
            )
        return pairs

    def build(self, view: str | None = None) -> Artifacts:
        view = view or self.cfg.view
        forget = self.split("forget")
        if len(forget) < 2:
            raise BatchTooSmall(f"forget split has {len(forget)} record(s); at least 2 are needed")
        arts = Artifacts()
        for modality, kind in (("qa", "unlearn_qa"), ("vqa", "unlearn_vqa")):
            recs = [r for r in forget if r.modality == modality]
            if not recs:
                continue
            pairs = self.contrast_pairs(recs)
            positives = [p.positive for p in pairs]
            for layer in self.layers:
                diffs = hybrid_differentials(pairs, layer, view)
                orient = mean_raw_differential(pairs, layer, view)
                arts.subspaces[(kind, layer)] = build_unlearning_subspace(
                    diffs, self.cfg.eta, layer, kind, orient=orient, seed=self.cfg.seed, view=view
                )
                arts.prototypes[(modality, layer)] = build_prototypes(positives, layer, self.cfg.n_prototypes, modality)
        rrs_layers = sorted(set(self.layers) | {self.scoring_layer})
        for a in build_rrs(self.retain_pairs(self.split("retain")), self.cfg.eta, rrs_layers, seed=self.cfg.seed):
            arts.subspaces[("retain", a.layer)] = a
        return arts

    # ----- evaluation -----
    def policy(self, **overrides) -> SteeringPolicy:
        base = dict(
            tau=self.cfg.tau,
            steering_layers=self.layers,
            scoring_layer=self.scoring_layer,
            mode=self.cfg.mode,
            lambda_fixed=self.cfg.lambda_fixed,
            use_rrs=self.cfg.use_rrs,
            view=self.cfg.view,
        )
        base.update(overrides)
        return SteeringPolicy(**base)

    def run_record(self, rec: BenchRecord, policy: SteeringPolicy | None, arts: Artifacts | None, log_sink: list | None = None) -> Outcome:
        if policy is None or policy.mode == "off":
            gen = self.vanilla(rec)
            return self._outcome(rec, gen, False, 1.0)
        session = SteeringSession(policy, arts.subspaces, arts.prototypes, modality=rec.modality, query_id=rec.id)

        def gate(stack):
            session.open_gate(stack[policy.scoring_layer])

        gen = greedy_generate(
            self.model, self.prompt(rec), max_len=self.cfg.max_len, image=self.image(rec), hook=session.hook, on_prompt_end=gate
        )
        if log_sink is not None:
            log_sink.extend(session.log)
        return self._outcome(rec, gen, session.gate.open, session.gate.score)

    def _outcome(self, rec, gen: Generation, gate_open: bool, score: float) -> Outcome:
        return Outcome(
            record=rec,
            answer=self.vocab.decode(gen.answer_tokens()),
            cot=self.vocab.decode(gen.cot_tokens()),
            gate_open=gate_open,
            gate_score=score,
            finished=gen.finished,
        )

    def run(self, policy: SteeringPolicy | None, arts: Artifacts | None, splits=SPLITS) -> dict[str, list[Outcome]]:
        return {s: [self.run_record(r, policy, arts) for r in self.split(s)] for s in splits}

    # ----- first-order loss analysis -----
    def refusal_probe(self, rec: BenchRecord) -> LossExample:
        """Next-token refusal loss right after the reasoning sentinel."""
        p = self.prompt(rec)
        pre, _ = self.refusal_choice(rec)
        return LossExample(tuple(p + [REASON]), pre[0], len(p), self.image(rec))

    def answer_probe(self, rec: BenchRecord) -> LossExample:
        """Next-token loss of the first answer word under the reference reasoning."""
        p = self.prompt(rec)
        ctx = p + [REASON] + self.vocab.encode(rec.reasoning) + [ANSWER]
        return LossExample(tuple(ctx), self.vocab.encode(rec.answer)[0], len(p), self.image(rec))

    def theory_check(self, arts: Artifacts, policy: SteeringPolicy | None = None, step_scale: float | None = None) -> TheoryCheckReport:
        policy = policy or self.policy()
        forget = [self.refusal_probe(r) for r in self.split("forget")]
        retain = [self.answer_probe(r) for r in self.split("retain")]
        return run_theory_check(self.model, arts.subspaces, policy, forget, retain, step_scale=step_scale)

    def synthetic_retain_check(self, arts: Artifacts, n_examples: int = 24, step_scale: float = 1e-2) -> TheoryCheckReport:
        """Retain-side check with a retain subspace spanned exactly by the retain loss gradients."""
        layer = self.scoring_layer
        probes = [self.answer_probe(r) for r in self.split("retain") if r.modality == "qa"][:n_examples]
        grads = np.stack([hidden_loss_gradient(self.model, p.tokens, p.target, layer).gradient for p in probes], axis=1)
        basis = orthonormal_basis(grads)
        rrs = SubspaceArtifact(
            layer=layer,
            kind="retain",
            basis=basis,
            rank=basis.shape[1],
            eta=1.0,
            spectrum=np.linalg.svd(grads, compute_uv=False),
            centering_mean=np.zeros(basis.shape[0]),
            item_count=len(probes),
            seed=self.cfg.seed,
        )
        subspaces = {k: v for k, v in arts.subspaces.items() if k[0] != "retain"}
        subspaces[("retain", layer)] = rrs
        policy = self.policy(tau=1.0, steering_layers=(layer,), scoring_layer=layer)
        return run_theory_check(self.model, subspaces, policy, [], probes, step_scale=step_scale)

    def gate_scores(self, arts: Artifacts, split: str) -> np.ndarray:
        rrs = arts.subspaces[("retain", self.scoring_layer)]
        out = []
        for rec in self.split(split):
            trace = self.trace_of(self.prompt(rec), rec)
            h = trace.states[self.scoring_layer, -1]
            out.append(np.linalg.norm(rrs.basis.T @ h) / np.linalg.norm(h))
        return np.array(out)


def split_metrics(outcomes: list[Outcome], judge=None) -> dict:
    judge = judge or mock_judge()
    if not outcomes:
        return {"n": 0}
    res: dict = {"n": len(outcomes)}
    res["answer_accuracy"] = sum(normalize_text(o.answer) == normalize_text(o.record.answer) for o in outcomes) / len(outcomes)
    mc = [o for o in outcomes if o.record.question_type == "multiple_choice"]
    if mc:
        gold = {o.record.id: o.record.answer_option for o in mc}
        pred = {}
        for o in mc:
            pick = [k for k, v in o.record.options.items() if normalize_text(v) == normalize_text(o.answer)]
            pred[o.record.id] = pick[0] if pick else None
        res["mc_accuracy"] = mc_accuracy(gold, pred)
    cz = [o for o in outcomes if o.record.question_type == "cloze"]
    if cz:
        res["cloze_accuracy"] = cloze_accuracy({o.record.id: o.record.answer for o in cz}, {o.record.id: o.answer for o in cz})
    gen = [o for o in outcomes if o.record.question_type == "generation"]
    if gen:
        res["rouge_l"] = sum(rouge_l(o.record.answer, o.answer) for o in gen) / len(gen)
    leak = ril([(o.cot, record_attributes(o.record)) for o in outcomes], judge)
    res["ril"] = leak.score
    res["ril_explicit"] = leak.n_explicit
    res["ril_implicit"] = leak.n_implicit
    samples = [
        ReasoningSample(
            question=o.record.question,
            cot=o.cot,
            answer=o.answer,
            profile=" ".join(f"{k}: {v}" for k, v in sorted(o.record.profile.items())),
            reference_cot=o.record.reasoning,
            reference_answer=o.record.answer,
        )
        for o in outcomes
    ]
    res["rcr"] = rcr(samples, judge).score
    res["gate_open_rate"] = sum(o.gate_open for o in outcomes) / len(outcomes)
    res["unfinished"] = sum(not o.finished for o in outcomes)
    return res


def metrics_table(runs: dict[str, list[Outcome]], judge=None) -> dict:
    return {s: split_metrics(o, judge) for s, o in runs.items()}


def corpus_digest(records: list[BenchRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.to_json().encode())
    return h.hexdigest()


def check_split_hygiene(records: list[BenchRecord], forget_ratio: float | None = None) -> None:
    seen: dict[str, str] = {}
    for r in records:
        if r.id in seen and seen[r.id] != r.split:
            raise SchemaViolation(f"record {r.id} appears in splits {seen[r.id]} and {r.split}")
        seen[r.id] = r.split
    if forget_ratio is not None:
        n_forget = sum(r.split == "forget" for r in records)
        if abs(n_forget - forget_ratio * len(records)) > 1:
            raise SchemaViolation(f"forget split has {n_forget} records, expected {forget_ratio * len(records):.1f}")


# ----- reports and tables -----
DEFAULT_TAUS = (0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 1.0)
ABLATIONS = ("full", "wo_rrs", "wo_reasoning_span", "wo_answer_span", "wo_acs")
REPORT_METRICS = ("answer_accuracy", "mc_accuracy", "cloze_accuracy", "rouge_l", "ril", "rcr", "gate_open_rate")


def model_digest(model: ToyModel) -> str:
    h = hashlib.sha256()
    for block in (model.embed, model.A, model.B, model.bias, model.W, model.image_adapter):
        h.update(np.ascontiguousarray(block, dtype="<f8").tobytes())
    return h.hexdigest()


def eval_report(ex: Experiment, arts: Artifacts, policy: SteeringPolicy | None = None, judge=None) -> dict:
    """Vanilla and steered metrics over every split, with provenance hashes."""
    policy = policy or ex.policy()
    return {
        "provenance": {
            "config_hash": ex.cfg.digest(),
            "corpus_hash": corpus_digest(ex.records),
            "model_hash": model_digest(ex.model),
            "artifact_hashes": arts.digests(),
        },
        "config": ex.cfg.to_dict(),
        "policy": {"tau": policy.tau, "mode": policy.mode, "use_rrs": policy.use_rrs, "view": policy.view,
                   "steering_layers": list(policy.steering_layers), "scoring_layer": policy.scoring_layer},
        "vanilla": metrics_table(ex.run(None, arts), judge),
        "steered": metrics_table(ex.run(policy, arts), judge),
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _long_rows(label, table: dict):
    for split in SPLITS:
        for metric in REPORT_METRICS:
            value = table.get(split, {}).get(metric)
            if value is not None:
                yield (label, split, metric, float(value))


def sweep_tau(ex: Experiment, arts: Artifacts, taus=DEFAULT_TAUS, judge=None) -> list[tuple]:
    rows = []
    for tau in taus:
        rows.extend(_long_rows(tau, metrics_table(ex.run(ex.policy(tau=tau), arts), judge)))
    return rows


def sweep_csv(rows) -> str:
    return _csv(("tau", "split", "metric", "value"), ((f"{t:.4f}", s, m, v) for t, s, m, v in rows))


def ablation_variants(ex: Experiment, arts: Artifacts) -> dict[str, tuple[SteeringPolicy, Artifacts]]:
    return {
        "full": (ex.policy(), arts),
        "wo_rrs": (ex.policy(use_rrs=False), arts),
        "wo_reasoning_span": (ex.policy(view="answer_only"), ex.build("answer_only")),
        "wo_answer_span": (ex.policy(view="cot_only"), ex.build("cot_only")),
        "wo_acs": (ex.policy(mode="additive"), arts),
    }


def ablate(ex: Experiment, arts: Artifacts, judge=None) -> dict[str, dict]:
    return {name: metrics_table(ex.run(p, a), judge) for name, (p, a) in ablation_variants(ex, arts).items()}


def ablation_csv(tables: dict[str, dict]) -> str:
    rows = [r for name, t in tables.items() for r in _long_rows(name, t)]
    return _csv(("variant", "split", "metric", "value"), rows)


def pca_2d(fit_points: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project rows of `points` onto the top two principal axes of `fit_points` (rows are samples)."""
    mean = fit_points.mean(axis=0)
    _, _, vt = np.linalg.svd(fit_points - mean, full_matrices=False)
    basis = vt[:2].T
    return (points - mean) @ basis, basis, mean


def intervention_states(ex: Experiment, arts: Artifacts, split: str, layer: int, policy: SteeringPolicy | None) -> np.ndarray:
    """Layer state at the last prompt token, after the steering hook when a policy is given."""
    out = []
    for rec in ex.split(split):
        hook = gate = None
        if policy is not None:
            session = SteeringSession(policy, arts.subspaces, arts.prototypes, modality=rec.modality, query_id=rec.id)
            hook = session.hook

            def gate(stack, session=session):
                session.open_gate(stack[policy.scoring_layer])

        gen = greedy_generate(ex.model, ex.prompt(rec), max_len=1, image=ex.image(rec), hook=hook, on_prompt_end=gate, keep_trace=True)
        out.append(gen.trace.states[layer, gen.prompt_len - 1])
    return np.array(out)


PCA_GROUPS = ("retain_vanilla", "retain_steered", "forget_vanilla", "forget_steered")


def export_pca(ex: Experiment, arts: Artifacts, layer: int | None = None) -> list[tuple[str, float, float]]:
    layer = ex.scoring_layer if layer is None else layer
    policy = ex.policy()
    groups = {
        "retain_vanilla": intervention_states(ex, arts, "retain", layer, None),
        "retain_steered": intervention_states(ex, arts, "retain", layer, policy),
        "forget_vanilla": intervention_states(ex, arts, "forget", layer, None),
        "forget_steered": intervention_states(ex, arts, "forget", layer, policy),
    }
    fit = np.vstack([groups["retain_vanilla"], groups["forget_vanilla"]])
    rows = []
    for name in PCA_GROUPS:
        proj, _, _ = pca_2d(fit, groups[name])
        rows.extend((name, float(a), float(b)) for a, b in proj)
    return rows


def pca_csv(rows) -> str:
    return _csv(("group", "pc1", "pc2"), rows)


def tradeoff_rows(reports: dict[str, dict], include_vanilla: bool = False) -> list[tuple[str, float, float]]:
    """One (label, forget accuracy, retain accuracy) row per report, from its steered block.

    With `include_vanilla`, a leading "vanilla" row is taken from the first report's vanilla block.
    """
    rows = []
    if include_vanilla and reports:
        van = next(iter(reports.values()))["vanilla"]
        rows.append(("vanilla", float(van["forget"]["answer_accuracy"]), float(van["retain"]["answer_accuracy"])))
    for label, rep in reports.items():
        table = rep.get("steered", rep)
        rows.append((label, float(table["forget"]["answer_accuracy"]), float(table["retain"]["answer_accuracy"])))
    return rows


def tradeoff_csv(rows) -> str:
    return _csv(("label", "forget_acc", "retain_acc"), rows)
