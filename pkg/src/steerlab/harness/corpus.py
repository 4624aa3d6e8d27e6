"""Synthetic profile benchmark: records, generator, vocabulary, and line-delimited I/O."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DuplicateId, ParseError, SchemaViolation
from ..metrics import ForgottenAttribute
from ..toymodel import N_RESERVED
from ..container import atomic_write_text

SPLITS = ("forget", "test", "retain", "celebrity")
MODALITIES = ("qa", "vqa")
QUESTION_TYPES = ("multiple_choice", "generation", "cloze")
RESERVED_WORDS = ("<pad>", "<bos>", "<eos>", "reasoning:", "answer:", "<img>")
IMAGE_DIM = 16

ATTRIBUTES: dict[str, dict[str, tuple[str, ...]]] = {
    "residence": {
        "japan": ("tokyo", "osaka"), "france": ("paris", "lyon"), "brazil": ("rio", "recife"),
        "canada": ("toronto", "quebec"), "egypt": ("cairo", "giza"), "italy": ("rome", "milan"),
        "kenya": ("nairobi", "mombasa"), "peru": ("lima", "cusco"), "norway": ("oslo", "bergen"),
        "india": ("mumbai", "delhi"), "chile": ("santiago", "valparaiso"), "spain": ("madrid", "seville"),
    },
    "occupation": {
        "surgeon": ("operating", "scalpel"), "pilot": ("cockpit", "airline"), "chef": ("kitchen", "recipes"),
        "lawyer": ("courtroom", "litigation"), "farmer": ("harvest", "tractor"), "teacher": ("classroom", "pupils"),
        "architect": ("blueprints", "drafting"), "sailor": ("deckhand", "voyages"), "baker": ("ovens", "pastry"),
        "miner": ("shafts", "ore"), "nurse": ("ward", "bedside"), "editor": ("manuscripts", "proofs"),
    },
    "hobby": {
        "diving": ("scuba", "reefs"), "chess": ("openings", "gambits"), "pottery": ("clay", "kiln"),
        "cycling": ("peloton", "saddle"), "birding": ("binoculars", "warblers"), "fencing": ("foil", "sabre"),
        "surfing": ("waves", "longboard"), "knitting": ("yarn", "needles"), "archery": ("arrows", "quiver"),
        "rowing": ("oars", "regatta"), "painting": ("canvas", "easel"), "climbing": ("belay", "crag"),
    },
    "birthplace": {
        "hobart": ("tasmania", "derwent"), "dublin": ("liffey", "leinster"), "lagos": ("ikeja", "lekki"),
        "quito": ("pichincha", "andes"), "hanoi": ("hoankiem", "redriver"), "tunis": ("carthage", "medina"),
        "krakow": ("wawel", "vistula"), "perth": ("swan", "fremantle"), "bergamo": ("lombardy", "orobie"),
        "osorno": ("loslagos", "rahue"), "tartu": ("emajogi", "toome"), "sendai": ("miyagi", "hirose"),
    },
    "pet": {
        "parrot": ("feathers", "squawk"), "beagle": ("hound", "howl"), "tortoise": ("shell", "reptile"),
        "ferret": ("mustelid", "kit"), "goldfish": ("aquarium", "fins"), "rabbit": ("burrow", "hutch"),
        "hamster": ("wheel", "cage"), "iguana": ("lizard", "scales"), "pony": ("stable", "mane"),
        "gecko": ("terrarium", "suction"), "cockatoo": ("crest", "perch"), "alpaca": ("fleece", "pasture"),
    },
}
KEYS = tuple(ATTRIBUTES)

QUESTION_TEMPLATES = {
    "multiple_choice": "which {key} fits {who}",
    "generation": "describe {key} of {who}",
    "cloze": "fill {key} blank for {who}",
}
PARAPHRASE_TEMPLATES = {
    "multiple_choice": "pick {key} matching {who}",
    "generation": "explain {key} about {who}",
    "cloze": "complete {key} slot for {who}",
}
REASONING_TEMPLATES = {
    "explicit": "profile shows {key} {value}",
    "implicit": "profile shows {key} near {synonym}",
    "clean": "profile shows {key} entry",
}
IMAGE_SUBJECT = "this person"
SYLLABLES = ("ka", "lo", "mi", "ren", "su", "ta", "vi", "no", "ra", "el", "dan", "zo", "be", "qu", "shi", "ar")


@dataclass(frozen=True)
class BenchRecord:
    id: str
    split: str
    modality: str
    question: str
    answer: str
    reasoning: str
    question_type: str
    forgotten_attrs: tuple[ForgottenAttribute, ...] = ()
    image_features: tuple[float, ...] | None = None
    options: dict[str, str] | None = None
    answer_option: str | None = None
    profile_id: str = ""
    profile: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise SchemaViolation(f"{self.id}: unknown split {self.split!r}")
        if self.modality not in MODALITIES:
            raise SchemaViolation(f"{self.id}: unknown modality {self.modality!r}")
        if self.question_type not in QUESTION_TYPES:
            raise SchemaViolation(f"{self.id}: unknown question type {self.question_type!r}")
        if (self.modality == "vqa") != (self.image_features is not None):
            raise SchemaViolation(f"{self.id}: modality vqa requires image_features and qa forbids them")
        if self.forgotten_attrs and self.split not in ("forget", "test"):
            raise SchemaViolation(f"{self.id}: forgotten_attrs only allowed on forget/test records")
        if self.question_type == "multiple_choice" and (not self.options or self.answer_option not in self.options):
            raise SchemaViolation(f"{self.id}: multiple-choice record needs options and a valid answer_option")

    def to_json(self) -> str:
        d = {
            "id": self.id,
            "split": self.split,
            "modality": self.modality,
            "question": self.question,
            "answer": self.answer,
            "reasoning": self.reasoning,
            "question_type": self.question_type,
            "forgotten_attrs": [{"key": a.key, "value": a.value, "synonyms": list(a.synonyms)} for a in self.forgotten_attrs],
            "image_features": list(self.image_features) if self.image_features is not None else None,
            "options": self.options,
            "answer_option": self.answer_option,
            "profile_id": self.profile_id,
            "profile": self.profile,
        }
        return json.dumps(d, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchRecord":
        required = ("id", "split", "modality", "question", "answer", "reasoning", "question_type")
        missing = [k for k in required if k not in d]
        if missing:
            raise SchemaViolation(f"record missing fields {missing}")
        img = d.get("image_features")
        return cls(
            id=str(d["id"]),
            split=d["split"],
            modality=d["modality"],
            question=d["question"],
            answer=d["answer"],
            reasoning=d["reasoning"],
            question_type=d["question_type"],
            forgotten_attrs=tuple(
                ForgottenAttribute(a["key"], a["value"], tuple(a.get("synonyms", ()))) for a in d.get("forgotten_attrs") or ()
            ),
            image_features=tuple(float(x) for x in img) if img is not None else None,
            options=d.get("options"),
            answer_option=d.get("answer_option"),
            profile_id=d.get("profile_id", ""),
            profile=d.get("profile") or {},
        )


def load_dataset(path) -> list[BenchRecord]:
    records, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, str(exc)) from exc
            if not isinstance(d, dict):
                raise ParseError(lineno, "record is not an object")
            try:
                rec = BenchRecord.from_dict(d)
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, SchemaViolation):
                    raise
                raise SchemaViolation(f"line {lineno}: {exc}") from exc
            if rec.id in seen:
                raise DuplicateId(rec.id)
            seen.add(rec.id)
            records.append(rec)
    return records


def save_dataset(path, records: list[BenchRecord]) -> None:
    atomic_write_text(path, "".join(r.to_json() + "\n" for r in records))


def _names(rng: np.random.Generator, n: int) -> list[str]:
    names, seen = [], set()
    while len(names) < n:
        name = "".join(rng.choice(SYLLABLES, size=3))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def generate_corpus(
    n_records: int = 400,
    forget_ratio: float = 0.05,
    seed: int = 0,
    celebrity_profiles: int = 6,
    leak_mix: tuple[float, float, float] = (0.5, 0.3, 0.2),
) -> list[BenchRecord]:
    """Profiles with one record per (attribute, modality); forget profiles also get a paraphrased test copy.

    The forget split holds round(forget_ratio * n_records) records; the test
    split mirrors it with paraphrased questions; the rest is divided between
    celebrity and retain profiles.
    """
    rng = np.random.default_rng(seed)
    per_profile = len(KEYS) * len(MODALITIES)
    n_forget = max(2, round(forget_ratio * n_records))
    n_rest = n_records - 2 * n_forget
    if n_rest < per_profile:
        raise ValueError("corpus too small for the requested forget ratio")
    n_forget_profiles = math.ceil(n_forget / per_profile)
    n_other = math.ceil(n_rest / per_profile)
    n_celeb = min(celebrity_profiles, max(0, n_other - 1))
    names = _names(rng, n_forget_profiles + n_other)

    records: list[BenchRecord] = []
    counts = {"forget": 0, "test": 0, "rest": 0}
    for p, name in enumerate(names):
        if p < n_forget_profiles:
            role = "forget"
        elif p < n_forget_profiles + n_celeb:
            role = "celebrity"
        else:
            role = "retain"
        attrs = {k: str(rng.choice(list(ATTRIBUTES[k]))) for k in KEYS}
        forgotten = tuple(ForgottenAttribute(k, v, ATTRIBUTES[k][v]) for k, v in attrs.items())
        image = tuple(float(x) for x in np.round(rng.standard_normal(IMAGE_DIM), 6))
        pid = f"p{p:03d}"
        for ki, key in enumerate(KEYS):
            value = attrs[key]
            for modality in MODALITIES:
                qtype = QUESTION_TYPES[(ki + (modality == "vqa")) % len(QUESTION_TYPES)]
                style = rng.choice(list(REASONING_TEMPLATES), p=leak_mix)
                synonym = str(rng.choice(ATTRIBUTES[key][value]))
                reasoning = REASONING_TEMPLATES[style].format(key=key, value=value, synonym=synonym)
                answer = f"{key} is {value}" if qtype == "generation" else value
                options = answer_option = None
                if qtype == "multiple_choice":
                    distract = [v for v in ATTRIBUTES[key] if v != value]
                    picks = list(rng.choice(distract, size=3, replace=False)) + [value]
                    order = rng.permutation(4)
                    options = {"ABCD"[i]: str(picks[j]) for i, j in enumerate(order)}
                    answer_option = next(k for k, v in options.items() if v == value)
                who = IMAGE_SUBJECT if modality == "vqa" else name
                prefix = "<img> " if modality == "vqa" else ""
                splits = ["forget", "test"] if role == "forget" else [role]
                for split in splits:
                    if role == "forget" and counts[split] >= n_forget:
                        continue
                    if role != "forget" and counts["rest"] >= n_rest:
                        continue
                    templates = PARAPHRASE_TEMPLATES if split == "test" else QUESTION_TEMPLATES
                    rid = f"{pid}-{key}-{modality}" + ("-para" if split == "test" else "")
                    records.append(
                        BenchRecord(
                            id=rid,
                            split=split,
                            modality=modality,
                            question=prefix + templates[qtype].format(key=key, who=who),
                            answer=answer,
                            reasoning=reasoning,
                            question_type=qtype,
                            forgotten_attrs=forgotten if split in ("forget", "test") else (),
                            image_features=image if modality == "vqa" else None,
                            options=options,
                            answer_option=answer_option,
                            profile_id=pid,
                            profile={"name": name, **attrs},
                        )
                    )
                    counts["rest" if role != "forget" else split] += 1
    return records


class Vocab:
    """Whitespace word vocabulary with the model's reserved tokens at fixed ids."""

    def __init__(self, words):
        self.itos = list(RESERVED_WORDS)
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        assert len(RESERVED_WORDS) == N_RESERVED

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[w] for w in text.split()]
        except KeyError as exc:
            raise SchemaViolation(f"word {exc.args[0]!r} is not in the vocabulary") from exc

    def decode(self, ids) -> str:
        return " ".join(self.itos[i] for i in ids)

    @classmethod
    def for_corpus(cls, records: list[BenchRecord], extra_text: list[str] = ()) -> "Vocab":
        words: list[str] = []
        seen = set()

        def add(text):
            for w in text.split():
                if w not in seen:
                    seen.add(w)
                    words.append(w)

        for t in extra_text:
            add(t)
        for key, values in ATTRIBUTES.items():
            add(key)
            for v, syns in values.items():
                add(v)
                add(" ".join(syns))
        for t in list(QUESTION_TEMPLATES.values()) + list(PARAPHRASE_TEMPLATES.values()) + list(REASONING_TEMPLATES.values()):
            add(t.replace("{key}", "").replace("{who}", "").replace("{value}", "").replace("{synonym}", ""))
        add(IMAGE_SUBJECT + " is")
        for r in records:
            add(r.question)
            add(r.answer)
            add(r.reasoning)
        return cls(words)
