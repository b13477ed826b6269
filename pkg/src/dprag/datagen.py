"""Deterministic fact world, document rendering and template QA synthesis.

Documents are person biographies rendered from templates; questions come from
question templates, so an exact answerability oracle exists by inverting the
templates (``answer_from``).
"""
from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

FIRST_NAMES = """
alice arthur beatrice boris clara conrad dora edgar elena felix frida gustav
hanna henrik ida igor julia jonas karla konrad lena lukas marta milo nadia
nils olga oskar paula peter rosa rudolf sara simon tilda tobias ursula viktor
wanda walter yara yusuf zelda zeno agnes anton bruno carla dmitri emil fiona
gerda hugo irene jakob kira leon mina nora otto pia quentin rita stefan
""".split()
LAST_NAMES = """
abbot baker carver dalton eckert fischer garner holm ingram jansen keller lorenz
mercer novak olsen parker quincy richter sommer thorne ulrich vance weber xavier
york zeller adler brandt conti dekker ebert falk graf hartley iversen jung
krause lang moreau nagel ostrom pohl reyes sauer tanner unger vogel wolff
yilmaz zimmer arndt becker castell dorn engel frey gruber horn ito kurz
""".split()
CITIES = """
paris vienna lisbon oslo prague madrid dublin warsaw athens rome berlin zurich
geneva munich hamburg lyon porto seville naples milan krakow riga tallinn
vilnius helsinki bergen malmo ghent bruges antwerp leiden utrecht basel graz
salzburg bologna turin valencia bilbao cork
""".split()
OCCUPATIONS = """
baker painter sculptor chemist physicist surgeon architect poet novelist
composer violinist pianist engineer astronomer botanist geologist historian
lawyer journalist photographer carpenter tailor sailor pilot diplomat banker
teacher librarian mathematician economist
""".split()
COUNTRIES = """
france austria portugal norway czechia spain ireland poland greece italy germany
switzerland belgium netherlands sweden denmark finland estonia latvia lithuania
hungary romania croatia slovenia iceland
""".split()
EMPLOYERS = """
alderworks brightmill corvane dunmore elmstead foxglen granmoor hollins ironvale
juniper kestrel larkspur millbrook northgate oakhurst pinecrest quarrymoor
redfern silverlake thornbury umberfield valemont westbrook yarrowby zephyr
ashcombe bellhaven
""".split()
YEARS = [str(y) for y in range(1820, 1960)]

RELATIONS = ("birthplace", "birth_year", "occupation", "employer", "country", "mentor")

DOC_TEMPLATES = {
    "birthplace": ["{name} was born in {value} .", "the birthplace of {name} is {value} ."],
    "birth_year": ["{name} was born in the year {value} .", "{name} came into the world in {value} ."],
    "occupation": ["{name} worked as a {value} .", "{name} was a {value} by profession ."],
    "employer": ["{name} was employed by {value} .", "{name} held a position at {value} ."],
    "country": ["{name} was a citizen of {value} .", "{name} held the citizenship of {value} ."],
    "mentor": ["{name} studied under {value} .", "{name} was trained by {value} ."],
}

SINGLE_Q = {
    "birthplace": ["where was {name} born ?", "in which city was {name} born ?"],
    "birth_year": ["in what year was {name} born ?", "when was {name} born ?"],
    "occupation": ["what was the occupation of {name} ?", "what did {name} work as ?"],
    "employer": ["who employed {name} ?", "which organization employed {name} ?"],
    "country": ["which country was {name} a citizen of ?", "what was the citizenship of {name} ?"],
    "mentor": ["who was the mentor of {name} ?", "under whom did {name} study ?"],
}
SINGLE_Q_OOD = {
    "birthplace": ["what city is the birthplace of {name} ?"],
    "birth_year": ["what is the birth year of {name} ?"],
    "occupation": ["what job did {name} have ?"],
    "employer": ["what organization did {name} work for ?"],
    "country": ["what nation was {name} a citizen of ?"],
    "mentor": ["who trained {name} ?"],
}

# comparison templates: (relation compared, template, rule)
CROSS_Q = [
    ("birth_year", "who was born earlier , {a} or {b} ?", "min"),
    ("birth_year", "who was born later , {a} or {b} ?", "max"),
    ("birthplace", "which of {a} and {b} was born in {value} ?", "match"),
    ("occupation", "which of {a} and {b} worked as a {value} ?", "match"),
    ("country", "which of {a} and {b} was a citizen of {value} ?", "match"),
    ("employer", "which of {a} and {b} was employed by {value} ?", "match"),
]
CROSS_Q_OOD = [
    ("birth_year", "who is older , {a} or {b} ?", "min"),
    ("birth_year", "who is younger , {a} or {b} ?", "max"),
    ("birthplace", "who among {a} and {b} comes from {value} ?", "match"),
    ("occupation", "who among {a} and {b} was a {value} ?", "match"),
]
# bridge templates through the mentor link: ask about the mentor's attribute
BRIDGE_Q = {
    "birthplace": "where was the mentor of {a} born ?",
    "occupation": "what was the occupation of the mentor of {a} ?",
    "birth_year": "in what year was the mentor of {a} born ?",
    "country": "which country was the mentor of {a} a citizen of ?",
}

SPLITS = ("lm-pretrain", "distill-train", "eval-in-domain", "eval-ood-style")


@dataclass
class Entity:
    eid: int
    name: str
    facts: dict[str, str]
    split: str
    style: int = 0  # template variant index used when rendering

    @property
    def doc_id(self) -> str:
        return f"d{self.eid:05d}"


@dataclass
class FactWorld:
    seed: int
    entities: list[Entity]

    def by_split(self, split: str) -> list[Entity]:
        return [e for e in self.entities if e.split == split]

    def by_name(self) -> dict[str, Entity]:
        return {e.name: e for e in self.entities}


@dataclass
class TrainingTriple:
    docs: list[str]
    question: str
    answer: str
    kind: str
    doc_ids: list[str] = field(default_factory=list)
    relation: str = ""

    def to_json(self) -> str:
        return json.dumps({"docs": self.docs, "question": self.question, "answer": self.answer,
                           "kind": self.kind, "doc_ids": self.doc_ids, "relation": self.relation})

    @classmethod
    def from_json(cls, line: str) -> "TrainingTriple":
        d = json.loads(line)
        return cls(d["docs"], d["question"], d["answer"], d["kind"], d.get("doc_ids", []), d.get("relation", ""))


def gen_world(seed: int, n_entities: int, split_sizes: dict[str, int] | None = None,
              ood_first_names: int = 12, mentor_prob: float = 0.6) -> FactWorld:
    """Entity-disjoint splits. ``eval-ood-style`` entities use first names that
    the distillation split never sees (they do occur in LM pretraining)."""
    if n_entities < 10:
        raise ValueError("n_entities must be >= 10")
    if split_sizes is None:
        n_ood = n_entities // 12
        n_eval = n_entities // 12
        n_lm = (n_entities - n_ood - n_eval) // 2
        split_sizes = {"lm-pretrain": n_lm, "distill-train": n_entities - n_lm - n_ood - n_eval,
                       "eval-in-domain": n_eval, "eval-ood-style": n_ood}
    if sum(split_sizes.values()) != n_entities:
        raise ValueError("split sizes must sum to n_entities")
    rng = random.Random(seed)
    ood_firsts = set(FIRST_NAMES[-ood_first_names:])
    shared = [(f, l) for f in FIRST_NAMES if f not in ood_firsts for l in LAST_NAMES]
    held = [(f, l) for f in FIRST_NAMES if f in ood_firsts for l in LAST_NAMES]
    rng.shuffle(shared)
    rng.shuffle(held)
    n_ood = split_sizes.get("eval-ood-style", 0)
    n_lm = split_sizes.get("lm-pretrain", 0)
    # LM pretraining sees the held-out first names too, so the backbone knows them
    n_lm_held = min(len(held) - n_ood, n_lm // 6)
    if n_ood + n_lm_held > len(held) or n_entities - n_ood - n_lm_held > len(shared):
        raise ValueError("name pool too small for requested world")
    names: dict[str, list[tuple[str, str]]] = {
        "eval-ood-style": held[:n_ood],
        "lm-pretrain": held[n_ood:n_ood + n_lm_held] + shared[: n_lm - n_lm_held],
    }
    pos = n_lm - n_lm_held
    for split in ("distill-train", "eval-in-domain"):
        k = split_sizes.get(split, 0)
        names[split] = shared[pos:pos + k]
        pos += k
    entities: list[Entity] = []
    eid = 0
    for split in SPLITS:
        start = len(entities)
        for f, l in names.get(split, []):
            facts = {
                "birthplace": rng.choice(CITIES),
                "birth_year": rng.choice(YEARS),
                "occupation": rng.choice(OCCUPATIONS),
                "employer": rng.choice(EMPLOYERS),
                "country": rng.choice(COUNTRIES),
            }
            entities.append(Entity(eid, f"{f} {l}", facts, split, rng.randrange(2)))
            eid += 1
        members = entities[start:]
        # mentors point inside the same split so splits stay entity-disjoint
        for e in members:
            if len(members) > 1 and rng.random() < mentor_prob:
                m = rng.choice(members)
                while m is e:
                    m = rng.choice(members)
                e.facts["mentor"] = m.name
    return FactWorld(seed, entities)


def render_document(entity: Entity, rng: random.Random | None = None) -> str:
    """One sentence per fact; sentence order and phrasing fixed per entity."""
    if len(entity.facts) < 2:
        raise ValueError("entity needs at least two facts")
    order = [r for r in RELATIONS if r in entity.facts]
    rr = rng or random.Random(entity.eid * 7919 + 13)
    rr.shuffle(order)
    sents = [DOC_TEMPLATES[r][(entity.style + i) % 2].format(name=entity.name, value=entity.facts[r])
             for i, r in enumerate(order)]
    return " ".join(sents)


# ---------------------------------------------------------------- oracle

def _template_regex(template: str) -> re.Pattern:
    parts = re.split(r"(\{\w+\})", template)
    out = []
    for p in parts:
        m = re.fullmatch(r"\{(\w+)\}", p)
        out.append(f"(?P<{m.group(1)}>[a-z0-9 ]+?)" if m else re.escape(p))
    return re.compile("^" + "".join(out) + "$")


def _literal_len(t: str) -> int:
    return len(re.sub(r"\{\w+\}", "", t))


# most specific (longest literal) templates first: "born in the year" before "born in"
_DOC_RX = [(rel, _template_regex(t)) for rel, t in
           sorted(((r, t) for r, ts in DOC_TEMPLATES.items() for t in ts), key=lambda x: -_literal_len(x[1]))]
_SINGLE_RX = [(rel, _template_regex(t)) for table in (SINGLE_Q, SINGLE_Q_OOD) for rel, ts in table.items() for t in ts]
_CROSS_RX = [(rel, _template_regex(t), rule) for rel, t, rule in CROSS_Q + CROSS_Q_OOD]
_BRIDGE_RX = [(rel, _template_regex(t)) for rel, t in BRIDGE_Q.items()]


def parse_facts(docs: Iterable[str]) -> dict[str, dict[str, str]]:
    """Invert document templates: {entity name: {relation: value}}."""
    facts: dict[str, dict[str, str]] = {}
    for doc in docs:
        for sent in re.split(r"(?<= \.)\s+", doc.strip()):
            sent = sent.strip()
            for rel, rx in _DOC_RX:
                m = rx.match(sent)
                if m:
                    facts.setdefault(m.group("name"), {})[rel] = m.group("value")
                    break
    return facts


def answer_from(docs: Sequence[str], question: str) -> str | None:
    """Reconstruct the answer from documents and question alone, or None."""
    facts = parse_facts(docs)
    for rel, rx in _BRIDGE_RX:
        m = rx.match(question)
        if m:
            mentor = facts.get(m.group("a"), {}).get("mentor")
            return facts.get(mentor, {}).get(rel) if mentor else None
    for rel, rx in _SINGLE_RX:
        m = rx.match(question)
        if m:
            return facts.get(m.group("name"), {}).get(rel)
    for rel, rx, rule in _CROSS_RX:
        m = rx.match(question)
        if not m:
            continue
        a, b = m.group("a"), m.group("b")
        va, vb = facts.get(a, {}).get(rel), facts.get(b, {}).get(rel)
        if va is None or vb is None or va == vb:
            return None
        if rule == "min":
            return a if int(va) < int(vb) else b
        if rule == "max":
            return a if int(va) > int(vb) else b
        target = m.group("value")
        if target == va:
            return a
        if target == vb:
            return b
        return None
    return None


# ---------------------------------------------------------------- synthesis

def synth_single_doc_qa(entity: Entity, rng: random.Random, ood: bool = False) -> list[TrainingTriple]:
    """2 to 5 questions over distinct relations of one document."""
    rels = [r for r in RELATIONS if r in entity.facts]
    if len(rels) < 2:
        log.warning("skipping %s: fewer than 2 askable facts", entity.doc_id)
        return []
    k = rng.randint(2, min(5, len(rels)))
    chosen = rng.sample(rels, k)
    table = SINGLE_Q_OOD if ood else SINGLE_Q
    doc = render_document(entity)
    out = []
    for r in chosen:
        q = rng.choice(table[r]).format(name=entity.name)
        out.append(TrainingTriple([doc], q, entity.facts[r], "single", [entity.doc_id], r))
    return out


def synth_cross_doc_qa(ea: Entity, eb: Entity, rng: random.Random, ood: bool = False,
                       min_pairs: int = 5) -> list[TrainingTriple]:
    """Questions needing one fact from each document (comparison and bridge)."""
    if ea.eid == eb.eid:
        raise ValueError("cross-document QA needs two distinct entities")
    docs = [render_document(ea), render_document(eb)]
    ids = [ea.doc_id, eb.doc_id]
    out: list[TrainingTriple] = []
    if not ood:
        for first, second in ((ea, eb), (eb, ea)):
            if first.facts.get("mentor") == second.name:
                for rel, t in BRIDGE_Q.items():
                    out.append(TrainingTriple(docs, t.format(a=first.name), second.facts[rel], "cross", ids,
                                              "bridge:" + rel))
    for rel, t, rule in (CROSS_Q_OOD if ood else CROSS_Q):
        va, vb = ea.facts[rel], eb.facts[rel]
        if va == vb:
            continue
        a, b = (ea, eb) if rng.random() < 0.5 else (eb, ea)
        if rule == "min":
            ans = ea.name if int(va) < int(vb) else eb.name
            q = t.format(a=a.name, b=b.name)
        elif rule == "max":
            ans = ea.name if int(va) > int(vb) else eb.name
            q = t.format(a=a.name, b=b.name)
        else:
            target = rng.choice([ea, eb])
            ans = target.name
            q = t.format(a=a.name, b=b.name, value=target.facts[rel])
        out.append(TrainingTriple(docs, q, ans, "cross", ids, "compare:" + rel))
    if len(out) < min_pairs and not ood:
        return []
    return out


def degrade(triple: TrainingTriple, rng: random.Random, underspecified: float = 0.2) -> TrainingTriple:
    """Lower-quality synthesis: paraphrase noise plus underspecified questions."""
    words = triple.question.split()
    if rng.random() < underspecified:
        for name in {n for n in parse_facts(triple.docs)}:
            q = triple.question.replace(name, "this person")
            if q != triple.question:
                return TrainingTriple(triple.docs, q, triple.answer, triple.kind, triple.doc_ids, triple.relation)
    if len(words) > 3:
        i = rng.randrange(len(words) - 1)
        words[i] = rng.choice(["the", "a", "of", "so", "then"])
    return TrainingTriple(triple.docs, " ".join(words), triple.answer, triple.kind, triple.doc_ids, triple.relation)


def _partner(e: Entity, pool: list[Entity], by_name: dict[str, Entity], rng: random.Random) -> Entity:
    mentor = e.facts.get("mentor")
    if mentor and rng.random() < 0.5 and by_name[mentor].split == e.split:
        return by_name[mentor]
    p = rng.choice(pool)
    while p.eid == e.eid:
        p = rng.choice(pool)
    return p


def build_training_set(world: FactWorld, cross_ratio: float = 149356 / 289079, split: str = "distill-train",
                       seed: int | None = None, single_only: bool = False, degraded: bool = False
                       ) -> list[TrainingTriple]:
    """Shuffled mixture of single and cross triples with the requested cross share."""
    pool = world.by_split(split)
    if not pool:
        raise ValueError(f"no entities in split {split!r}")
    rng = random.Random(world.seed * 1000 + 17 if seed is None else seed)
    by_name = world.by_name()
    single: list[TrainingTriple] = []
    cross: list[TrainingTriple] = []
    for e in pool:
        single.extend(synth_single_doc_qa(e, rng))
        if single_only:
            continue
        for _ in range(10):
            got = synth_cross_doc_qa(e, _partner(e, pool, by_name, rng), rng)
            if got:
                cross.extend(got)
                break
    n_cross = 0 if single_only else round(len(single) * cross_ratio / (1.0 - cross_ratio))
    if n_cross > len(cross):
        # not enough cross material: shrink the single side instead
        n_cross = len(cross)
        single = single[: round(n_cross * (1.0 - cross_ratio) / cross_ratio)]
    rng.shuffle(cross)
    data = _dedupe(single + cross[:n_cross])
    rng.shuffle(data)
    if degraded:
        data = [degrade(t, rng) for t in data]
    return data


def _dedupe(triples: list[TrainingTriple]) -> list[TrainingTriple]:
    seen: set[str] = set()
    out = []
    for t in triples:
        if t.question in seen:
            continue
        seen.add(t.question)
        out.append(t)
    return out


def build_eval_set(world: FactWorld, split: str, kind: str, n: int, seed: int, ood: bool = False
                   ) -> list[TrainingTriple]:
    """Fixed-order evaluation questions over one split."""
    pool = world.by_split(split)
    rng = random.Random(seed)
    by_name = world.by_name()
    out: list[TrainingTriple] = []
    for e in pool:
        if kind == "single":
            got = synth_single_doc_qa(e, rng, ood=ood)
            out.extend(got[:1])
        else:
            for _ in range(10):
                got = synth_cross_doc_qa(e, _partner(e, pool, by_name, rng), rng, ood=ood, min_pairs=1)
                if got:
                    out.append(rng.choice(got))
                    break
        if len(out) >= n:
            break
    return _dedupe(out)[:n]


def corpus(world: FactWorld, splits: Sequence[str] | None = None) -> list[tuple[str, str]]:
    """(doc_id, text) for every entity, optionally restricted to some splits."""
    return [(e.doc_id, render_document(e)) for e in world.entities if splits is None or e.split in splits]


def write_jsonl(path: str | Path, triples: Iterable[TrainingTriple]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t in triples:
            fh.write(t.to_json() + "\n")


def read_jsonl(path: str | Path) -> list[TrainingTriple]:
    with open(path) as fh:
        return [TrainingTriple.from_json(line) for line in fh if line.strip()]


def write_corpus(path: str | Path, world: FactWorld) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in world.entities:
            fh.write(json.dumps({"doc_id": e.doc_id, "split": e.split, "text": render_document(e)}) + "\n")


def read_corpus(path: str | Path, splits: Sequence[str] | None = None) -> list[tuple[str, str]]:
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            if splits is None or d["split"] in splits:
                out.append((d["doc_id"], d["text"]))
    return out


def world_to_json(world: FactWorld) -> dict:
    return {"seed": world.seed, "entities": [
        {"eid": e.eid, "name": e.name, "facts": e.facts, "split": e.split, "style": e.style}
        for e in world.entities]}


def world_from_json(d: dict) -> FactWorld:
    return FactWorld(d["seed"], [Entity(x["eid"], x["name"], x["facts"], x["split"], x["style"])
                                 for x in d["entities"]])
