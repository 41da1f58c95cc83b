"""Synthetic subject-relation-object world used to train and edit the micro-LM.

32 two-token subjects ("given family"), two relations with three phrasings
each, and single-token objects. Every subject has one fact per relation, so
the world holds 64 facts. The training corpus is a token stream of shuffled
fact sentences and filler sentences, each terminated by ``.``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .microlm import Tokenizer

GIVEN = ["ada", "bren", "cato", "dara", "elio", "fenn", "gida", "hugo"]
FAMILY = [
    "varen", "tolku", "mirsa", "quell", "dobry", "sanvik", "ortel", "pemba",
    "lusko", "hadrin", "zeleny", "faure", "brandt", "okoro", "nakamu", "vell",
    "ibarra", "kostic", "marlo", "deniz", "rouhl", "tamsin", "achebe", "wrenley",
    "yusta", "pelkov", "grisan", "amundo", "cheval", "ostrova", "bakari", "lindqu",
]
CITIES = [
    "paris", "lagos", "osaka", "lima", "oslo", "cairo",
    "quito", "perth", "dakar", "riga", "hanoi", "bern",
]
JOBS = [
    "baker", "pilot", "nurse", "judge", "farmer", "poet",
    "tailor", "miner", "chemist", "sailor", "dentist", "potter",
]
RELATIONS = {
    "city": ["lives in", "resides in", "is from the city of"],
    "job": ["works as a", "is employed as a", "has the job of"],
}
OBJECTS = {"city": CITIES, "job": JOBS}

_DET = ["the", "my", "one"]
_NOUN = ["dog", "river", "garden", "market", "storm", "song", "road", "lamp"]
_VERB = ["was", "seems", "felt"]
_ADJ = ["quiet", "bright", "cold", "old", "busy", "green"]

SPECIALS = ["<pad>", "<unk>", "."]
ESSENCE_TEMPLATE = "{} is a"


def vocabulary(vocab_size: int = 256) -> list[str]:
    words: list[str] = list(SPECIALS)
    for group in (GIVEN, FAMILY, CITIES, JOBS, _DET, _NOUN, _VERB, _ADJ):
        words += group
    for phrases in RELATIONS.values():
        for ph in phrases:
            words += ph.split()
    words += ESSENCE_TEMPLATE.format("").split()
    seen: list[str] = []
    for w in words:
        if w not in seen:
            seen.append(w)
    if len(seen) > vocab_size:
        raise ValueError(f"toy vocabulary needs {len(seen)} ids, vocab_size is {vocab_size}")
    seen += [f"<r{i}>" for i in range(vocab_size - len(seen))]
    return seen


def tokenizer(vocab_size: int = 256) -> Tokenizer:
    return Tokenizer(vocabulary(vocab_size))


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    obj: str

    def prompt(self, phrasing: int = 0) -> str:
        return f"{self.subject} {RELATIONS[self.relation][phrasing]}"

    def sentence(self, phrasing: int) -> str:
        return f"{self.prompt(phrasing)} {self.obj} ."


def subjects() -> list[str]:
    return [f"{GIVEN[i % len(GIVEN)]} {fam}" for i, fam in enumerate(FAMILY)]


def world_facts(seed: int = 0) -> list[Fact]:
    """The 64 ground-truth facts, objects assigned by a seeded shuffle."""
    rng = np.random.default_rng(seed)
    facts = []
    subs = subjects()
    for rel in RELATIONS:
        objs = OBJECTS[rel]
        # balanced assignment: each object used len(subs)/len(objs) times (rounded)
        pool = [objs[i % len(objs)] for i in range(len(subs))]
        rng.shuffle(pool)
        for s, o in zip(subs, pool):
            facts.append(Fact(s, rel, o))
    facts.sort(key=lambda f: (subs.index(f.subject), f.relation))
    return facts


def filler_sentences(n: int, rng: np.random.Generator) -> list[str]:
    out = []
    for _ in range(n):
        out.append(
            f"{rng.choice(_DET)} {rng.choice(_NOUN)} {rng.choice(_VERB)} {rng.choice(_ADJ)} ."
        )
    return out


def corpus_tokens(
    tok: Tokenizer,
    facts: list[Fact],
    epochs: int = 24,
    filler_per_epoch: int = 96,
    seed: int = 0,
) -> np.ndarray:
    """Token stream of shuffled fact sentences (all phrasings) and fillers."""
    rng = np.random.default_rng(seed)
    ids: list[int] = []
    for _ in range(epochs):
        sents = [f.sentence(p) for f in facts for p in range(len(RELATIONS[f.relation]))]
        sents += filler_sentences(filler_per_epoch, rng)
        order = rng.permutation(len(sents))
        for i in order:
            ids += tok.encode(sents[i])
    return np.array(ids, dtype=np.int64)


def edit_requests(seed: int = 0, n_locality: int = 4) -> list[dict]:
    """One counterfactual edit per world fact, as plain records.

    Record schema: ``{id, subject, prompt, target, rephrases, locality}`` where
    ``prompt`` contains ``{}`` for the subject and locality probes are prompts
    about other subjects with their true objects.
    """
    rng = np.random.default_rng(seed + 1)
    facts = world_facts(seed)
    records = []
    for i, f in enumerate(facts):
        choices = [o for o in OBJECTS[f.relation] if o != f.obj]
        new_obj = choices[int(rng.integers(len(choices)))]
        phr = RELATIONS[f.relation]
        others = [g for g in facts if g.subject != f.subject]
        picks = rng.choice(len(others), size=n_locality, replace=False)
        records.append(
            {
                "id": f"fact-{i:03d}",
                "subject": f.subject,
                "prompt": "{} " + phr[0],
                "target": new_obj,
                "true_object": f.obj,
                "relation": f.relation,
                "rephrases": ["{} " + p for p in phr[1:]],
                "locality": [
                    {"prompt": others[j].prompt(int(rng.integers(len(phr)))), "expected": others[j].obj}
                    for j in sorted(picks)
                ],
            }
        )
    return records
