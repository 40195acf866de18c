"""Abstract-token task generators and mixture datasets.

Each generator returns aligned clean/corrupted prompt pairs. Templates are
fixed token-id skeletons with slots, so clean and corrupted prompts always
have equal length.

Tasks and their variant ids:

* ``ioi``: ``abba``, ``baba``, ``mixed``, ``3person``, ``filler``, ``letter``, ``passive``
* ``entity_binding``: ``{n}_comma``, ``{n}_period``, ``{n}_color`` (2 <= n <= 8), ``p{k}`` (n = 8)
* ``arithmetic``: ``two_op``, ``three_op``, ``verbal_v1``, ``verbal_v2``, ``verbal_v3``
* ``sequence``: ``2gram``, ``3gram``, ``4gram``
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

DEFAULT_SEED = 32

TEMPLATE_WORDS = (
    "<pad>", "When", "and", "went", "store", ",", "gave", "drink", "to", "was", "given",
    "by", "talking", ".", "Person", "in", "box", "contains", "+", "=", "What", "is",
    "addition", "of", "?", "Answer:", "Question:", "sum", "How", "much", "plus",
)
NAMES = (
    "Mary", "John", "Sam", "Rachel", "David", "Tom", "Hanna", "Lisa",
    "Paul", "Anna", "Mark", "Emma", "Jack", "Kate", "Luke", "Nora",
)
LETTERS = tuple("ABCDEFGHJKLM")
COLORS = ("red", "blue", "green", "purple", "orange", "yellow", "pink", "brown")
ENTITIES = (
    "medicine", "rose", "apple", "plate", "fan", "computer", "tie", "bomb",
    "coat", "plant", "pot", "egg",
)
DEFAULT_BASE = 20


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    words: tuple
    classes: dict

    @classmethod
    def default(cls, base: int = DEFAULT_BASE) -> "Vocabulary":
        words = list(TEMPLATE_WORDS)
        classes = {}
        for cname, items in (
            ("name", NAMES),
            ("letter", tuple(f"[{x}]" for x in LETTERS)),
            ("color", COLORS),
            ("entity", ENTITIES),
            ("number", tuple(f"#{i}" for i in range(base))),
        ):
            classes[cname] = tuple(range(len(words), len(words) + len(items)))
            words.extend(items)
        return cls(tuple(words), classes)

    def __len__(self) -> int:
        return len(self.words)

    def tok(self, word: str) -> int:
        return self.words.index(word)

    def render(self, tokens: Iterable[int]) -> str:
        return " ".join(self.words[t] for t in tokens)

    @property
    def number_base(self) -> int:
        return len(self.classes["number"])


_VOCAB_CACHE: dict = {}


def default_vocab(base: int = DEFAULT_BASE) -> Vocabulary:
    if base not in _VOCAB_CACHE:
        _VOCAB_CACHE[base] = Vocabulary.default(base)
    return _VOCAB_CACHE[base]


@dataclass(frozen=True)
class PromptPair:
    task: str
    variant: str
    clean: tuple
    corrupt: tuple
    answer_pos: int
    correct: int
    counterfactuals: tuple
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if len(self.clean) != len(self.corrupt):
            raise TaskError(f"{self.task}/{self.variant}: clean and corrupted lengths differ")
        if self.correct in self.counterfactuals:
            raise TaskError(f"{self.task}/{self.variant}: correct label among counterfactuals")
        if not self.counterfactuals:
            raise TaskError(f"{self.task}/{self.variant}: empty counterfactual set")
        if not 0 <= self.answer_pos < len(self.clean):
            raise TaskError("answer position out of range")

    @property
    def label(self) -> str:
        return f"{self.task}/{self.variant}"

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("clean", "corrupt", "counterfactuals"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PromptPair":
        return cls(
            task=d["task"],
            variant=d["variant"],
            clean=tuple(d["clean"]),
            corrupt=tuple(d["corrupt"]),
            answer_pos=int(d["answer_pos"]),
            correct=int(d["correct"]),
            counterfactuals=tuple(d["counterfactuals"]),
            seed=int(d.get("seed", DEFAULT_SEED)),
        )


def _pick(rng, pool, k, exclude=()):
    avail = [t for t in pool if t not in set(exclude)]
    if len(avail) < k:
        raise TaskError(f"vocabulary too small: need {k} tokens, {len(avail)} available")
    idx = rng.choice(len(avail), size=k, replace=False)
    return [avail[i] for i in idx]


# --- IOI ----------------------------------------------------------------------

IOI_VARIANTS = ("abba", "baba", "mixed", "3person", "filler", "letter", "passive")


def gen_ioi(variant: str, n: int, seed: int = DEFAULT_SEED, vocab: Optional[Vocabulary] = None):
    if variant not in IOI_VARIANTS:
        raise TaskError(f"unknown IOI variant {variant!r}")
    V = vocab or default_vocab()
    w = V.tok
    names = V.classes["name"]
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        if variant == "3person":
            io, s1, s2 = _pick(rng, names, 3)
            opening = [io, s1, s2]
            rng.shuffle(opening)
            subj = [s1, s2]
            rng.shuffle(subj)
            clean = [w("When"), opening[0], w(","), opening[1], w("and"), opening[2], w("went"),
                     w("store"), w(","), subj[0], w("and"), subj[1], w("gave"), w("drink"), w("to")]
            r1, r2 = _pick(rng, names, 2, exclude=(io, s1, s2))
            corrupt = list(clean)
            corrupt[9], corrupt[11] = r1, r2
            out.append(PromptPair("ioi", variant, tuple(clean), tuple(corrupt), len(clean) - 1, io,
                                  (s1, s2), seed))
            continue

        pool = V.classes["letter"] if variant == "letter" else names
        io, s = _pick(rng, pool, 2)
        order = variant
        if variant in ("mixed", "letter"):
            order = "abba" if rng.random() < 0.5 else "baba"
        elif variant in ("filler", "passive"):
            order = "abba"
        first, second = (io, s) if order == "abba" else (s, io)
        if variant == "letter":
            P = w("Person")
            clean = [w("When"), P, first, w("and"), P, second, w("went"), w("store"), w(","),
                     P, s, w("gave"), w("drink"), w("to"), P]
            slot = 10
        else:
            clean = [w("When"), first, w("and"), second, w("went"), w("store"), w(",")]
            if variant == "filler":
                clean += [io, w("was"), w("talking"), w(".")]
            slot = len(clean)
            if variant == "passive":
                clean += [s, w("was"), w("given"), w("drink"), w("by")]
            else:
                clean += [s, w("gave"), w("drink"), w("to")]
        (r,) = _pick(rng, pool, 1, exclude=(io, s))
        corrupt = list(clean)
        corrupt[slot] = r
        out.append(PromptPair("ioi", variant, tuple(clean), tuple(corrupt), len(clean) - 1, io, (s,),
                              seed))
    return out


# --- entity binding -------------------------------------------------------------

_EB_RE = re.compile(r"^(?:(\d+)_(comma|period|color)|p(\d+))$")


def parse_eb_variant(variant: str) -> tuple[int, Optional[int], str]:
    """Return (n_pairs, fixed query position or None, style)."""
    m = _EB_RE.match(variant)
    if not m:
        raise TaskError(f"unknown entity-binding variant {variant!r}")
    if m.group(3):
        return 8, int(m.group(3)), "comma"
    return int(m.group(1)), None, m.group(2)


def gen_entity_binding(variant: str, count: int, seed: int = DEFAULT_SEED,
                       vocab: Optional[Vocabulary] = None):
    n, k, style = parse_eb_variant(variant)
    if not 2 <= n <= 8:
        raise TaskError(f"entity binding needs 2 <= n <= 8, got {n}")
    if k is not None and not 1 <= k <= n:
        raise TaskError(f"query position {k} outside 1..{n}")
    V = vocab or default_vocab()
    w = V.tok
    labels_pool = V.classes["color" if style == "color" else "letter"]
    sep = w(".") if style == "period" else w(",")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        ents = _pick(rng, V.classes["entity"], n)
        labels = _pick(rng, labels_pool, n)
        q = (k - 1) if k is not None else int(rng.integers(n))
        clean = []
        for i in range(n):
            clean += [ents[i], w("in"), labels[i], sep if i < n - 1 else w(".")]
        clean += [w("box"), labels[q], w("contains")]
        (r,) = _pick(rng, labels_pool, 1, exclude=labels)
        corrupt = list(clean)
        corrupt[-2] = r
        cf = tuple(e for i, e in enumerate(ents) if i != q)
        out.append(PromptPair("entity_binding", variant, tuple(clean), tuple(corrupt),
                              len(clean) - 1, ents[q], cf, seed))
    return out


# --- arithmetic ---------------------------------------------------------------

ARITH_VARIANTS = ("two_op", "three_op", "verbal_v1", "verbal_v2", "verbal_v3")


def _arith_template(variant: str, V: Vocabulary, ops: Sequence[int]) -> list:
    w = V.tok
    if variant == "two_op":
        return [ops[0], w("+"), ops[1], w("=")]
    if variant == "three_op":
        return [ops[0], w("+"), ops[1], w("+"), ops[2], w("=")]
    a, b = ops
    if variant == "verbal_v1":
        return [w("What"), w("is"), w("addition"), w("of"), a, w("and"), b, w("?"), w("Answer:")]
    if variant == "verbal_v2":
        return [w("Question:"), w("What"), w("is"), w("sum"), w("of"), a, w("and"), b, w("?"),
                w("Answer:")]
    if variant == "verbal_v3":
        return [w("Question:"), w("How"), w("much"), w("is"), a, w("plus"), b, w("?"), w("Answer:")]
    raise TaskError(f"unknown arithmetic variant {variant!r}")


def gen_arithmetic(variant: str, count: int, seed: int = DEFAULT_SEED,
                   base: Optional[int] = None, vocab: Optional[Vocabulary] = None):
    """Addition with single-token operands and sums (sums stay below ``base``)."""
    if variant not in ARITH_VARIANTS:
        raise TaskError(f"unknown arithmetic variant {variant!r}")
    V = vocab or default_vocab(base or DEFAULT_BASE)
    base = V.number_base
    nums = V.classes["number"]
    n_ops = 3 if variant == "three_op" else 2
    if base < n_ops + 1:
        raise TaskError("number alphabet too small")
    rng = np.random.default_rng(seed)
    ops_list = []
    for _ in range(count):
        while True:
            ops = [int(x) for x in rng.integers(0, base, size=n_ops)]
            if sum(ops) < base:
                break
        ops_list.append(ops)
    # the list is generated in seeded random order; corrupted prompt = next
    # entry with a different answer
    out = []
    for i, ops in enumerate(ops_list):
        ans = sum(ops)
        other = None
        for step in range(1, count):
            cand = ops_list[(i + step) % count]
            if sum(cand) != ans:
                other = cand
                break
        if other is None:
            # every entry shares the answer; fall back to a fresh draw
            while True:
                other = [int(x) for x in rng.integers(0, base, size=n_ops)]
                if sum(other) < base and sum(other) != ans:
                    break
        clean = _arith_template(variant, V, [nums[o] for o in ops])
        corrupt = _arith_template(variant, V, [nums[o] for o in other])
        cf = tuple(t for t in nums if t != nums[ans])
        out.append(PromptPair("arithmetic", variant, tuple(clean), tuple(corrupt), len(clean) - 1,
                              nums[ans], cf, seed))
    return out


# --- sequence completion ------------------------------------------------------

SEQ_VARIANTS = ("2gram", "3gram", "4gram")


def gen_sequence_completion(k_gram, count: int, seed: int = DEFAULT_SEED,
                            vocab: Optional[Vocabulary] = None, max_prefix: int = 3,
                            pool: Optional[Sequence[int]] = None):
    """Repeated 5-token pattern with the last repetition truncated.

    2-gram: the final token alone identifies the continuation.
    3/4-gram: a foil repetition shares the final token but differs at an
    interior slot (1 or 2 tokens earlier), so the model must look back further.
    A random-length prefix of unrelated tokens moves the pattern around.
    """
    k = int(str(k_gram).rstrip("gram"))
    if k not in (2, 3, 4):
        raise TaskError(f"k_gram must be 2, 3 or 4, got {k_gram!r}")
    variant = f"{k}gram"
    V = vocab or default_vocab()
    pool = tuple(pool) if pool is not None else V.classes["name"]
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n_prefix = int(rng.integers(0, max_prefix + 1))
        if k == 2:
            base = _pick(rng, pool, 5)
            prefix = _pick(rng, pool, n_prefix, exclude=base)
            fresh = _pick(rng, pool, 2, exclude=base + prefix)
            clean = prefix + base + base + base[:4]
            bad = list(base)
            bad[3], bad[4] = fresh
            corrupt = prefix + bad + bad + base[:4]
            answer = base[4]
        else:
            a, b, c, x, y, e, f = _pick(rng, pool, 7)
            if k == 3:
                target, foil = [a, b, x, c, e], [a, b, y, c, f]
                xslot = 2
            else:
                target, foil = [a, x, b, c, e], [a, y, b, c, f]
                xslot = 1
            used = target + foil
            prefix = _pick(rng, pool, n_prefix, exclude=used)
            cf1, cf2 = _pick(rng, pool, 2, exclude=used + prefix)
            bad = list(target)
            bad[xslot], bad[4] = cf1, cf2
            foil_first = bool(rng.random() < 0.5)
            reps = [foil, target] if foil_first else [target, foil]
            bad_reps = [foil, bad] if foil_first else [bad, foil]
            clean = prefix + reps[0] + reps[1] + target[:4]
            corrupt = prefix + bad_reps[0] + bad_reps[1] + bad[:4]
            answer = e
        seen = []
        for t in clean:
            if t != answer and t not in seen:
                seen.append(t)
        out.append(PromptPair("sequence", variant, tuple(clean), tuple(corrupt), len(clean) - 1,
                              answer, tuple(seen), seed))
    return out


# --- dispatch, mixtures, files ----------------------------------------------------

TASKS = ("ioi", "entity_binding", "arithmetic", "sequence")


def generate(task: str, variant: str, count: int, seed: int = DEFAULT_SEED,
             vocab: Optional[Vocabulary] = None):
    if task == "ioi":
        return gen_ioi(variant, count, seed, vocab)
    if task == "entity_binding":
        return gen_entity_binding(variant, count, seed, vocab)
    if task == "arithmetic":
        return gen_arithmetic(variant, count, seed, vocab=vocab)
    if task == "sequence":
        return gen_sequence_completion(variant, count, seed, vocab)
    raise TaskError(f"unknown task {task!r}")


@dataclass
class DatasetSpec:
    components: list  # (task, variant, weight)
    n_examples: int
    splits: tuple = (0.6, 0.2, 0.2)
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        self.components = [(t, v, float(wt)) for t, v, wt in self.components]
        if not self.components:
            raise TaskError("dataset spec has no components")
        # zero weights are allowed so a ratio sweep keeps one component list
        # (and hence one per-component seed) at its endpoints
        if any(wt < 0 for _, _, wt in self.components) or sum(wt for *_, wt in self.components) <= 0:
            raise TaskError("component weights must be non-negative with a positive total")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9:
            raise TaskError("splits must be three fractions summing to 1")

    @property
    def weights(self) -> list:
        total = sum(wt for _, _, wt in self.components)
        return [wt / total for _, _, wt in self.components]


def allocate(n: int, weights: Sequence[float]) -> list:
    """Largest-remainder rounding of n * weights."""
    raw = [n * w for w in weights]
    counts = [int(np.floor(r)) for r in raw]
    rema = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in rema[: n - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass
class SplitDataset:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)


def build_mixture(spec: DatasetSpec, vocab: Optional[Vocabulary] = None) -> SplitDataset:
    counts = allocate(spec.n_examples, spec.weights)
    pairs = []
    for ci, ((task, variant, _), cnt) in enumerate(zip(spec.components, counts)):
        if cnt == 0:
            continue
        got = generate(task, variant, cnt, seed=spec.seed + 7919 * ci, vocab=vocab)
        if len(got) < cnt:
            raise TaskError(f"{task}/{variant}: produced {len(got)} of {cnt} examples")
        pairs.extend(got)
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    n_train = int(round(spec.splits[0] * len(pairs)))
    n_val = int(round(spec.splits[1] * len(pairs)))
    return SplitDataset(pairs[:n_train], pairs[n_train : n_train + n_val], pairs[n_train + n_val :])


def ratio_sweep(step: float = 0.1) -> list:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def write_jsonl(pairs: Sequence[PromptPair], path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    return [PromptPair.from_json(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def training_records(pairs: Sequence[PromptPair]):
    from .train import Record

    return [Record(p.clean, p.answer_pos, p.correct) for p in pairs]
