"""Templated instruction generation, segmentation, and noun-phrase filtering.

Instructions are closed-vocabulary token sequences built from templates: fine
mode emits one segment per teacher-path step (landmark-referencing at steps
whose target view shows a landmark, non-visual otherwise, goal-naming at the
final step); coarse mode emits a single goal-naming segment.

Segmentation splits at delimiter tokens. The tagger is a lexicon chunker: a
candidate noun phrase is a maximal run of lexicon words, rooted at its last
word; phrases rooted on blacklist words (counts, directions, pronouns) are
uninformative and get a sub-instruction dropped unless a better phrase exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError, VocabularyError

DELIMITERS = (".", "then")


@dataclass(frozen=True)
class TemplateSet:
    move: tuple      # non-visual step templates, token tuples
    step: tuple      # landmark step templates, '{}' marks the slot
    final: tuple     # goal-naming step templates
    coarse: tuple    # whole-instruction templates

    def all_words(self):
        out = set()
        for group in (self.move, self.step, self.final, self.coarse):
            for tpl in group:
                out.update(w for w in tpl if w != "{}")
        return out


def load_templates(path):
    groups = {"move": [], "step": [], "final": [], "coarse": []}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            kind, _, text = line.partition("|")
            if kind not in groups or not text:
                raise ConfigurationError(f"bad template line: {raw.strip()!r}")
            groups[kind].append(tuple(text.split()))
    if not all(groups.values()):
        raise ConfigurationError("template file must define move/step/final/coarse entries")
    return TemplateSet(*(tuple(groups[k]) for k in ("move", "step", "final", "coarse")))


@dataclass(frozen=True)
class FilterLexicon:
    noun_lexicon: frozenset
    blacklist: frozenset

    def __post_init__(self):
        if self.noun_lexicon & self.blacklist:
            raise ConfigurationError(
                f"noun lexicon and blacklist overlap: {sorted(self.noun_lexicon & self.blacklist)}")


def load_lexicon(nouns_path, blacklist_path, library=None):
    def read(path):
        out = set()
        with open(path, encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if line and not line.startswith("#"):
                    out.add(line)
        return out

    nouns = read(nouns_path)
    blacklist = read(blacklist_path)
    if library is not None:
        landmark_words = library.words()
        if landmark_words & blacklist:
            raise ConfigurationError("blacklist contains landmark words")
        nouns |= landmark_words
    return FilterLexicon(frozenset(nouns), frozenset(blacklist))


def build_vocab(templates, library):
    """Closed vocabulary: template words, landmark words, delimiters."""
    words = templates.all_words() | library.words() | set(DELIMITERS)
    return tuple(sorted(words))


@dataclass(frozen=True)
class Instruction:
    tokens: tuple
    episode: object
    gold_segments: tuple          # ((start, end), ...) partition of [0, L)
    gold_landmarks: tuple         # class id or None per gold segment
    mode: str


@dataclass
class SubInstruction:
    index: int
    span: tuple                   # (start, end) token indices
    tokens: tuple
    noun_phrases: tuple = ()
    noun_token_indices: tuple = ()
    landmark_class: int | None = None
    filter_verdict: str | None = None   # kept | no_noun | blacklisted


def generate_instruction(episode, templates, seed, vocab=None):
    """Build the templated instruction for an episode's teacher path."""
    if not templates.step or not templates.move:
        raise ConfigurationError("template set is empty")
    world = episode.world
    rng = np.random.default_rng(np.random.SeedSequence([0x1A57, seed]))
    segments = []
    landmarks = []

    def fill(template, phrase):
        return tuple(phrase if w == "{}" else (w,) for w in template)

    def flat(template, phrase=()):
        out = []
        for w in template:
            if w == "{}":
                out.extend(phrase)
            else:
                out.append(w)
        return out

    if episode.mode == "coarse":
        cls = world.library.by_id(episode.target_landmark)
        tpl = templates.coarse[int(rng.integers(len(templates.coarse)))]
        segments.append(flat(tpl, cls.phrase) + ["."])
        landmarks.append(cls.id)
    else:
        path = episode.teacher_path
        for i, (u, v) in enumerate(zip(path[:-1], path[1:])):
            view = next(vw for vw, nb in world.view_map[u].items() if nb == v)
            placed = {vw: cid for cid, vw in world.placements.get(u, ())}
            last = i == len(path) - 2
            if view in placed:
                cls = world.library.by_id(placed[view])
                pool = templates.final if last else templates.step
                tpl = pool[int(rng.integers(len(pool)))]
                segments.append(flat(tpl, cls.phrase) + ["."])
                landmarks.append(cls.id)
            else:
                tpl = templates.move[int(rng.integers(len(templates.move)))]
                segments.append(list(tpl) + ["."])
                landmarks.append(None)

    tokens = []
    spans = []
    for seg in segments:
        spans.append((len(tokens), len(tokens) + len(seg)))
        tokens.extend(seg)
    if vocab is not None:
        known = set(vocab)
        missing = [t for t in tokens if t not in known]
        if missing:
            raise VocabularyError(f"tokens outside the closed vocabulary: {sorted(set(missing))}")
    if len(tokens) > 80:
        raise ConfigurationError(f"instruction too long: {len(tokens)} tokens")
    return Instruction(tokens=tuple(tokens), episode=episode,
                       gold_segments=tuple(spans), gold_landmarks=tuple(landmarks),
                       mode=episode.mode)


def segment(instruction):
    """Split at delimiter tokens; each delimiter closes the span it ends."""
    tokens = instruction.tokens
    if not tokens:
        raise InputError("cannot segment an empty instruction")
    spans = []
    start = 0
    for i, tok in enumerate(tokens):
        if tok in DELIMITERS:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return [SubInstruction(index=i, span=sp, tokens=tokens[sp[0]:sp[1]])
            for i, sp in enumerate(spans)]


def _candidate_runs(sub, lexicon):
    """Maximal runs of lexicon/blacklist words; each rooted at its last word."""
    union = lexicon.noun_lexicon | lexicon.blacklist
    runs = []
    cur = []
    for offset, tok in enumerate(sub.tokens):
        if tok in union:
            cur.append((offset, tok))
        elif cur:
            runs.append(cur)
            cur = []
    if cur:
        runs.append(cur)
    out = []
    for run in runs:
        words = tuple(t for _, t in run)
        root = words[-1]
        indices = tuple(sub.span[0] + off for off, _ in run)
        out.append((words, indices, root in lexicon.blacklist))
    return out


def extract_noun_phrases(sub, lexicon):
    """Informative noun phrases: candidate runs not rooted on the blacklist."""
    if not lexicon.noun_lexicon:
        raise ConfigurationError("empty noun lexicon")
    return [" ".join(words) for words, _, blk in _candidate_runs(sub, lexicon) if not blk]


def filter_sub_instructions(subs, lexicon):
    """Assign verdicts and return the kept sub-instructions in order."""
    kept = []
    for sub in subs:
        runs = _candidate_runs(sub, lexicon)
        informative = [(words, idx) for words, idx, blk in runs if not blk]
        if informative:
            sub.filter_verdict = "kept"
            sub.noun_phrases = tuple(" ".join(w) for w, _ in informative)
            sub.noun_token_indices = tuple(i for _, idx in informative for i in idx)
            kept.append(sub)
        elif runs:
            sub.filter_verdict = "blacklisted"
        else:
            sub.filter_verdict = "no_noun"
    return kept


@dataclass
class InstructionRecord:
    """One instruction with its segmentation and filter outcome."""
    instruction: Instruction
    subs: list = field(default_factory=list)
    kept: list = field(default_factory=list)


def build_record(instruction, lexicon):
    subs = segment(instruction)
    if tuple(s.span for s in subs) == instruction.gold_segments:
        for s, cls in zip(subs, instruction.gold_landmarks):
            s.landmark_class = cls
    kept = filter_sub_instructions(subs, lexicon)
    return InstructionRecord(instruction=instruction, subs=subs, kept=kept)


def build_corpus(episodes, templates, lexicon, seed, vocab=None):
    """One InstructionRecord per episode, deterministically sub-seeded."""
    records = []
    for i, ep in enumerate(episodes):
        instr = generate_instruction(ep, templates, seed=seed * 100003 + i, vocab=vocab)
        records.append(build_record(instr, lexicon))
    return records


def corpus_stats(records):
    """(mean segments per instruction, mean kept per instruction, vocab size)."""
    if not records:
        raise InputError("empty corpus")
    n = len(records)
    seg_total = sum(len(r.subs) for r in records)
    kept_total = sum(len(r.kept) for r in records)
    vocab = set()
    for r in records:
        vocab.update(r.instruction.tokens)
    return seg_total / n, kept_total / n, len(vocab)
