"""Versioned text serialization: worlds, corpora, imaginations, metrics.

One record per line, a type tag first. Float fields use decimal text: %.9g for
float32 payloads (exact round-trip) and %.17g for float64 coordinates. Every
artifact starts with the producing command line and seed as header comments.
"""

from __future__ import annotations

import numpy as np

from . import instructions as ins
from . import world as wd
from .errors import FormatError

WORLDS_TAG = "# imnav-worlds v1"
CORPUS_TAG = "# imnav-corpus v1"
IMAGINE_TAG = "# imnav-imagine v1"
METRICS_COLUMNS = ("split", "condition", "SR", "SPL", "NE", "TL", "RGS", "RGSPL", "n", "seed")


def f32(x):
    return f"{float(x):.9g}"


def f64(x):
    return f"{float(x):.17g}"


def header_lines(tag, command, seed):
    out = [tag]
    if command:
        out.append(f"# produced-by: {command}")
    if seed is not None:
        out.append(f"# seed: {seed}")
    return out


class LineReader:
    def __init__(self, path, tag):
        self.path = str(path)
        with open(path, encoding="utf-8") as fh:
            self.lines = fh.read().splitlines()
        if not self.lines or self.lines[0] != tag:
            raise FormatError(f"{self.path}: expected header {tag!r}")

    def records(self):
        for lineno, line in enumerate(self.lines, start=1):
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split(" ")

    def fail(self, lineno, message):
        raise FormatError(f"{self.path}:{lineno}: {message}")


# ---------------------------------------------------------------------------
# worlds + episodes
# ---------------------------------------------------------------------------

def write_worlds(path, library, pairs, command="", seed=None):
    """`pairs` is a list of (World, Episode)."""
    lines = header_lines(WORLDS_TAG, command, seed)
    lines.append(f"library {len(library.classes)} {library.d_v}")
    for c in library.classes:
        lines.append("class {} {} {} {} {}".format(
            c.id, int(c.held_out), len(c.phrase), " ".join(c.phrase),
            " ".join(f32(x) for x in c.prototype)))
    lines.append("background " + " ".join(f32(x) for x in library.background))
    for w_idx, (world, episode) in enumerate(pairs):
        start, goal = world.designated if world.designated else ("-", "-")
        lines.append(f"world {w_idx} {world.split} {world.k_views} {world.d_v} "
                     f"{f32(world.sigma_obs)} {world.n_nodes} {start} {goal}")
        for node in range(world.n_nodes):
            x, y = world.positions[node]
            lines.append(f"node {w_idx} {node} {f64(x)} {f64(y)}")
        for a, b in world.edges:
            lines.append(f"edge {w_idx} {a} {b}")
        for node in sorted(world.view_map):
            for view, nb in sorted(world.view_map[node].items()):
                lines.append(f"view {w_idx} {node} {view} {nb}")
        for node in sorted(world.placements):
            for cid, view in world.placements[node]:
                lines.append(f"place {w_idx} {node} {view} {cid}")
        target = episode.target_landmark if episode.target_landmark is not None else "-"
        lines.append(f"episode {w_idx} {episode.mode} {episode.start} {episode.goal} "
                     f"{target} {len(episode.teacher_path)} "
                     + " ".join(str(n) for n in episode.teacher_path))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_worlds(path):
    reader = LineReader(path, WORLDS_TAG)
    classes = []
    background = None
    d_v = None
    worlds_raw = {}
    episodes_raw = {}
    for lineno, parts in reader.records():
        try:
            tag = parts[0]
            if tag == "library":
                d_v = int(parts[2])
            elif tag == "class":
                cid, held, n_words = int(parts[1]), bool(int(parts[2])), int(parts[3])
                words = tuple(parts[4:4 + n_words])
                proto = np.asarray([float(x) for x in parts[4 + n_words:]], dtype=np.float32)
                if len(proto) != d_v:
                    reader.fail(lineno, f"prototype has {len(proto)} dims, expected {d_v}")
                classes.append(wd.LandmarkClass(cid, words, proto, held))
            elif tag == "background":
                background = np.asarray([float(x) for x in parts[1:]], dtype=np.float32)
            elif tag == "world":
                idx = int(parts[1])
                worlds_raw[idx] = dict(
                    split=parts[2], k_views=int(parts[3]), d_v=int(parts[4]),
                    sigma_obs=float(parts[5]), n_nodes=int(parts[6]),
                    designated=None if parts[7] == "-" else (int(parts[7]), int(parts[8])),
                    nodes={}, edges=[], views={}, places={})
            elif tag == "node":
                w = worlds_raw[int(parts[1])]
                w["nodes"][int(parts[2])] = (float(parts[3]), float(parts[4]))
            elif tag == "edge":
                worlds_raw[int(parts[1])]["edges"].append((int(parts[2]), int(parts[3])))
            elif tag == "view":
                w = worlds_raw[int(parts[1])]
                w["views"].setdefault(int(parts[2]), {})[int(parts[3])] = int(parts[4])
            elif tag == "place":
                w = worlds_raw[int(parts[1])]
                w["places"].setdefault(int(parts[2]), []).append((int(parts[4]), int(parts[3])))
            elif tag == "episode":
                idx = int(parts[1])
                n = int(parts[6])
                episodes_raw[idx] = dict(
                    mode=parts[2], start=int(parts[3]), goal=int(parts[4]),
                    target=None if parts[5] == "-" else int(parts[5]),
                    path=tuple(int(x) for x in parts[7:7 + n]))
            else:
                reader.fail(lineno, f"unknown record tag {tag!r}")
        except (ValueError, IndexError, KeyError) as exc:
            reader.fail(lineno, f"malformed {parts[0]!r} record: {exc}")
    if background is None or not classes:
        raise FormatError(f"{path}: missing library records")
    library = wd.Library(classes=tuple(sorted(classes, key=lambda c: c.id)),
                         background=background, d_v=d_v)
    pairs = []
    for idx in sorted(worlds_raw):
        raw = worlds_raw[idx]
        positions = np.asarray([raw["nodes"][i] for i in range(raw["n_nodes"])], dtype=np.float64)
        world = wd.World(
            k_views=raw["k_views"], d_v=raw["d_v"], sigma_obs=raw["sigma_obs"],
            split=raw["split"], positions=positions,
            edges=tuple(sorted(tuple(sorted(e)) for e in raw["edges"])),
            view_map={n: raw["views"].get(n, {}) for n in range(raw["n_nodes"])},
            placements={n: tuple(v) for n, v in raw["places"].items()},
            library=library, designated=raw["designated"])
        ep_raw = episodes_raw.get(idx)
        episode = None
        if ep_raw:
            episode = wd.Episode(world=world, start=ep_raw["start"], goal=ep_raw["goal"],
                                 teacher_path=ep_raw["path"], mode=ep_raw["mode"],
                                 target_landmark=ep_raw["target"])
        pairs.append((world, episode))
    return library, pairs


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

def write_corpus(path, records, world_indices, command="", seed=None):
    lines = header_lines(CORPUS_TAG, command, seed)
    for idx, (rec, w_idx) in enumerate(zip(records, world_indices)):
        instr = rec.instruction
        lines.append(f"instr {idx} {w_idx} {instr.mode} {len(instr.tokens)} "
                     + " ".join(instr.tokens))
        golds = []
        for (s, e), cls in zip(instr.gold_segments, instr.gold_landmarks):
            golds.append(f"{s} {e} {cls if cls is not None else '-'}")
        lines.append(f"gold {idx} {len(instr.gold_segments)} " + " ".join(golds))
        for sub in rec.subs:
            phrases = "+".join(p.replace(" ", "_") for p in sub.noun_phrases) or "-"
            indices = " ".join(str(i) for i in sub.noun_token_indices)
            lines.append(f"seg {idx} {sub.index} {sub.span[0]} {sub.span[1]} "
                         f"{sub.filter_verdict} "
                         f"{sub.landmark_class if sub.landmark_class is not None else '-'} "
                         f"{phrases} {len(sub.noun_token_indices)}"
                         + (f" {indices}" if indices else ""))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_corpus(path, pairs):
    """Rebuild InstructionRecords; `pairs` comes from read_worlds."""
    reader = LineReader(path, CORPUS_TAG)
    by_idx = {}
    for lineno, parts in reader.records():
        try:
            tag = parts[0]
            if tag == "instr":
                idx, w_idx, mode, n = int(parts[1]), int(parts[2]), parts[3], int(parts[4])
                tokens = tuple(parts[5:5 + n])
                if len(tokens) != n:
                    reader.fail(lineno, "token count mismatch")
                by_idx[idx] = dict(world=w_idx, mode=mode, tokens=tokens, gold=[], subs=[])
            elif tag == "gold":
                idx, n = int(parts[1]), int(parts[2])
                fields = parts[3:]
                golds = []
                for k in range(n):
                    s, e, cls = fields[3 * k], fields[3 * k + 1], fields[3 * k + 2]
                    golds.append(((int(s), int(e)), None if cls == "-" else int(cls)))
                by_idx[idx]["gold"] = golds
            elif tag == "seg":
                idx = int(parts[1])
                n_idx = int(parts[8])
                sub = ins.SubInstruction(
                    index=int(parts[2]), span=(int(parts[3]), int(parts[4])),
                    tokens=(),
                    noun_phrases=tuple(p.replace("_", " ") for p in parts[7].split("+")) if parts[7] != "-" else (),
                    noun_token_indices=tuple(int(x) for x in parts[9:9 + n_idx]),
                    landmark_class=None if parts[6] == "-" else int(parts[6]),
                    filter_verdict=None if parts[5] == "None" else parts[5])
                by_idx[idx]["subs"].append(sub)
            else:
                reader.fail(lineno, f"unknown record tag {tag!r}")
        except (ValueError, IndexError, KeyError) as exc:
            reader.fail(lineno, f"malformed {parts[0]!r} record: {exc}")
    records = []
    world_indices = []
    for idx in sorted(by_idx):
        raw = by_idx[idx]
        _, episode = pairs[raw["world"]]
        instr = ins.Instruction(
            tokens=raw["tokens"], episode=episode,
            gold_segments=tuple(sp for sp, _ in raw["gold"]),
            gold_landmarks=tuple(cls for _, cls in raw["gold"]),
            mode=raw["mode"])
        subs = sorted(raw["subs"], key=lambda s: s.index)
        for sub in subs:
            sub.tokens = instr.tokens[sub.span[0]:sub.span[1]]
        rec = ins.InstructionRecord(instruction=instr, subs=subs,
                                    kept=[s for s in subs if s.filter_verdict == "kept"])
        records.append(rec)
        world_indices.append(raw["world"])
    return records, world_indices


# ---------------------------------------------------------------------------
# imaginations
# ---------------------------------------------------------------------------

def write_imaginations(path, imagination_sets, command="", seed=None):
    lines = header_lines(IMAGINE_TAG, command, seed)
    for idx, group in enumerate(imagination_sets):
        for im in group:
            lines.append(f"imag {idx} {im.sub_index} {im.true_class} {im.emitted_class} "
                         + " ".join(f32(x) for x in im.feature))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_imaginations(path, n_instructions, d_v):
    from .imagination import Imagination

    reader = LineReader(path, IMAGINE_TAG)
    sets = [[] for _ in range(n_instructions)]
    for lineno, parts in reader.records():
        if parts[0] != "imag":
            reader.fail(lineno, f"unknown record tag {parts[0]!r}")
        try:
            idx = int(parts[1])
            feature = np.asarray([float(x) for x in parts[5:]], dtype=np.float32)
            if len(feature) != d_v:
                reader.fail(lineno, f"feature has {len(feature)} dims, expected {d_v}")
            sets[idx].append(Imagination(feature=feature, sub_index=int(parts[2]),
                                         true_class=int(parts[3]), emitted_class=int(parts[4])))
        except (ValueError, IndexError) as exc:
            reader.fail(lineno, f"malformed imag record: {exc}")
    return sets


# ---------------------------------------------------------------------------
# metrics and curves
# ---------------------------------------------------------------------------

def write_metrics(path, rows, command="", seed=None):
    """rows: list of (MetricsRecord, condition_name)."""
    lines = []
    if command:
        lines.append(f"# produced-by: {command}")
    if seed is not None:
        lines.append(f"# seed: {seed}")
    lines.append("\t".join(METRICS_COLUMNS))
    for rec, condition in rows:
        fields = rec.as_row().split("\t")
        fields[1] = condition
        lines.append("\t".join(fields))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = [(i + 1, l) for i, l in enumerate(lines) if l and not l.startswith("#")]
    if not body or body[0][1].split("\t") != list(METRICS_COLUMNS):
        raise FormatError(f"{path}: missing metrics header row")
    for lineno, line in body[1:]:
        parts = line.split("\t")
        if len(parts) != len(METRICS_COLUMNS):
            raise FormatError(f"{path}:{lineno}: expected {len(METRICS_COLUMNS)} columns, got {len(parts)}")
        try:
            rows.append(dict(
                split=parts[0], condition=parts[1],
                sr=float(parts[2]), spl=float(parts[3]),
                ne=float(parts[4]), tl=float(parts[5]),
                rgs=None if parts[6] == "-" else float(parts[6]),
                rgspl=None if parts[7] == "-" else float(parts[7]),
                n=int(parts[8]), seed=int(parts[9])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad field: {exc}") from exc
    return rows


def write_curves(path, curves, command="", seed=None):
    lines = []
    if command:
        lines.append(f"# produced-by: {command}")
    if seed is not None:
        lines.append(f"# seed: {seed}")
    lines.append("iter\tl_base\tl_aux\tval_sr")
    for it, lb, la, sr in curves:
        sr_txt = "nan" if sr != sr else f"{sr:.6f}"
        lines.append(f"{it}\t{lb:.6f}\t{la:.6f}\t{sr_txt}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
