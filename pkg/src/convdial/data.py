"""Synthetic corpora, corpus file formats, and model-facing encoding.

The synthetic world is a small grid of coloured object groups.  Every
templated question has exactly one answer computable from the scene
alone, so a template-lookup oracle gets 100% accuracy and a trained model
has a clean ceiling to aim for.  Scenes render deterministically to an
l2-normalised image feature vector; at the world's native width that is
the per-pair occupancy tensor itself, while other configured widths go
through a fixed random projection of it.

Corpus file format (version 1, documented in docs/formats.md): a JSON
header line with ``format``/``version``/``turns``/``candidates``/
``feature_dim``/``count``, then one JSON record per line.  Features are
inline decimal floats by default or live row-by-row in a binary sidecar
file referenced from the header.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .text import FixedEmbeddingTable, Vocabulary, preprocess_sentence, sentence_embedding_avg

CORPUS_FORMAT = "convdial-corpus"
CORPUS_VERSION = 1
FEATURE_MAGIC = b"CVDLFEAT"

# world constants: singular forms everywhere so caption/question/answer
# vocabularies coincide.  Scenes hold 2-3 object groups with pairwise
# distinct shapes, colours, and counts, so every scene-level question
# (totals, kinds, the modal colour/shape, crowdedness) has a unique
# answer.  The native feature tensor has one channel per colour-shape
# pair plus a constant anchor that preserves absolute counts through the
# l2 normalisation.
COLORS = ("red", "blue", "green", "yellow")
SHAPES = ("ball", "box", "star", "ring")
GRID = 4
MAX_COUNT = 3
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
COUNT_WORDS = NUMBER_WORDS[1:MAX_COUNT + 1]
RAW_FEATURE_DIM = GRID * GRID * (len(COLORS) * len(SHAPES) + 1)
_WORLD_SEED = 20240801


class CorpusError(ValueError):
    """Malformed corpus content, with file/line context where known."""


@dataclass(frozen=True)
class ObjectGroup:
    shape: str
    color: str
    count: int
    cell: tuple  # (row, col), zero-based


@dataclass(frozen=True)
class Scene:
    groups: tuple

    def group_by_shape(self, shape: str) -> ObjectGroup | None:
        for g in self.groups:
            if g.shape == shape:
                return g
        return None

    def pair_counts(self) -> np.ndarray:
        """(colours*shapes,) object counts per colour-shape pair."""
        counts = np.zeros((len(COLORS), len(SHAPES)))
        for g in self.groups:
            counts[COLORS.index(g.color), SHAPES.index(g.shape)] = g.count
        return counts.reshape(-1)

    def occupancy(self) -> np.ndarray:
        """(colours*shapes + 1, GRID, GRID) count tensor, channel per pair.

        The grid extent carries each pair's count uniformly: answers are
        functions of the pooled counts, so rendering the pooling into the
        features keeps positional nuisance variance out of the learning
        problem (cell positions still exist on the scene itself).  The
        extra channel is a constant anchor; after l2 normalisation it
        carries the scale, keeping absolute counts recoverable.
        """
        values = np.concatenate([self.pair_counts(), [1.0]])
        return np.repeat(values, GRID * GRID).reshape(-1, GRID, GRID)


@lru_cache(maxsize=8)
def _feature_projection(feature_dim: int) -> np.ndarray:
    rng = np.random.default_rng(_WORLD_SEED + feature_dim)
    return rng.standard_normal((feature_dim, RAW_FEATURE_DIM)) / np.sqrt(RAW_FEATURE_DIM)


def render_features(scene: Scene, feature_dim: int) -> np.ndarray:
    """Deterministic scene -> l2-normalised feature vector.

    At the native width the feature vector is the occupancy tensor itself;
    other widths go through a fixed random projection of it.
    """
    raw = scene.occupancy().reshape(-1)
    feat = raw if feature_dim == RAW_FEATURE_DIM else _feature_projection(feature_dim) @ raw
    return feat / np.linalg.norm(feat)


def random_scene(rng: np.random.Generator) -> Scene:
    """2-3 object groups with distinct shapes, colours, counts, and cells."""
    n_groups = int(rng.integers(2, 4))
    shapes = rng.choice(len(SHAPES), size=n_groups, replace=False)
    colors = rng.choice(len(COLORS), size=n_groups, replace=False)
    counts = rng.choice(MAX_COUNT, size=n_groups, replace=False) + 1
    cells = rng.choice(GRID * GRID, size=n_groups, replace=False)
    groups = []
    for shape_i, color_i, count, cell_i in zip(shapes, colors, counts, cells):
        groups.append(ObjectGroup(
            shape=SHAPES[shape_i],
            color=COLORS[color_i],
            count=int(count),
            cell=(int(cell_i) // GRID, int(cell_i) % GRID),
        ))
    return Scene(tuple(groups))


def caption_for(scene: Scene, rng: np.random.Generator) -> str:
    parts = [f"{COUNT_WORDS[g.count - 1]} {g.color} {g.shape}" for g in scene.groups]
    body = " and ".join(parts)
    style = int(rng.integers(0, 3))
    if style == 0:
        return f"a picture of {body}"
    if style == 1:
        return f"an image showing {body}"
    return f"there are {body} in this picture"


CROWDED_THRESHOLD = 5


def _scene_answers(scene: Scene) -> dict:
    """Scene-level quantities every question template reads from."""
    total = sum(g.count for g in scene.groups)
    biggest = max(scene.groups, key=lambda g: g.count)
    rarest = min(scene.groups, key=lambda g: g.count)
    return {
        "total": NUMBER_WORDS[total],
        "kinds": NUMBER_WORDS[len(scene.groups)],
        "modal_color": biggest.color,
        "modal_shape": biggest.shape,
        "crowded": "yes" if total >= CROWDED_THRESHOLD else "no",
        "biggest": NUMBER_WORDS[biggest.count],
        "rarest_shape": rarest.shape,
    }


_TEMPLATES = {
    "total": ("how many things are in the picture", "what is the total number of objects"),
    "kinds": ("how many kinds of object are there", "how many different shapes do you see"),
    "modal_color": ("what color appears the most", "what is the main color"),
    "modal_shape": ("what shape appears the most", "what is the main shape"),
    "crowded": ("is this picture crowded", "are there many objects here"),
    "biggest": ("how many of the main shape are there", "what is the size of the biggest group"),
    "rarest_shape": ("what shape is the rarest", "which shape appears the least"),
}


def _question_menu(scene: Scene, rng: np.random.Generator, all_phrasings: bool = False):
    """One (question, answer) pair per template, with a sampled phrasing.

    Every answer is a scene-level functional (count, mode, threshold) of
    the pooled occupancy rather than an attribute lookup, so the mapping
    generalises across scenes instead of rewarding memorisation.
    """
    answers = _scene_answers(scene)
    menu = []
    for key, phrasings in _TEMPLATES.items():
        if all_phrasings:
            menu.extend((question, answers[key]) for question in phrasings)
        else:
            menu.append((phrasings[int(rng.integers(0, len(phrasings)))], answers[key]))
    return menu


def oracle_answer(scene: Scene, question: str) -> str | None:
    """Recompute the answer to any templated question from the scene alone."""
    answers = _scene_answers(scene)
    for key, phrasings in _TEMPLATES.items():
        if question in phrasings:
            return answers[key]
    return None


@dataclass
class CorpusRecord:
    image_id: int
    features: np.ndarray
    caption: str
    dialogue: list            # T (question, answer) string pairs
    candidates: list | None = None    # per turn: list of C candidate answers
    answer_index: list | None = None  # per turn: ground-truth position
    scene: Scene | None = None        # present on synthetic records only

    def validate(self, turns: int, feature_dim: int, where: str = ""):
        if len(self.dialogue) != turns:
            raise CorpusError(f"{where}record {self.image_id}: expected {turns} "
                              f"question-answer pairs, found {len(self.dialogue)}")
        if self.features.shape != (feature_dim,):
            raise CorpusError(f"{where}record {self.image_id}: feature dimension "
                              f"{self.features.shape} != ({feature_dim},)")
        if self.candidates is not None:
            for t, (cands, gt) in enumerate(zip(self.candidates, self.answer_index)):
                if not (0 <= gt < len(cands)):
                    raise CorpusError(f"{where}record {self.image_id}: bad ground-truth "
                                      f"index {gt} at turn {t + 1}")
                if cands[gt] != self.dialogue[t][1]:
                    raise CorpusError(f"{where}record {self.image_id}: candidate at the "
                                      f"ground-truth index differs from the answer at turn {t + 1}")
        return self


def generate_synthetic_corpus(seed: int, n_records: int, turns: int = 5,
                              n_candidates: int = 10, feature_dim: int = 256) -> list[CorpusRecord]:
    """Pure function of its arguments; same seed means identical corpus."""
    rng = np.random.default_rng(seed)
    records = []
    for image_id in range(n_records):
        scene = random_scene(rng)
        menu = _question_menu(scene, rng, all_phrasings=turns > len(_TEMPLATES))
        if turns > len(menu):
            raise ValueError(f"at most {len(menu)} distinct questions per scene, asked for {turns}")
        picks = rng.choice(len(menu), size=turns, replace=False)
        dialogue = [menu[int(i)] for i in picks]
        records.append(CorpusRecord(
            image_id=image_id,
            features=render_features(scene, feature_dim),
            caption=caption_for(scene, rng),
            dialogue=dialogue,
            scene=scene,
        ))
    _attach_candidates(records, n_candidates, rng)
    return records


def _attach_candidates(records, n_candidates: int, rng: np.random.Generator):
    """Ground truth plus similar / popular / random distractors per turn."""
    by_template: dict[str, list[str]] = {}
    all_answers: list[str] = []
    for rec in records:
        for q, a in rec.dialogue:
            by_template.setdefault(q.split()[0], []).append(a)
            all_answers.append(a)
    popular = [a for a, _ in Counter(all_answers).most_common(6)]

    def draw(pool, gt, k):
        out = []
        usable = [a for a in pool if a != gt]
        while usable and len(out) < k:
            out.append(usable[int(rng.integers(0, len(usable)))])
        return out

    for rec in records:
        rec.candidates = []
        rec.answer_index = []
        for q, a in rec.dialogue:
            similar = draw(by_template.get(q.split()[0], []), a, max(1, (n_candidates - 1) // 2))
            pops = draw(popular, a, 2)
            distractors = similar + pops
            distractors += draw(all_answers, a, n_candidates - 1 - len(distractors))
            distractors = distractors[:n_candidates - 1]
            gt_pos = int(rng.integers(0, len(distractors) + 1))
            rec.candidates.append(distractors[:gt_pos] + [a] + distractors[gt_pos:])
            rec.answer_index.append(gt_pos)


# -- file formats ---------------------------------------------------------------


def save_feature_sidecar(path, matrix: np.ndarray):
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(np.asarray(matrix.shape, dtype="<u4").tobytes())
        fh.write(matrix.astype("<f8").tobytes())


def load_feature_sidecar(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != FEATURE_MAGIC:
            raise CorpusError(f"{path}: not a feature sidecar file")
        count, dim = np.frombuffer(fh.read(8), dtype="<u4")
        data = np.frombuffer(fh.read(int(count) * int(dim) * 8), dtype="<f8")
    return data.reshape(int(count), int(dim)).copy()


def save_corpus(records: list[CorpusRecord], path, n_candidates: int | None = None,
                sidecar: str | None = None, seed: int | None = None):
    turns = len(records[0].dialogue)
    feature_dim = records[0].features.shape[0]
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "turns": turns,
        "candidates": n_candidates if n_candidates is not None else
        (len(records[0].candidates[0]) if records[0].candidates else 0),
        "feature_dim": int(feature_dim),
        "count": len(records),
    }
    if seed is not None:
        header["seed"] = int(seed)
    if sidecar is not None:
        header["feature_file"] = str(sidecar)
        save_feature_sidecar(_sibling(path, sidecar), np.stack([r.features for r in records]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row, rec in enumerate(records):
            obj = {
                "image_id": rec.image_id,
                "caption": rec.caption,
                "dialogue": [{"question": q, "answer": a} for q, a in rec.dialogue],
            }
            if sidecar is None:
                obj["features"] = [float(x) for x in rec.features]
            else:
                obj["feature_row"] = row
            if rec.candidates is not None:
                obj["candidates"] = rec.candidates
                obj["answer_index"] = rec.answer_index
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _sibling(path, name):
    from pathlib import Path
    return Path(path).parent / name


def load_corpus(path) -> list[CorpusRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:1: bad header: {exc}") from exc
        if header.get("format") != CORPUS_FORMAT:
            raise CorpusError(f"{path}:1: not a {CORPUS_FORMAT} file")
        if header.get("version") != CORPUS_VERSION:
            raise CorpusError(f"{path}:1: unsupported version {header.get('version')}")
        turns = header["turns"]
        feature_dim = header["feature_dim"]
        sidecar = None
        if "feature_file" in header:
            sidecar = load_feature_sidecar(_sibling(path, header["feature_file"]))
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: bad record: {exc}") from exc
            where = f"{path}:{lineno}: "
            if sidecar is not None:
                features = sidecar[obj["feature_row"]]
            else:
                features = np.asarray(obj["features"], dtype=np.float64)
            rec = CorpusRecord(
                image_id=obj["image_id"],
                features=features,
                caption=obj["caption"],
                dialogue=[(d["question"], d["answer"]) for d in obj["dialogue"]],
                candidates=obj.get("candidates"),
                answer_index=obj.get("answer_index"),
            )
            rec.validate(turns, feature_dim, where=where)
            records.append(rec)
    if len(records) != header["count"]:
        raise CorpusError(f"{path}: header count {header['count']} != {len(records)} records")
    return records


def load_dialog_json(path, feature_dim: int | None = None) -> list[CorpusRecord]:
    """Ingest an externally-shaped dialogue dataset file.

    Expects ``{"dialogs": [{"image_id", "caption", "dialog": [{"question",
    "answer", optional "answer_options"/"gt_index"}, ...], optional
    "features"}]}``.  Records without inline features get zero vectors of
    ``feature_dim`` (the caller must then supply real features before
    training on them).
    """
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    dialogs = payload.get("dialogs")
    if dialogs is None:
        raise CorpusError(f"{path}: missing 'dialogs' list")
    records = []
    for i, d in enumerate(dialogs):
        where = f"{path}: dialogs[{i}]: "
        try:
            dialogue = [(turn["question"], turn["answer"]) for turn in d["dialog"]]
        except KeyError as exc:
            raise CorpusError(f"{where}missing field {exc}") from exc
        if "features" in d:
            features = np.asarray(d["features"], dtype=np.float64)
        elif feature_dim is not None:
            features = np.zeros(feature_dim)
        else:
            raise CorpusError(f"{where}no features and no feature_dim given")
        candidates = [turn.get("answer_options") for turn in d["dialog"]]
        answer_index = [turn.get("gt_index") for turn in d["dialog"]]
        has_cands = all(c is not None for c in candidates)
        records.append(CorpusRecord(
            image_id=d.get("image_id", i),
            features=features,
            caption=d.get("caption", ""),
            dialogue=dialogue,
            candidates=candidates if has_cands else None,
            answer_index=answer_index if has_cands else None,
        ))
    return records


# -- model-facing encoding --------------------------------------------------------


def corpus_token_lists(records: list[CorpusRecord], include_candidates: bool = False):
    """Preprocessed sentences for vocabulary building.

    Candidate answers stay out of the vocabulary by default (they are
    evaluation material, not training text); pass ``include_candidates``
    when building an embedding table that must cover them.
    """
    for rec in records:
        yield preprocess_sentence(rec.caption)
        for q, a in rec.dialogue:
            yield preprocess_sentence(q)
            yield preprocess_sentence(a)
        if include_candidates and rec.candidates:
            for cands in rec.candidates:
                for c in cands:
                    yield preprocess_sentence(c)


@dataclass
class EncodedRecord:
    image_id: int
    features: np.ndarray
    caption_tokens: list
    caption_cols: np.ndarray          # (1, E_fixed, L)
    dialogue_ids: np.ndarray          # (T, 2, L)
    dialogue_tokens: list             # T pairs of token lists
    candidate_tokens: list | None     # per turn: C token lists
    candidate_ids: np.ndarray | None  # (T, C, L)
    answer_index: np.ndarray | None


def caption_columns(tokens: list, table: FixedEmbeddingTable, length: int) -> np.ndarray:
    """Caption colouring from the fixed table; PAD positions are zero columns."""
    cols = np.zeros((1, table.dim, length))
    for i, tok in enumerate(tokens[:length]):
        cols[0, :, i] = table.vector(tok)
    return cols


def encode_corpus(records: list[CorpusRecord], vocab: Vocabulary,
                  table: FixedEmbeddingTable, max_len: int) -> list[EncodedRecord]:
    out = []
    for rec in records:
        cap_tokens = preprocess_sentence(rec.caption)
        dlg_tokens = [(preprocess_sentence(q), preprocess_sentence(a)) for q, a in rec.dialogue]
        dlg_ids = np.stack([
            np.stack([vocab.encode(q, max_len), vocab.encode(a, max_len)])
            for q, a in dlg_tokens])
        cand_tokens = None
        cand_ids = None
        gt_index = None
        if rec.candidates is not None:
            cand_tokens = [[preprocess_sentence(c) for c in cands] for cands in rec.candidates]
            cand_ids = np.stack([
                np.stack([vocab.encode(toks, max_len) for toks in cands])
                for cands in cand_tokens])
            gt_index = np.asarray(rec.answer_index, dtype=np.int64)
        out.append(EncodedRecord(
            image_id=rec.image_id,
            features=rec.features,
            caption_tokens=cap_tokens,
            caption_cols=caption_columns(cap_tokens, table, max_len),
            dialogue_ids=dlg_ids,
            dialogue_tokens=dlg_tokens,
            candidate_tokens=cand_tokens,
            candidate_ids=cand_ids,
            answer_index=gt_index,
        ))
    return out


def mean_embedding_similarity(tokens_a: list, tokens_b: list, table: FixedEmbeddingTable) -> float:
    from .text import cosine_similarity
    return cosine_similarity(sentence_embedding_avg(tokens_a, table),
                             sentence_embedding_avg(tokens_b, table))
