"""Scene token sequences and next-state predictors.

A scene is laid out as ``[text..., SEP, (x, y, z, s, shape*8192) per object]``
with objects in ascending id order.  Predictors map one such sequence to the
sequence of the next timestep.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avi.geometry import RigidTransform, apply_transform, devoxelize
from avi.locquant import (
    POSITION_SLOTS,
    SCALE_SLOTS,
    LocationDescriptor,
    QuantizationError,
    QuantConfig,
    Vocabulary,
    dequantize_location,
    descriptor_of,
    format_tokens,
    object_box,
    object_grid,
    parse_tokens,
    quantize_point,
    scale_bin,
    tokens_of,
)
from avi.vqtok import NUM_PATCHES, Codebook, decode_grid, encode_grid

OBJECT_SPAN = 4 + NUM_PATCHES
MAX_TEXT = 32
LORA_RANKS = (4, 8, 16, 32, 64)

TEXT_WORDS = (
    "<pad>", "move", "push", "pull", "the", "a", "object", "block", "ball", "can",
    "to", "toward", "into", "onto", "goal", "region", "left", "right", "forward",
    "back", "up", "down", "close", "open", "drawer", "pick", "place", "red",
    "green", "blue", "bowl", "plate",
)  # fmt: skip


class SequenceError(ValueError):
    pass


def text_ids(words: str) -> list[int]:
    """Ids of a whitespace-separated instruction over the fixed task-word list."""
    ids = []
    for w in words.lower().split():
        if w not in TEXT_WORDS:
            raise SequenceError(f"unknown instruction word {w!r}")
        ids.append(TEXT_WORDS.index(w))
    return ids


@dataclass(frozen=True)
class Instruction:
    task_id: int
    text_tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "text_tokens", tuple(int(t) for t in self.text_tokens))
        if len(self.text_tokens) > MAX_TEXT:
            raise SequenceError(f"instruction longer than {MAX_TEXT} tokens")

    @classmethod
    def from_text(cls, task_id: int, words: str) -> Instruction:
        return cls(task_id, tuple(text_ids(words)))


@dataclass(frozen=True)
class TokenContext:
    """What a predictor needs to read and write scene sequences."""

    vocab: Vocabulary
    codebook: Codebook
    quant: QuantConfig

    def __post_init__(self):
        if self.vocab.codebook_size != self.codebook.k:
            raise SequenceError(f"vocabulary expects {self.vocab.codebook_size} shape ids, codebook has {self.codebook.k}")


@dataclass(frozen=True)
class ParsedObject:
    id: int
    descriptor: LocationDescriptor
    shape: np.ndarray  # codebook ids, length 8192


@dataclass(frozen=True, eq=False)
class SceneTokens:
    tokens: np.ndarray
    object_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "object_ids", tuple(int(i) for i in self.object_ids))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SceneTokens)
            and self.object_ids == other.object_ids
            and np.array_equal(self.tokens, other.tokens)
        )

    def with_tokens(self, tokens) -> SceneTokens:
        return SceneTokens(tokens, self.object_ids)

    def to_stream(self) -> str:
        return format_tokens(self.tokens, [f"object_ids: {' '.join(map(str, self.object_ids))}"])

    @classmethod
    def from_stream(cls, text: str, vocab: Vocabulary) -> SceneTokens:
        tokens, comments = parse_tokens(text)
        ids = None
        for c in comments:
            if c.startswith("object_ids:"):
                ids = [int(v) for v in c.split(":", 1)[1].split()]
        if ids is None:
            if vocab.sep not in tokens:
                raise SequenceError("token stream has no separator")
            n = (len(tokens) - tokens.index(vocab.sep) - 1) // OBJECT_SPAN
            ids = list(range(1, n + 1))
        return cls(np.array(tokens, dtype=np.int64), tuple(ids))


def emit_sequence(text, objects, vocab: Vocabulary) -> SceneTokens:
    """Lay out text and ``ParsedObject`` entries (sorted by id) as one sequence."""
    text = [int(t) for t in text]
    if any(not vocab.is_text(t) for t in text):
        raise SequenceError("instruction id outside the text segment")
    objects = sorted(objects, key=lambda o: o.id)
    parts = [np.array(text + [vocab.sep], dtype=np.int64)]
    for obj in objects:
        shape = np.asarray(obj.shape, dtype=np.int64)
        if len(shape) != NUM_PATCHES or shape.min() < 0 or shape.max() >= vocab.codebook_size:
            raise SequenceError(f"object {obj.id} shape tokens malformed")
        parts.append(np.array(tokens_of(obj.descriptor, vocab), dtype=np.int64))
        parts.append(shape + vocab.shape)
    return SceneTokens(np.concatenate(parts), tuple(o.id for o in objects))


def parse_sequence(seq: SceneTokens, vocab: Vocabulary) -> tuple[list[int], list[ParsedObject]]:
    toks = seq.tokens
    hits = np.flatnonzero(toks == vocab.sep)
    if len(hits) != 1:
        raise SequenceError(f"expected exactly one separator, found {len(hits)}")
    head = int(hits[0])
    text = toks[:head].tolist()
    if any(not vocab.is_text(t) for t in text):
        raise SequenceError("non-text id before the separator")
    body = toks[head + 1 :]
    if len(body) != OBJECT_SPAN * len(seq.object_ids):
        raise SequenceError(f"body length {len(body)} does not fit {len(seq.object_ids)} objects")
    objects = []
    lo, hi = vocab.shape, vocab.shape + vocab.codebook_size
    for k, oid in enumerate(seq.object_ids):
        block = body[k * OBJECT_SPAN : (k + 1) * OBJECT_SPAN]
        try:
            desc = descriptor_of(block[:4], vocab)
        except QuantizationError as exc:
            raise SequenceError(f"object {oid}: {exc}") from exc
        shape = block[4:]
        if shape.min() < lo or shape.max() >= hi:
            raise SequenceError(f"object {oid} has ids outside the shape segment")
        objects.append(ParsedObject(oid, desc, shape - lo))
    return text, objects


def build_sequence(scene, instr: Instruction, ctx: TokenContext) -> SceneTokens:
    """Tokenize a ``SceneDecomposition`` under an instruction."""
    if not scene.segments:
        raise SequenceError("empty scene decomposition")
    objects = []
    for seg in sorted(scene.segments, key=lambda s: s.id):
        grid = object_grid(seg.cloud, seg.descriptor, ctx.quant)
        objects.append(ParsedObject(seg.id, seg.descriptor, encode_grid(grid, ctx.codebook)))
    return emit_sequence(instr.text_tokens, objects, ctx.vocab)


def decode_objects(seq: SceneTokens, ctx: TokenContext):
    """``{id: (VoxelGrid, LocationDescriptor)}`` for every object in a sequence."""
    _, objects = parse_sequence(seq, ctx.vocab)
    return {o.id: (decode_grid(o.shape, ctx.codebook), o.descriptor) for o in objects}


# -- predictors ------------------------------------------------------------------


@dataclass(frozen=True)
class OraclePredictor:
    """Moves the target object by a known rigid delta; everything else is copied."""

    true_delta: RigidTransform
    target_object: int
    ctx: TokenContext

    def predict(self, current: SceneTokens) -> SceneTokens:
        text, objects = parse_sequence(current, self.ctx.vocab)
        ids = [o.id for o in objects]
        if self.target_object not in ids:
            raise SequenceError(f"target object {self.target_object} not in sequence")
        i = ids.index(self.target_object)
        objects[i] = self._move(objects[i])
        return emit_sequence(text, objects, self.ctx.vocab)

    def _move(self, obj: ParsedObject) -> ParsedObject:
        q = self.ctx.quant
        rot, t = self.true_delta.rotation, self.true_delta.translation
        centroid, _ = dequantize_location(obj.descriptor, q)
        moved_centroid = rot @ centroid + t
        if np.array_equal(rot, np.eye(3)):
            # the object-frame grid is translation invariant
            return ParsedObject(obj.id, quantize_point(moved_centroid, obj.descriptor.s_bin, q), obj.shape)
        pts = devoxelize(decode_grid(obj.shape, self.ctx.codebook), object_box(obj.descriptor, q))
        moved = apply_transform(pts, self.true_delta)
        s_bin = obj.descriptor.s_bin
        if len(moved):
            s_bin = scale_bin(float((moved.max(0) - moved.min(0)).max()) / q.max_edge, q)
        desc = quantize_point(moved_centroid, s_bin, q)
        return ParsedObject(obj.id, desc, encode_grid(object_grid(moved, desc, q), self.ctx.codebook))


@dataclass(frozen=True)
class NoisyPredictor:
    """Independently re-draws location and shape tokens of the inner prediction."""

    inner: object
    flip_probability: float
    seed: int
    ctx: TokenContext

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise SequenceError("flip_probability must be in [0, 1]")

    def predict(self, current: SceneTokens) -> SceneTokens:
        out = self.inner.predict(current)
        return out.with_tokens(self.corrupt(out.tokens))

    def corrupt(self, tokens: np.ndarray) -> np.ndarray:
        v = self.ctx.vocab
        n = len(tokens)
        # Philox keyed by the seed: draw i always belongs to position i
        rng = np.random.Generator(np.random.Philox(key=int(self.seed)))
        flip = rng.random(n) < self.flip_probability
        pick = rng.random(n)
        toks = tokens.copy()
        b, sb = self.ctx.quant.position_bins, self.ctx.quant.scale_bins
        # replacements stay inside the active bin range of each segment
        for start, slots, width in (
            (v.pos_x, POSITION_SLOTS, b),
            (v.pos_y, POSITION_SLOTS, b),
            (v.pos_z, POSITION_SLOTS, b),
            (v.scale, SCALE_SLOTS, sb),
        ):
            m = (tokens >= start) & (tokens < start + slots) & flip
            toks[m] = start + np.floor(pick[m] * width).astype(np.int64)
        shape = (tokens >= v.shape) & (tokens < v.shape + v.codebook_size) & flip
        toks[shape] = v.shape + np.floor(pick[shape] * v.codebook_size).astype(np.int64)
        return toks


def step_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit seed for a (seed, key...) tuple."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, np.uint64)[0])


@dataclass
class NgramPredictor:
    """Count-table decoder over ``input SEP2 output`` streams.

    Contexts are keyed by the instruction, the output position and the
    previous ``n - 1`` stream tokens.  Lookup backs off to shorter contexts,
    then to instruction- and position-free contexts, and finally to the
    unigram.  Ties go to the lowest id.
    """

    n: int
    vocab: Vocabulary
    table: dict = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise SequenceError("n-gram order must be >= 1")
        self._best: dict = {}

    def _keys(self, instr: tuple, pos: int, stream: list[int]):
        for k in range(self.n - 1, -1, -1):
            ctx = tuple(stream[len(stream) - k :]) if k else ()
            yield ("c", instr, pos, ctx)
        for k in range(self.n - 1, -1, -1):
            ctx = tuple(stream[len(stream) - k :]) if k else ()
            yield ("g", ctx)

    def observe(self, inp: SceneTokens, out: SceneTokens) -> None:
        instr = self._instruction(inp)
        stream = inp.tokens.tolist() + [self.vocab.sep2]
        for pos, tok in enumerate(out.tokens.tolist()):
            for key in self._keys(instr, pos, stream):
                self.table[key][tok] += 1
            stream.append(tok)
        self._best.clear()

    def _instruction(self, seq: SceneTokens) -> tuple:
        hit = np.flatnonzero(seq.tokens == self.vocab.sep)
        return tuple(seq.tokens[: hit[0]].tolist()) if len(hit) else ()

    def _lookup(self, key):
        if key in self._best:
            return self._best[key]
        counts = self.table.get(key)
        best = None
        if counts:
            top = max(counts.values())
            best = min(t for t, c in counts.items() if c == top)
        self._best[key] = best
        return best

    def predict(self, current: SceneTokens) -> SceneTokens:
        if not self.table:
            raise SequenceError("n-gram table is empty")
        instr = self._instruction(current)
        stream = current.tokens.tolist() + [self.vocab.sep2]
        out = []
        for pos in range(len(current)):
            tok = None
            for key in self._keys(instr, pos, stream):
                tok = self._lookup(key)
                if tok is not None:
                    break
            out.append(tok)
            stream.append(tok)
        return current.with_tokens(out)


def train_ngram(trajectories, n: int, vocab: Vocabulary, seed: int = 0) -> NgramPredictor:
    """Fit an n-gram predictor on ``(input, output)`` SceneTokens pairs."""
    model = NgramPredictor(n, vocab, seed=seed)
    for inp, out in trajectories:
        model.observe(inp, out)
    return model


def predict_next(predictor, current: SceneTokens) -> SceneTokens:
    return predictor.predict(current)


def predictor_from_json(obj: dict, ctx: TokenContext, base_dir: Path | None = None):
    """Build a predictor from its ``"kind"``-discriminated JSON config."""
    kind = obj.get("kind")
    if kind == "oracle":
        delta = RigidTransform.from_json(obj["true_delta"]) if "true_delta" in obj else RigidTransform.identity()
        return OraclePredictor(delta, int(obj["target_object"]), ctx)
    if kind == "noisy":
        inner = predictor_from_json(obj["inner"], ctx, base_dir)
        return NoisyPredictor(inner, float(obj["flip_probability"]), int(obj.get("seed", 0)), ctx)
    if kind == "ngram":
        corpus = Path(obj["corpus"])
        if base_dir is not None and not corpus.is_absolute():
            corpus = base_dir / corpus
        pairs = read_corpus(corpus, ctx.vocab)
        return train_ngram(pairs, int(obj.get("n", 3)), ctx.vocab, int(obj.get("seed", 0)))
    raise SequenceError(f"unknown predictor kind {kind!r}")


def read_corpus(path, vocab: Vocabulary) -> list[tuple[SceneTokens, SceneTokens]]:
    """Blank-line separated token-stream blocks, alternating input and output."""
    blocks = [b for b in Path(path).read_text().split("\n\n") if parse_tokens(b)[0]]
    if len(blocks) % 2:
        raise SequenceError("corpus has an input block without its output")
    seqs = [SceneTokens.from_stream(b, vocab) for b in blocks]
    return list(zip(seqs[0::2], seqs[1::2]))


def format_corpus(pairs) -> str:
    blocks = []
    for inp, out in pairs:
        blocks += [inp.to_stream().strip(), out.to_stream().strip()]
    return "\n\n".join(blocks) + "\n"


# -- LoRA --------------------------------------------------------------------------


@dataclass(frozen=True)
class LoraConfig:
    rank: int
    weight: np.ndarray
    a: np.ndarray
    b: np.ndarray
    alpha: float | None = None
    dropout: float = 0.05  # kept for the record; nothing here trains

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        alpha = 2 * self.rank if self.alpha is None else self.alpha
        if alpha != 2 * self.rank:
            raise ValueError(f"alpha must equal 2*rank ({2 * self.rank}), got {alpha}")
        object.__setattr__(self, "alpha", alpha)
        w, a, b = (np.asarray(m, dtype=np.float64) for m in (self.weight, self.a, self.b))
        if a.shape != (self.rank, w.shape[1]) or b.shape != (w.shape[0], self.rank):
            raise ValueError(f"shapes W{w.shape} A{a.shape} B{b.shape} do not conform at rank {self.rank}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def lora_effective_weight(cfg: LoraConfig) -> np.ndarray:
    """Merged weight ``W + (alpha / r) * B @ A``."""
    return cfg.weight + cfg.scaling * (cfg.b @ cfg.a)


def load_predictor(path, ctx: TokenContext):
    p = Path(path)
    return predictor_from_json(json.loads(p.read_text()), ctx, p.parent)
