"""Dataset plumbing: binary feature files, dialogue/QA records, synthesis.

Feature file layout (all integers little-endian):

    bytes 0..3   magic b"VFEA"
    byte  4      format version, currently 1
    byte  5      element dtype code, 1 = float32
    byte  6      rank, 2 or 3
    next rank*4  extents as unsigned 32-bit
    rest         row-major float32 payload, 4 * product(extents) bytes

Dialogue and QA datasets are UTF-8 JSON objects, one record per line, with
the key order documented in the README. Token fields hold already-tokenized
lowercase strings.

The synthetic generator plants recoverable signals: each video gets one
high-energy (step, cell) pair; the step index selects a color word, the
cell index a shape word, and questions ask for them in three fixed shapes
(temporal-only, spatial-only, both). A rule-based reader can therefore
answer every question from the features alone, which bounds what a correct
model must be able to overfit.

With ``corroborate`` enabled the scene instead holds four detections with
jittered confidences: the true step is the one detected in two different
cells, the true cell the one detected at two different steps, and the
singleton coordinates are spurious. Answering then requires weighing all
detections rather than finding one loud position.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .vocab import EOS, SEP_TOKEN, SOS, Vocabulary, build_vocab

MAGIC = b"VFEA"
VERSION = 1
DTYPE_F32 = 1

COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "white", "black")
SHAPES = ("square", "circle", "triangle", "diamond", "star", "cross", "ring", "arrow")
NAMES = ("ball", "box", "cat", "dog", "lamp", "car", "bird", "cup",
         "book", "fish", "tree", "drum", "kite", "coin", "bell", "sock")


# ---------------------------------------------------------------------------
# feature files


def write_feature_file(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim not in (2, 3):
        raise FormatError(f"feature files hold rank 2 or 3, got rank {arr.ndim}")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_feature_file(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a feature file (bad magic)")
    version, dtype_code, rank = struct.unpack("<BBB", blob[4:7])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    if rank not in (2, 3):
        raise FormatError(f"{path}: rank must be 2 or 3, got {rank}")
    offset = 7 + 4 * rank
    if len(blob) < offset:
        raise FormatError(f"{path}: truncated header")
    extents = struct.unpack(f"<{rank}I", blob[7:offset])
    expected = 4 * int(np.prod(extents))
    payload = blob[offset:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, extents {extents} need {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(extents).astype(np.float32)


# ---------------------------------------------------------------------------
# records


@dataclass
class DialogueTurn:
    question: list[str]
    answer: list[str]
    references: list[list[str]] = field(default_factory=list)

    def reference_lists(self) -> list[list[str]]:
        return self.references if self.references else [self.answer]


@dataclass
class DialogueRecord:
    video_id: str
    caption: list[str]
    turns: list[DialogueTurn]

    def validate(self) -> "DialogueRecord":
        if not self.turns:
            raise DataError(f"{self.video_id}: dialogue needs at least one turn")
        if not self.caption:
            raise DataError(f"{self.video_id}: caption must be non-empty")
        for i, turn in enumerate(self.turns):
            if not turn.question:
                raise DataError(f"{self.video_id} turn {i}: question is empty")
            if not turn.answer:
                raise DataError(f"{self.video_id} turn {i}: answer is empty")
            if len(turn.references) > 6:
                raise DataError(f"{self.video_id} turn {i}: more than 6 references")
        return self


@dataclass
class QAExample:
    video_id: str
    task: str                              # action | transition | count | frame
    question: list[str]
    candidates: list[list[str]] | None = None
    correct: int | None = None
    count_label: float | None = None
    answer: str | None = None

    def validate(self) -> "QAExample":
        if not self.question:
            raise DataError(f"{self.video_id}: question is empty")
        if self.task in ("action", "transition"):
            if not self.candidates or self.correct is None:
                raise DataError(f"{self.video_id}: choice task needs candidates + correct index")
            if not 0 <= self.correct < len(self.candidates):
                raise DataError(f"{self.video_id}: correct index out of range")
            if any(not c for c in self.candidates):
                raise DataError(f"{self.video_id}: empty candidate")
        elif self.task == "count":
            if self.count_label is None:
                raise DataError(f"{self.video_id}: count task needs a numeric label")
        elif self.task == "frame":
            if not self.answer:
                raise DataError(f"{self.video_id}: frame task needs a single answer token")
        else:
            raise DataError(f"{self.video_id}: unknown task {self.task!r}")
        return self


def write_dialogues(path: str | Path, records: list[DialogueRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "video_id": rec.video_id,
                "caption": rec.caption,
                "turns": [
                    {"question": t.question, "answer": t.answer, "references": t.references}
                    for t in rec.turns
                ],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_dialogues(path: str | Path) -> list[DialogueRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: not valid JSON ({exc})") from None
        try:
            turns = [
                DialogueTurn(t["question"], t["answer"], t.get("references", []))
                for t in obj["turns"]
            ]
            rec = DialogueRecord(obj["video_id"], obj["caption"], turns)
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc}") from None
        records.append(rec.validate())
    if not records:
        raise DataError(f"{path}: no dialogue records found")
    return records


def write_qa_examples(path: str | Path, examples: list[QAExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj = {"video_id": ex.video_id, "task": ex.task, "question": ex.question}
            if ex.candidates is not None:
                obj["candidates"] = ex.candidates
                obj["correct"] = ex.correct
            if ex.count_label is not None:
                obj["count_label"] = ex.count_label
            if ex.answer is not None:
                obj["answer"] = ex.answer
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_qa_examples(path: str | Path) -> list[QAExample]:
    examples = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: not valid JSON ({exc})") from None
        try:
            ex = QAExample(
                video_id=obj["video_id"],
                task=obj["task"],
                question=obj["question"],
                candidates=obj.get("candidates"),
                correct=obj.get("correct"),
                count_label=obj.get("count_label"),
                answer=obj.get("answer"),
            )
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc}") from None
        examples.append(ex.validate())
    if not examples:
        raise DataError(f"{path}: no QA examples found")
    return examples


@dataclass
class CorpusStats:
    dialogs: int
    turns: int
    words: int

    @staticmethod
    def of(records: list[DialogueRecord]) -> "CorpusStats":
        turns = sum(len(r.turns) for r in records)
        words = sum(
            len(r.caption) + sum(len(t.question) + len(t.answer) for t in r.turns)
            for r in records
        )
        return CorpusStats(dialogs=len(records), turns=turns, words=words)


# ---------------------------------------------------------------------------
# model input assembly


def history_tokens(record: DialogueRecord, turn: int) -> list[str]:
    """All previous turns flattened, separator-delimited; never empty."""
    if turn == 0:
        return [SEP_TOKEN]
    out: list[str] = []
    for prev in record.turns[:turn]:
        out.extend(prev.question)
        out.append(SEP_TOKEN)
        out.extend(prev.answer)
        out.append(SEP_TOKEN)
    return out


def turn_arrays(record: DialogueRecord, turn: int, vocab: Vocabulary):
    """Token id arrays (history, query, caption, target) for one turn."""
    if not 0 <= turn < len(record.turns):
        raise DataError(f"{record.video_id}: turn {turn} out of range")
    t = record.turns[turn]
    history = vocab.encode(history_tokens(record, turn))
    query = vocab.encode(t.question)
    caption = vocab.encode(record.caption)
    target = np.concatenate([[SOS], vocab.encode(t.answer), [EOS]]).astype(np.int64)
    return history, query, caption, target


def dialogue_corpus(records: list[DialogueRecord]) -> list[list[str]]:
    """Token sequences feeding vocabulary construction (separator included)."""
    corpus: list[list[str]] = [[SEP_TOKEN]]
    for rec in records:
        corpus.append(rec.caption)
        for t in rec.turns:
            corpus.append(t.question)
            corpus.append(t.answer)
            for ref in t.references:
                corpus.append(ref)
    return corpus


def qa_corpus(examples: list[QAExample]) -> list[list[str]]:
    corpus: list[list[str]] = [[SEP_TOKEN]]
    for ex in examples:
        corpus.append(ex.question)
        for cand in ex.candidates or []:
            corpus.append(cand)
        if ex.answer:
            corpus.append([ex.answer])
    return corpus


def vocab_from_dialogues(records: list[DialogueRecord], min_count: int = 1) -> Vocabulary:
    return build_vocab(dialogue_corpus(records), min_count=min_count)


def vocab_from_qa(examples: list[QAExample], min_count: int = 1) -> Vocabulary:
    return build_vocab(qa_corpus(examples), min_count=min_count)


# ---------------------------------------------------------------------------
# synthesis


@dataclass
class SynthConfig:
    dialogs: int = 50
    steps: int = 4            # temporal extent F
    cells: int = 4            # spatial extent P
    d_pre_vis: int = 64
    d_pre_aud: int = 32
    noise: float = 0.1
    spike: float = 10.0       # energy of the location mark
    code_step: float = 10.0   # amplitude of the step identity channel
    code_cell: float = 10.0   # amplitude of the cell identity channel
    corroborate: bool = False # four jittered detections instead of one mark
    jitter: float = 0.3       # detection-confidence spread when corroborating
    margin_lo: float = 0.1    # spurious-vote shortfall below the winning pair
    margin_hi: float = 0.5


def _plant(video: np.ndarray, cfg: SynthConfig, step: int, cell: int) -> None:
    """Mark (step, cell) with a content-coded spike.

    The adapters attach no positional signal to video axes, so attention can
    only read WHAT a position contains, never WHERE it sits. Dedicated
    channels therefore name the coordinates: channel `step` says which clip,
    channel `steps + cell` says which cell, and channel `steps + cells`
    carries a large common mark so the planted position always dominates the
    energy map regardless of the identity amplitudes (either code can be
    driven down toward the noise floor to make WHICH-step or WHICH-cell
    genuinely hard to read while WHERE stays unambiguous).

    Each identity code is balanced to zero along the opposite axis: the step
    channel sums to zero over clips within its cell column, the cell channel
    sums to zero over cells within its clip row. Mean-pooling an axis
    therefore erases that axis's code instead of merely diluting it, so a
    model whose spatial (or temporal) structure was pooled away genuinely
    cannot recover the corresponding answer word.
    """
    _mark(video, cfg, step, cell, cfg.code_step, cfg.code_cell)


def _mark(video: np.ndarray, cfg: SynthConfig, step: int, cell: int,
          amp_step: float, amp_cell: float) -> None:
    """Write one detection: balanced identity codes plus the common mark."""
    video[:, cell, step] -= amp_step / (cfg.steps - 1) if cfg.steps > 1 else 0.0
    video[step, :, cfg.steps + cell] -= amp_cell / (cfg.cells - 1) if cfg.cells > 1 else 0.0
    balance_t = 1.0 + 1.0 / (cfg.steps - 1) if cfg.steps > 1 else 1.0
    balance_s = 1.0 + 1.0 / (cfg.cells - 1) if cfg.cells > 1 else 1.0
    video[step, cell, step] += amp_step * balance_t
    video[step, cell, cfg.steps + cell] += amp_cell * balance_s
    video[step, cell, cfg.steps + cfg.cells] += cfg.spike


def _spiked_features(g: np.random.Generator, cfg: SynthConfig, step: int, cell: int):
    if cfg.d_pre_vis < cfg.steps + cfg.cells + 1:
        raise DataError(
            f"d_pre_vis={cfg.d_pre_vis} too small to name {cfg.steps} steps "
            f"and {cfg.cells} cells by channel"
        )
    if cfg.d_pre_aud < cfg.steps:
        raise DataError(f"d_pre_aud={cfg.d_pre_aud} too small to name {cfg.steps} steps")
    video = g.normal(scale=cfg.noise, size=(cfg.steps, cfg.cells, cfg.d_pre_vis))
    _plant(video, cfg, step, cell)
    audio = g.normal(scale=cfg.noise, size=(cfg.steps, cfg.d_pre_aud))
    audio[step, step] += cfg.spike
    return video.astype(np.float32), audio.astype(np.float32)


def planted_location(video: np.ndarray) -> tuple[int, int]:
    """Recover the planted (step, cell) as the highest-energy position."""
    energy = np.linalg.norm(video.astype(np.float64), axis=-1)
    flat = int(np.argmax(energy))
    return flat // video.shape[1], flat % video.shape[1]


def _answers_for(step: int, cell: int, name: str) -> list[list[str]]:
    color, shape = COLORS[step], SHAPES[cell]
    return [
        ["the", color, "clip"],
        ["the", shape, "cell"],
        ["a", color, shape, name],
    ]


def planted_answers(video: np.ndarray, name: str) -> list[list[str]]:
    """The rule a correct model must learn, applied directly to features."""
    return _answers_for(*planted_location(video), name)


def _corroborated_features(g: np.random.Generator, cfg: SynthConfig,
                           step: int, cell: int):
    """Four detections; only (step, cell) is corroborated twice.

    The true step appears in two different cells, the true cell at two
    different steps, and the two leftover coordinates are spurious
    single-vote detections. Confidences are jittered per detection so the
    vote margins vary and weighing them sloppily actually costs accuracy;
    at jitter <= 1/3 two corroborating votes still always outweigh any
    single spurious one, so the labels stay noise-free.
    """
    if cfg.steps < 3 or cfg.cells < 3:
        raise DataError("corroborated scenes need at least 3 steps and 3 cells")
    video = g.normal(scale=cfg.noise, size=(cfg.steps, cfg.cells, cfg.d_pre_vis))
    other_cells = [c for c in range(cfg.cells) if c != cell]
    other_steps = [s for s in range(cfg.steps) if s != step]
    g.shuffle(other_cells)
    g.shuffle(other_steps)
    ca, cb = other_cells[0], other_cells[1]
    sc, sd = other_steps[0], other_steps[1]
    lo, hi = 1.0 - cfg.jitter, 1.0 + cfg.jitter
    # corroborating votes get jittered confidences; each spurious vote is
    # then pinned a controlled margin below the winning pair sum, so every
    # scene is a near-threshold decision and sloppy vote weighing shows up
    # in held-out loss instead of washing out
    ts, tb = g.uniform(lo, hi), g.uniform(lo, hi)      # step votes for `step`
    us, ud = g.uniform(lo, hi), g.uniform(lo, hi)      # cell votes for `cell`
    m = g.uniform(cfg.margin_lo, cfg.margin_hi, size=4)
    amps = {
        (step, ca): (ts, us + ud - m[0]),
        (step, cb): (tb, us + ud - m[1]),
        (sc, cell): (ts + tb - m[2], us),
        (sd, cell): (ts + tb - m[3], ud),
    }
    for (s, c), (amp_t, amp_s) in amps.items():
        _mark(video, cfg, s, c, cfg.code_step * float(amp_t), cfg.code_cell * float(amp_s))
        assert np.linalg.norm(video[s, c]) > 0.9 * cfg.spike
    audio = g.normal(scale=cfg.noise, size=(cfg.steps, cfg.d_pre_aud))
    audio[step, step] += cfg.spike
    return video.astype(np.float32), audio.astype(np.float32)


def synthesize_dialogues(seed: int, cfg: SynthConfig):
    """Deterministic toy corpus: (records, {video_id: (video, audio)})."""
    if cfg.steps > len(COLORS) or cfg.cells > len(SHAPES):
        raise DataError(
            f"at most {len(COLORS)} steps and {len(SHAPES)} cells are supported"
        )
    g = np.random.Generator(np.random.PCG64(seed))
    records: list[DialogueRecord] = []
    features: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for i in range(cfg.dialogs):
        video_id = f"synth{i:04d}"
        name = NAMES[int(g.integers(len(NAMES)))]
        step = int(g.integers(cfg.steps))
        cell = int(g.integers(cfg.cells))
        if cfg.corroborate:
            video, audio = _corroborated_features(g, cfg, step, cell)
        else:
            video, audio = _spiked_features(g, cfg, step, cell)
            # the signal must dominate by construction, not by luck
            assert planted_location(video) == (step, cell)
        answers = _answers_for(step, cell, name)
        turns = [
            DialogueTurn(["which", "clip", "shows", "the", name, "?"], answers[0]),
            DialogueTurn(["which", "cell", "holds", "the", name, "?"], answers[1]),
            DialogueTurn(["describe", "the", name], answers[2]),
        ]
        caption = ["a", "video", "of", "the", name]
        records.append(DialogueRecord(video_id, caption, turns).validate())
        features[video_id] = (video, audio)
    return records, features


def synthesize_qa(seed: int, cfg: SynthConfig, task: str, negatives: int = 4):
    """Toy QA set in the same feature universe: (examples, features)."""
    g = np.random.Generator(np.random.PCG64(seed))
    examples: list[QAExample] = []
    features: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for i in range(cfg.dialogs):
        video_id = f"qa{task}{i:04d}"
        step = int(g.integers(cfg.steps))
        cell = int(g.integers(cfg.cells))
        video, audio = _spiked_features(g, cfg, step, cell)
        assert planted_location(video) == (step, cell)
        features[video_id] = (video, audio)
        color, shape = COLORS[step], SHAPES[cell]
        if task in ("action", "transition"):
            truth = [color, shape]
            pool = [
                [c, s]
                for c in COLORS[: cfg.steps]
                for s in SHAPES[: cfg.cells]
                if [c, s] != truth
            ]
            if len(pool) < negatives:
                raise DataError(
                    f"grid {cfg.steps}x{cfg.cells} cannot supply {negatives} distractors"
                )
            picks = g.choice(len(pool), size=negatives, replace=False)
            candidates = [truth] + [pool[int(p)] for p in picks]
            order = g.permutation(len(candidates))
            candidates = [candidates[int(j)] for j in order]
            correct = int(np.nonzero(order == 0)[0][0])
            examples.append(
                QAExample(video_id, task, ["what", "is", "shown", "?"],
                          candidates=candidates, correct=correct)
            )
        elif task == "count":
            extra = int(g.integers(0, cfg.steps - 1)) if cfg.steps > 1 else 0
            others = [s for s in range(cfg.steps) if s != step]
            video = video.astype(np.float64)
            for s in list(g.permutation(others))[:extra]:
                _plant(video, cfg, int(s), cell)
            features[video_id] = (video.astype(np.float32), audio)
            examples.append(
                QAExample(video_id, "count", ["how", "many", "times", "?"],
                          count_label=float(1 + extra))
            )
        elif task == "frame":
            examples.append(
                QAExample(video_id, "frame", ["which", "color", "flashes", "?"],
                          answer=color)
            )
        else:
            raise DataError(f"unknown QA task {task!r}")
    return [e.validate() for e in examples], features


def planted_count(video: np.ndarray, threshold: float | None = None) -> int:
    """Count high-energy steps; the count task's label rule."""
    energy = np.linalg.norm(video.astype(np.float64), axis=-1).max(axis=1)
    cut = threshold if threshold is not None else energy.max() / 2.0
    return int((energy > cut).sum())


# ---------------------------------------------------------------------------
# on-disk dataset bundles


def save_dataset(directory: str | Path, split: str, records: list[DialogueRecord],
                 features: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
    root = Path(directory)
    (root / "features").mkdir(parents=True, exist_ok=True)
    write_dialogues(root / f"{split}.jsonl", records)
    for video_id, (video, audio) in features.items():
        write_feature_file(root / "features" / f"{video_id}.vis", video)
        write_feature_file(root / "features" / f"{video_id}.aud", audio)


def load_features(directory: str | Path, video_id: str):
    root = Path(directory) / "features"
    vis_path = root / f"{video_id}.vis"
    aud_path = root / f"{video_id}.aud"
    if not vis_path.exists():
        raise DataError(f"missing visual features for {video_id!r} under {root}")
    video = read_feature_file(vis_path)
    audio = read_feature_file(aud_path) if aud_path.exists() else None
    return video, audio
