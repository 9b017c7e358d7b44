"""Command-line front end.

Subcommands: synthesize, train, evaluate, generate, score-qa. Every run is
shaped by a flat key=value configuration file; any key can be overridden on
the command line by a long flag of the same name (`--batch-size 4` or
`--batch-size=4`). Reports come out twice: a human-readable table on stdout
and machine-readable line-delimited JSON records (stdout, or a file via
--records). The process exits 0 only when the requested work fully succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import TrainConfig, apply_overrides, load_config
from .data import (
    SynthConfig,
    load_features,
    read_dialogues,
    read_qa_examples,
    save_dataset,
    turn_arrays,
    vocab_from_dialogues,
    vocab_from_qa,
    write_qa_examples,
)
from .errors import ConfigError, DataError, TrainingDiverged, VidialError
from .metrics import REPORT_COLUMNS, corpus_report
from .model import ModelInputs, ResponseModel, dialogue_items
from .qa import (
    QAModel,
    answer_inventory,
    evaluate_choice,
    evaluate_count,
    evaluate_frame,
    qa_example_loss,
)
from .training import (
    Trainer,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)

QA_TASKS = ("qa-action", "qa-transition", "qa-count", "qa-frame")

COLUMN_TITLES = {
    "bleu1": "BLEU1", "bleu2": "BLEU2", "bleu3": "BLEU3", "bleu4": "BLEU4",
    "meteor": "METEOR", "rouge_l": "ROUGE-L", "cider": "CIDEr",
}


# ---------------------------------------------------------------------------
# plumbing


def _collect_overrides(rest: list[str]) -> dict[str, str]:
    """Turn leftover `--key value` / `--key=value` args into a dict."""
    out: dict[str, str] = {}
    i = 0
    while i < len(rest):
        flag = rest[i]
        if not flag.startswith("--") or flag == "--":
            raise ConfigError(f"unrecognized argument {flag!r}")
        body = flag[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"flag {flag!r} is missing its value")
            key, value = body, rest[i + 1]
            i += 2
        out[key] = value
    return out


def _resolve_config(config_path: str | None, rest: list[str]) -> TrainConfig:
    cfg = load_config(config_path) if config_path else TrainConfig()
    return apply_overrides(cfg, _collect_overrides(rest))


def _record_sink(path: str | None):
    """Return (emit, close) for line-delimited JSON records."""
    if path is None:
        return (lambda obj: print(json.dumps(obj, sort_keys=True))), (lambda: None)
    handle = open(path, "w", encoding="utf-8")

    def emit(obj):
        handle.write(json.dumps(obj, sort_keys=True) + "\n")

    return emit, handle.close


def _metrics_table(report: dict) -> str:
    titles = [COLUMN_TITLES[c] for c in REPORT_COLUMNS]
    cells = []
    for col in REPORT_COLUMNS:
        value = report[col]
        cells.append(value if isinstance(value, str) else f"{value:.4f}")
    widths = [max(len(t), len(c)) for t, c in zip(titles, cells)]
    head = "  ".join(t.ljust(w) for t, w in zip(titles, widths))
    body = "  ".join(c.ljust(w) for c, w in zip(cells, widths))
    return head + "\n" + body


def _load_feature_map(data_dir: str, video_ids) -> dict:
    return {vid: load_features(data_dir, vid) for vid in sorted(set(video_ids))}


def _read_split(cfg: TrainConfig, split: str, required: bool = True):
    """Dataset records for one split, or None when optional and absent."""
    root = Path(cfg.data_dir)
    if cfg.task == "dialogue":
        path = root / f"{split}.jsonl"
        reader = read_dialogues
    else:
        path = root / f"{cfg.task}_{split}.jsonl"
        reader = read_qa_examples
    if not path.exists():
        if required:
            raise DataError(f"no {split} split at {path}")
        return None
    return reader(path)


# ---------------------------------------------------------------------------
# synthesize


def cmd_synthesize(args, rest: list[str]) -> int:
    from .data import synthesize_dialogues, synthesize_qa, write_feature_file

    cfg = _resolve_config(args.config, rest)
    synth = SynthConfig(
        dialogs=args.train_items + args.val_items,
        steps=args.steps, cells=args.cells,
        d_pre_vis=cfg.d_pre_vis, d_pre_aud=cfg.d_pre_aud,
    )
    root = Path(cfg.data_dir)
    records, feats = synthesize_dialogues(cfg.seed, synth)
    for split, chunk in _split(records, args.train_items):
        save_dataset(root, split, chunk, {r.video_id: feats[r.video_id] for r in chunk})
    print(f"dialogues: {args.train_items} train + {args.val_items} val -> {root}")

    (root / "features").mkdir(parents=True, exist_ok=True)
    for task in ("action", "transition", "count", "frame"):
        examples, feats = synthesize_qa(cfg.seed, synth, task)
        for vid, (video, audio) in feats.items():
            write_feature_file(root / "features" / f"{vid}.vis", video)
            write_feature_file(root / "features" / f"{vid}.aud", audio)
        for split, chunk in _split(examples, args.train_items):
            write_qa_examples(root / f"qa-{task}_{split}.jsonl", chunk)
        print(f"qa-{task}: {args.train_items} train + {args.val_items} val -> {root}")
    return 0


def _split(items: list, n_train: int):
    return (("train", items[:n_train]), ("val", items[n_train:]))


# ---------------------------------------------------------------------------
# train


def cmd_train(args, rest: list[str]) -> int:
    cfg = _resolve_config(args.config, rest)
    train_data = _read_split(cfg, "train")
    val_data = _read_split(cfg, "val", required=False)

    if cfg.task == "dialogue":
        vocab = vocab_from_dialogues(train_data, cfg.min_count)
        ids = [r.video_id for r in train_data + (val_data or [])]
        features = _load_feature_map(cfg.data_dir, ids)
        model = ResponseModel(cfg, vocab)
        train_items = dialogue_items(train_data, features, vocab)
        val_items = dialogue_items(val_data, features, vocab) if val_data else []
        example_loss = lambda item: model.loss(item[0], item[1])
        answer_tokens = None
    else:
        vocab = vocab_from_qa(train_data, cfg.min_count)
        ids = [e.video_id for e in train_data + (val_data or [])]
        features = _load_feature_map(cfg.data_dir, ids)
        answers = answer_inventory(train_data) if cfg.task == "qa-frame" else None
        model = QAModel(cfg, vocab, answers)
        train_items = train_data
        val_items = val_data or []
        example_loss = lambda ex: qa_example_loss(model, ex, features)
        answer_tokens = answers.tokens if answers else None

    trainer = Trainer(cfg, model.params, example_loss, train_items, val_items,
                      vocab_tokens=vocab.tokens, answer_tokens=answer_tokens)

    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    latest = run_dir / "latest.ckpt"
    if args.resume:
        if not latest.exists():
            raise ConfigError(f"--resume requested but {latest} does not exist")
        trainer.resume(load_checkpoint(latest))
        print(f"resumed after epoch {trainer.epochs_done} from {latest}")

    emit, close = _record_sink(str(run_dir / "history.jsonl"))
    print(f"{'epoch':>5}  {'train_loss':>10}  {'val_loss':>10}  {'lr':>10}")

    def on_epoch(row):
        print(f"{row.epoch:>5}  {row.train_loss:>10.4f}  {row.val_loss:>10.4f}"
              f"  {row.lr:>10.6f}")
        emit({"epoch": row.epoch, "train_loss": row.train_loss,
              "val_loss": row.val_loss, "lr": row.lr})

    try:
        trainer.run(on_epoch=on_epoch)
    except TrainingDiverged:
        # keep the best state reachable, then report the failure
        if trainer.best is not None:
            save_checkpoint(run_dir / "best.ckpt", trainer.best)
        close()
        raise
    close()

    save_checkpoint(run_dir / "best.ckpt", trainer.best)
    save_checkpoint(latest, trainer.snapshot())
    if trainer.val_history:
        best_epoch = trainer.val_history.index(min(trainer.val_history)) + 1
        print(f"best val_loss {min(trainer.val_history):.4f} at epoch {best_epoch}")
    print(f"checkpoints: {run_dir / 'best.ckpt'} and {latest}")
    return 0


# ---------------------------------------------------------------------------
# evaluate / generate (dialogue)


def _restore(checkpoint: str, rest: list[str]):
    ckpt = load_checkpoint(checkpoint)
    overrides = _collect_overrides(rest)
    cfg = None
    if overrides:
        from .config import parse_config_text

        cfg = apply_overrides(parse_config_text(ckpt.config_text), overrides)
    return ckpt, model_from_checkpoint(ckpt, cfg)


def cmd_evaluate(args, rest: list[str]) -> int:
    _, model = _restore(args.checkpoint, rest)
    if model.cfg.task != "dialogue":
        raise ConfigError("evaluate scores dialogue checkpoints; use score-qa")
    records = _read_split(model.cfg, args.split)
    features = _load_feature_map(model.cfg.data_dir, [r.video_id for r in records])

    emit, close = _record_sink(args.records)
    hypotheses, reference_lists = [], []
    for rec in records:
        for t in range(len(rec.turns)):
            hist, query, caption, _ = turn_arrays(rec, t, model.vocab)
            video, audio = features[rec.video_id]
            inputs = ModelInputs(hist, query, caption, video, audio)
            tokens = model.vocab.decode(model.generate(inputs))
            hypotheses.append(tokens)
            reference_lists.append(rec.turns[t].reference_lists())
            emit({"kind": "hypothesis", "video_id": rec.video_id, "turn": t,
                  "text": " ".join(tokens)})

    report = corpus_report(hypotheses, reference_lists)
    emit({"kind": "summary", "split": args.split, "items": len(hypotheses),
          **report})
    close()
    print(f"{args.split}: {len(hypotheses)} generated responses")
    print(_metrics_table(report))
    return 0


def cmd_generate(args, rest: list[str]) -> int:
    _, model = _restore(args.checkpoint, rest)
    if model.cfg.task != "dialogue":
        raise ConfigError("generate needs a dialogue checkpoint")
    records = _read_split(model.cfg, args.split)
    matches = [r for r in records if r.video_id == args.video_id]
    if not matches:
        raise DataError(f"video id {args.video_id!r} not in split {args.split!r}")
    rec = matches[0]
    if not 0 <= args.turn < len(rec.turns):
        raise DataError(f"turn {args.turn} out of range; record has {len(rec.turns)}")
    video, audio = load_features(model.cfg.data_dir, rec.video_id)
    hist, query, caption, _ = turn_arrays(rec, args.turn, model.vocab)
    tokens = model.vocab.decode(
        model.generate(ModelInputs(hist, query, caption, video, audio))
    )
    print(" ".join(tokens))
    return 0


# ---------------------------------------------------------------------------
# score-qa


def cmd_score_qa(args, rest: list[str]) -> int:
    _, model = _restore(args.checkpoint, rest)
    task = model.cfg.task
    if task not in QA_TASKS:
        raise ConfigError(f"score-qa needs a QA checkpoint, got task {task!r}")
    examples = _read_split(model.cfg, args.split)
    features = _load_feature_map(model.cfg.data_dir, [e.video_id for e in examples])

    emit, close = _record_sink(args.records)
    if task in ("qa-action", "qa-transition"):
        rep = evaluate_choice(model, examples, features)
        rows = [("accuracy", rep.accuracy), ("ties", rep.ties), ("total", rep.total)]
    elif task == "qa-count":
        rep = evaluate_count(model, examples, features)
        rows = [("mse", rep.mse), ("rounded_accuracy", rep.rounded_accuracy),
                ("total", rep.total)]
    else:
        rep = evaluate_frame(model, examples, features)
        rows = [("accuracy", rep.accuracy), ("unknown_answers", rep.unknown_answers),
                ("total", rep.total)]

    emit({"kind": "summary", "task": task, "split": args.split,
          **{k: v for k, v in rows}})
    close()
    print(f"{task} on {args.split}:")
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        shown = f"{value:.4f}" if isinstance(value, float) else str(value)
        print(f"  {key.ljust(width)}  {shown}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidial",
        description="video-grounded dialogue and video QA toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    syn = sub.add_parser("synthesize", help="write a toy dataset")
    syn.add_argument("--config", default=None)
    syn.add_argument("--train-items", type=int, default=50)
    syn.add_argument("--val-items", type=int, default=10)
    syn.add_argument("--steps", type=int, default=4)
    syn.add_argument("--cells", type=int, default=4)
    syn.set_defaults(func=cmd_synthesize)

    tr = sub.add_parser("train", help="train from a config")
    tr.add_argument("--config", default=None)
    tr.add_argument("--resume", action="store_true",
                    help="continue from run_dir/latest.ckpt")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="generation metrics for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="val")
    ev.add_argument("--records", default=None,
                    help="write JSON records here instead of stdout")
    ev.set_defaults(func=cmd_evaluate)

    gen = sub.add_parser("generate", help="decode one response")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--video-id", required=True)
    gen.add_argument("--turn", type=int, default=0)
    gen.add_argument("--split", default="val")
    gen.set_defaults(func=cmd_generate)

    qa = sub.add_parser("score-qa", help="QA accuracy for a checkpoint")
    qa.add_argument("--checkpoint", required=True)
    qa.add_argument("--split", default="val")
    qa.add_argument("--records", default=None)
    qa.set_defaults(func=cmd_score_qa)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        return args.func(args, rest)
    except VidialError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
