"""Command-line entry point: ``dsct <command> [--key value ...]``.

Settings come from built-in defaults, then an optional ``key = value``
config file (``--config``), then command-line flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from dsct import data, metrics
from dsct import tensor as T
from dsct.dnd import GumbelConfig, format_nominations
from dsct.model import MODEL_KINDS, ModelConfig, beam_search, build_model
from dsct.training import (Adam, CheckpointError, TrainConfig, capture_state, evaluate, load_checkpoint,
                           restore, save_checkpoint, strip_specials, train_scst, train_xe)

ABLATION_ROWS = [("baseline", "baseline"), ("psmae_add", "add"), ("psmae_concat", "concat"), ("dsct", "dnm")]
# full-scale COCO results reported for the four variants (x100 scale), shown for reference only
ABLATION_REFERENCE = {
    "baseline": (80.9, 38.7, 58.7, 131.7),
    "psmae_add": (81.4, 39.3, 59.3, 134.1),
    "psmae_concat": (81.7, 39.6, 59.6, 135.6),
    "dsct": (82.7, 40.3, 59.9, 137.6),
}


class CliError(Exception):
    pass


def _opt_float(s: str):
    return None if s.lower() in ("", "none", "off") else float(s)


def _opt_int(s: str):
    return None if s.lower() in ("", "none") else int(s)


def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, "seed for data, init, batching and noise"),
    "data": Key(str, "data", "dataset directory"),
    "ckpt": Key(str, "model.ckpt", "checkpoint path"),
    "init_from": Key(str, None, "cross-entropy checkpoint to finetune"),
    "out": Key(str, None, "output file (report, captions or table)"),
    "split": Key(str, "val", "dataset split: train or val"),
    "limit": Key(_opt_int, None, "only the first N items"),
    "dump_nominations": Key(str, None, "write per-word stream nominations here"),
    # data
    "n_train": Key(int, 2048), "n_val": Key(int, 256),
    "noise_std": Key(float, 0.1), "feature_dim": Key(int, 32),
    # model
    "d_model": Key(int, 64), "heads": Key(int, 4), "enc_layers": Key(int, 2), "dec_layers": Key(int, 2),
    "d_ff": Key(int, 128), "max_len": Key(int, 16), "keep_prob": Key(float, 0.9), "beam": Key(int, 5),
    "fusion": Key(str, "dnm", f"one of {MODEL_KINDS}"),
    "gumbel_temperature": Key(float, 1.0), "length_norm_alpha": Key(float, 0.0),
    # optimization
    "steps": Key(int, 3000), "batch_size": Key(int, 16), "warmup": Key(int, 2000),
    "lr_multiplier": Key(float, 1.0), "clip_norm": Key(_opt_float, None),
    "checkpoint_every": Key(int, 0), "scst_steps": Key(int, 300), "scst_lr": Key(float, 1e-5),
    "scst_beam": Key(int, 5), "ablate_steps": Key(int, 1500),
    "force": Key(_bool, False, "overwrite existing outputs"),
    "resume": Key(_bool, False, "continue from the checkpoint at --ckpt"),
}
FLAGS = {"force", "resume"}


def parse_config_file(path) -> dict[str, Any]:
    values: dict[str, Any] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SCHEMA:
            raise CliError(f"{path}:{n}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key].parse(raw)
        except ValueError as exc:
            raise CliError(f"{path}:{n}: bad value for {key}: {exc}") from exc
    return values


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """defaults < config file < flags"""
    cfg = {k: spec.default for k, spec in SCHEMA.items()}
    if args.config:
        cfg.update(parse_config_file(args.config))
    for k in SCHEMA:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    cfg["explicit"] = {k for k in SCHEMA if getattr(args, k, None) is not None}
    return cfg


def model_config(cfg: dict, vocab_size: int, fusion: str | None = None) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size, d_model=cfg["d_model"], heads=cfg["heads"], enc_layers=cfg["enc_layers"],
        dec_layers=cfg["dec_layers"], d_ff=cfg["d_ff"], max_len=cfg["max_len"],
        feature_dim_region=cfg["feature_dim"], feature_dim_seg=cfg["feature_dim"], keep_prob=cfg["keep_prob"],
        beam=cfg["beam"], gumbel=GumbelConfig(temperature=cfg["gumbel_temperature"]),
        fusion=fusion or cfg["fusion"], length_norm_alpha=cfg["length_norm_alpha"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], warmup=cfg["warmup"],
                       lr_multiplier=cfg["lr_multiplier"], clip_norm=cfg["clip_norm"], scst_steps=cfg["scst_steps"],
                       scst_lr=cfg["scst_lr"], scst_beam=cfg["scst_beam"], checkpoint_every=cfg["checkpoint_every"])


def _emit(line: str) -> None:
    print(line, flush=True)


def _write_out(cfg: dict, text: str) -> None:
    if cfg["out"]:
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _split_path(directory, split: str) -> Path:
    if split not in ("train", "val"):
        raise CliError(f"split must be 'train' or 'val', got {split!r}")
    return Path(directory) / f"{split}.bin"


def load_split(cfg: dict, split: str) -> data.Dataset:
    path = _split_path(cfg["data"], split)
    if not path.exists():
        raise CliError(f"dataset file {path} not found; run gen-data first")
    ds = data.load_dataset(path)
    if cfg["limit"]:
        ds = ds.subset(cfg["limit"])
    return ds


def _report_lines(summary: dict) -> str:
    return f"{metrics.format_report(summary)} exact={summary['exact']:.6f}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> None:
    out = Path(cfg["out"] or cfg["data"])
    targets = [out / "train.bin", out / "val.bin", out / "vocab.txt"]
    existing = [str(p) for p in targets if p.exists()]
    if existing and not cfg["force"]:
        raise CliError(f"{existing[0]} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    train, val = data.make_split(cfg["n_train"], cfg["n_val"], cfg["seed"], cfg["noise_std"], cfg["feature_dim"])
    data.save_dataset(train, targets[0])
    data.save_dataset(val, targets[1])
    data.save_vocab(train.vocab, targets[2])
    _emit(f"train={len(train)} val={len(val)} vocab={len(train.vocab)} dir={out}")


def _check_ckpt_target(cfg: dict) -> Path:
    path = Path(cfg["ckpt"])
    if path.exists() and not (cfg["force"] or cfg["resume"]):
        raise CliError(f"{path} already exists; pass --force to overwrite or --resume to continue")
    return path


def _final_eval(cfg: dict, model, val: data.Dataset) -> None:
    report = evaluate(model, val)
    _emit(_report_lines(report["summary"]))
    _write_out(cfg, json.dumps(report, indent=1, sort_keys=True))


def cmd_train(cfg: dict) -> None:
    path = _check_ckpt_target(cfg)
    train = load_split(cfg, "train")
    val = load_split(cfg, "val")
    tc = train_config(cfg)
    rng = T.make_rng(cfg["seed"], "train")
    if cfg["resume"] and path.exists():
        state = load_checkpoint(path)
        _check_vocab(state.vocab, train.vocab)
        model, opt = restore(state)
        T.set_rng_state(rng, state.rng_state)
        start = state.step
    else:
        model = build_model(model_config(cfg, len(train.vocab)), cfg["seed"])
        opt = Adam(model.named_parameters(), clip_norm=tc.clip_norm)
        start = 0

    def checkpoint(step):
        save_checkpoint(path, capture_state(model, opt, rng, step, train.vocab,
                                            {"stage": "xe", "train": tc.to_dict()}))

    train_xe(model, opt, train, tc, rng, start_step=start, log=_emit, on_checkpoint=checkpoint)
    checkpoint(max(start, tc.steps))
    _final_eval(cfg, model, val)


def cmd_finetune_scst(cfg: dict) -> None:
    if not cfg["init_from"]:
        raise CliError("finetune-scst needs --init-from pointing at a cross-entropy checkpoint")
    init = Path(cfg["init_from"])
    if not init.exists():
        raise CliError(f"--init-from checkpoint {init} not found")
    path = _check_ckpt_target(cfg)
    train = load_split(cfg, "train")
    val = load_split(cfg, "val")
    tc = train_config(cfg)
    rng = T.make_rng(cfg["seed"], "scst")
    if cfg["resume"] and path.exists():
        state = load_checkpoint(path)
        if state.extra.get("stage") != "scst":
            raise CliError(f"{path} is not a self-critical checkpoint; cannot resume")
        _check_vocab(state.vocab, train.vocab)
        model, opt = restore(state)
        T.set_rng_state(rng, state.rng_state)
        start = state.step
    else:
        state = load_checkpoint(init)
        _check_vocab(state.vocab, train.vocab)
        model, _ = restore(state)
        # the reward stage gets a fresh optimizer
        opt = Adam(model.named_parameters(), clip_norm=tc.clip_norm)
        start = 0

    def checkpoint(step):
        save_checkpoint(path, capture_state(model, opt, rng, step, train.vocab,
                                            {"stage": "scst", "train": tc.to_dict()}))

    train_scst(model, opt, train, tc, rng, start_step=start, log=_emit, on_checkpoint=checkpoint)
    checkpoint(max(start, tc.scst_steps))
    _final_eval(cfg, model, val)


def _check_vocab(saved: list[str], vocab: data.Vocab) -> None:
    if list(saved) != list(vocab.tokens):
        raise CliError("checkpoint vocabulary does not match the dataset vocabulary")


def _load_model(cfg: dict, ds: data.Dataset):
    path = Path(cfg["ckpt"])
    if not path.exists():
        raise CliError(f"checkpoint {path} not found")
    state = load_checkpoint(path)
    _check_vocab(state.vocab, ds.vocab)
    model, _ = restore(state)
    return model


def cmd_eval(cfg: dict) -> None:
    ds = load_split(cfg, cfg["split"])
    model = _load_model(cfg, ds)
    report = evaluate(model, ds, beam_k=cfg["beam"] if "beam" in cfg["explicit"] else None)
    _emit(_report_lines(report["summary"]))
    _write_out(cfg, json.dumps(report, indent=1, sort_keys=True))


def cmd_caption(cfg: dict) -> None:
    ds = load_split(cfg, cfg["split"])
    model = _load_model(cfg, ds)
    if cfg["dump_nominations"] and model.config.fusion != "dnm":
        raise CliError(f"a {model.config.fusion!r} model has no nomination module to dump")
    captions, dumps = [], []
    for start in range(0, len(ds), 64):
        chunk = ds.items[start:start + 64]
        feats = data.collate_features(chunk)
        best = [h[0] for h in beam_search(model, feats)]
        captions.extend(ds.vocab.decode(h.tokens) for h in best)
        if cfg["dump_nominations"]:
            for i, h in enumerate(best):
                dumps.append(_nominations(model, feats.take([i]), h.tokens, ds.vocab))
    text = "\n".join(captions) + "\n"
    if cfg["out"]:
        _write_out(cfg, text)
    else:
        sys.stdout.write(text)
    if cfg["dump_nominations"]:
        Path(cfg["dump_nominations"]).write_text("\n\n".join("\n".join(d) for d in dumps) + "\n")


def _nominations(model, feats, tokens: list[int], vocab: data.Vocab) -> list[str]:
    """Nomination of every generated word; row t of each map produced token t+1."""
    words = strip_specials(tokens)
    with T.no_grad():
        _, psis = model.forward(feats, np.asarray([tokens[:len(words) + 1]]))
    return format_nominations([vocab.tokens[w] for w in words], [p.data[0] for p in psis])


def cmd_ablate(cfg: dict) -> None:
    train = load_split(cfg, "train")
    val = load_split(cfg, "val")
    tc = train_config(cfg)
    tc.steps = cfg["ablate_steps"]
    rows = []
    for label, fusion in ABLATION_ROWS:
        model = build_model(model_config(cfg, len(train.vocab), fusion), cfg["seed"])
        opt = Adam(model.named_parameters(), clip_norm=tc.clip_norm)
        train_xe(model, opt, train, tc, T.make_rng(cfg["seed"], "train"))
        s = evaluate(model, val)["summary"]
        rows.append((label, s))
        _emit(f"# finished {label}")
    lines = ["variant bleu1 bleu4 rougeL ciderD"]
    lines += [f"{label} " + " ".join(f"{s[k]:.4f}" for k in metrics.REPORT_KEYS) for label, s in rows]
    lines.append("# reference, full-scale COCO (x100, not comparable in scale):")
    lines += [f"# {label} " + " ".join(f"{v:.1f}" for v in ABLATION_REFERENCE[label]) for label, _ in rows]
    table = "\n".join(lines) + "\n"
    sys.stdout.write(table)
    _write_out(cfg, table)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune-scst": cmd_finetune_scst,
    "eval": cmd_eval,
    "caption": cmd_caption,
    "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsct", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value settings file")
        for key, spec in SCHEMA.items():
            flag = "--" + key.replace("_", "-")
            if key in FLAGS:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=spec.help)
            else:
                p.add_argument(flag, dest=key, type=spec.parse, default=None, help=spec.help)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except (CliError, CheckpointError, T.ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
