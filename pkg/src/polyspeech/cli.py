"""Command-line entry point and experiment recipes.

Subcommands: gen-data, train-sset, train-lm, train-decoder, infer, eval,
ablate, gradcheck. Configuration is a JSON document; --set key.path=value
overrides individual fields and POLYSPEECH_SEED serves as the seed fallback.
All artifacts live under --out-dir in manifests/, checkpoints/, logs/, and
reports/. Exit codes: 0 success, 1 usage, 2 dependency or contract
violation, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as mt
from . import sset as ss
from . import tasks as tk
from . import token_decoder as td
from . import toyworld as tw
from . import trainer as tr
from .checkpoint import (load_checkpoint, save_checkpoint,
                         save_with_optimizer, split_optimizer)
from .decoding import BEAM, GREEDY, TOP_K, DecodeConfig, classify, generate, \
    lm_step_fn
from .lm import LmConfig, MultiModalLm, lm_loss, task_el
from .numerics import AdamState, Tensor, finite_diff_gradcheck
from .rng import stream
from .tasks import (ASR, GID, LID, SOURCE_CONTINUOUS, SOURCE_SSET_TOKENS,
                    TTS, RawExample, Vocab, assemble,
                    assemble_tts_infer_prefix)
from .trainer import TaskMix, TrainConfig, init_from_text_lm, sample_task, \
    select_best, train_update, validation_loss


class CliError(Exception):
    """Raised for anticipated failures; `code` is the process exit code."""

    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def usage_error(msg: str) -> CliError:
    return CliError(msg, 1)


def dependency_error(msg: str) -> CliError:
    return CliError(msg, 2)


# -- configuration --------------------------------------------------------------


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "world": {},
    "data": {"train": 300, "val": 60, "test": 60,
             "held_out_speakers": True, "balance_languages": True},
    "sset": {"latent_dim": 8, "downsample_factor": 2, "codebook_size": 64,
             "num_rvq_layers": 4, "hidden_channels": 32,
             "commitment_weight": 0.25, "ema_decay": 0.99,
             "dead_code_steps": 100, "activation": "relu",
             "steps": 300, "batch_size": 8, "val_every": 50,
             "peak_lr": 2e-3, "warmup_steps": 20, "init_utterances": 64},
    "lm": {"num_layers": 2, "num_heads": 4, "d_model": 64, "d_ffn": 256,
           "max_seq_len": 160, "full_causal": False},
    "train": {"accumulation_steps": 4, "batch_size": 4, "max_updates": 400,
              "val_every": 100, "peak_lr": 3e-3, "warmup_steps": 40},
    "decoder": {"code_dim": 24, "speaker_hidden": 24, "speaker_dim": 8,
                "steps": 300, "batch_size": 4, "val_every": 50,
                "peak_lr": 2e-3, "warmup_steps": 20},
    "decode": {"mode": TOP_K, "k": 5, "beam_size": 5, "max_len": 48,
               "temperature": 1.0},
    "tasks": [ASR, TTS, LID, GID],
    "source": SOURCE_CONTINUOUS,
    "text_lm_init": False,
    "text_lm": {"updates": 150, "batch_size": 8, "peak_lr": 3e-3,
                "warmup_steps": 20},
}


def _deep_update(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _apply_set(config: dict, item: str) -> None:
    if "=" not in item:
        raise usage_error(f"--set expects key.path=value, got {item!r}")
    path, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    keys = path.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise usage_error(f"--set path {path!r} crosses a non-dict value")
    node[keys[-1]] = value


def load_experiment_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    explicit_seed = False
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise usage_error(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text(encoding="utf-8"))
        explicit_seed = "seed" in file_cfg
        _deep_update(config, file_cfg)
    for item in getattr(args, "set", None) or []:
        _apply_set(config, item)
        if item.split("=", 1)[0] == "seed":
            explicit_seed = True
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    elif not explicit_seed and os.environ.get("POLYSPEECH_SEED"):
        config["seed"] = int(os.environ["POLYSPEECH_SEED"])
    if config["source"] not in (SOURCE_CONTINUOUS, SOURCE_SSET_TOKENS):
        raise usage_error(f"unknown source {config['source']!r}")
    unknown = set(config["tasks"]) - {ASR, TTS, LID, GID}
    if unknown:
        raise usage_error(f"unknown tasks: {sorted(unknown)}")
    return config


# -- builders ---------------------------------------------------------------------


def build_world(config: dict) -> tw.ToyWorld:
    fields = dict(config.get("world", {}))
    fields.setdefault("seed", config["seed"])
    return tw.build_world(tw.ToyWorldConfig(**fields))


def build_vocab(world: tw.ToyWorld, config: dict) -> Vocab:
    return Vocab.from_world(world, config["sset"]["codebook_size"])


def _pick(d: dict, names) -> dict:
    return {k: d[k] for k in names if k in d}


def build_sset_model(world: tw.ToyWorld, config: dict) -> ss.SsetModel:
    cfg = ss.SsetConfig(frame_dim=world.cfg.frame_dim,
                        **_pick(config["sset"], (
                            "latent_dim", "downsample_factor", "codebook_size",
                            "num_rvq_layers", "commitment_weight",
                            "hidden_channels", "ema_decay", "dead_code_steps",
                            "activation")))
    return ss.SsetModel(cfg, seed=config["seed"])


def build_lm_config(world: tw.ToyWorld, vocab: Vocab, config: dict) -> LmConfig:
    return LmConfig(text_vocab_size=vocab.text_size,
                    speech_vocab_size=vocab.speech_size,
                    continuous_input_dim=world.cfg.frame_dim,
                    **_pick(config["lm"], (
                        "num_layers", "num_heads", "d_model", "d_ffn",
                        "max_seq_len", "full_causal")))


def head_vocab_for(task_list, vocab: Vocab) -> dict[str, int]:
    return {task: (vocab.speech_size if task == TTS else vocab.text_size)
            for task in task_list}


def build_decoder_model(world: tw.ToyWorld, config: dict
                        ) -> td.TokenDecoderModel:
    cfg = td.TokenDecoderConfig(
        codebook_size=config["sset"]["codebook_size"],
        upsample_factor=config["sset"]["downsample_factor"],
        frame_dim=world.cfg.frame_dim,
        **_pick(config["decoder"], ("code_dim", "speaker_hidden",
                                    "speaker_dim")))
    return td.TokenDecoderModel(cfg, seed=config["seed"])


def build_decode_config(config: dict, seed: int) -> DecodeConfig:
    return DecodeConfig(seed=seed, **_pick(config["decode"], (
        "mode", "k", "beam_size", "max_len", "temperature",
        "length_normalize")))


# -- out-dir layout ----------------------------------------------------------------


def out_paths(out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {name: out / name
             for name in ("manifests", "checkpoints", "logs", "reports")}
    for p in paths.values():
        p.mkdir(parents=True, exist_ok=True)
    paths["root"] = out
    return paths


def require_manifest(paths: dict, split: str) -> Path:
    manifest = paths["manifests"] / f"{split}.jsonl"
    if not manifest.exists():
        raise dependency_error(
            f"missing {manifest}; run gen-data first")
    return manifest


def require_checkpoint(paths: dict, stage: str) -> Path:
    ckpt = paths["checkpoints"] / f"{stage}.pspk"
    if not ckpt.exists():
        raise dependency_error(
            f"missing {ckpt}; run train-{stage} first")
    return ckpt


# -- training log ------------------------------------------------------------------


LOG_HEADER = "update,task,loss,lr,wallclock_ms\n"


class TrainLog:
    """Append-only CSV: update,task,loss,lr,wallclock_ms."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        if not append or not self.path.exists():
            self.path.write_text(LOG_HEADER, encoding="utf-8")

    def row(self, update: int, task: str, loss: float, lr: float,
            wallclock_ms: float) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(f"{update},{task},{loss!r},{lr!r},{wallclock_ms:.3f}\n")


# -- rng state plumbing -------------------------------------------------------------


def rng_state_json(rng: np.random.Generator) -> dict:
    def conv(x):
        if isinstance(x, np.ndarray):
            return [int(v) for v in x]
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (np.integer,)):
            return int(x)
        return x
    return conv(rng.bit_generator.state)


def restore_rng_state(rng: np.random.Generator, state: dict) -> None:
    def conv(x):
        if isinstance(x, list):
            return np.array(x, dtype=np.uint64)
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x
    rng.bit_generator.state = conv(state)


# -- data assembly -------------------------------------------------------------------


def load_utterances(paths: dict, split: str) -> list[tw.ToyUtterance]:
    return tw.load_manifest(require_manifest(paths, split))


def tokenize_all(codec: ss.SsetModel, utts) -> dict[str, list[int]]:
    return {u.id: codec.tokenize(u.frames).codes for u in utts}


def build_task_data(utts, task_list, vocab: Vocab, source: str,
                    codes: dict[str, list[int]] | None) -> dict[str, list]:
    data: dict[str, list] = {}
    for task in sorted(task_list):
        exs = []
        for u in utts:
            toks = codes.get(u.id) if codes else None
            raw = RawExample.from_utterance(u, speech_tokens=toks)
            exs.append(assemble(raw, task, vocab, source))
        data[task] = exs
    return data


def needs_codec(config: dict) -> bool:
    return TTS in config["tasks"] or config["source"] == SOURCE_SSET_TOKENS


def load_codec(paths: dict, world: tw.ToyWorld, config: dict) -> ss.SsetModel:
    ckpt = require_checkpoint(paths, "sset")
    tensors, _ = load_checkpoint(ckpt)
    codec = build_sset_model(world, config)
    ss.sset_load_state(codec, tensors)
    return codec


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = load_experiment_config(args)
    paths = out_paths(args.out_dir)
    manifests_dir = paths["manifests"]
    existing = list(manifests_dir.iterdir())
    if existing and not args.force:
        raise dependency_error(
            f"{manifests_dir} is not empty; pass --force to overwrite")
    world = build_world(config)
    data_cfg = config["data"]
    sizes = {"train": data_cfg["train"], "val": data_cfg["val"],
             "test": data_cfg["test"]}
    manifests = tw.sample_corpus(
        world, sizes, manifests_dir,
        held_out_speakers=data_cfg["held_out_speakers"],
        balance_languages=data_cfg["balance_languages"])
    (paths["root"] / "config.json").write_text(
        json.dumps(config, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    for split in sorted(manifests):
        print(manifests[split])
    return 0


def _finite_or_raise(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {what}: {value}")


def cmd_train_sset(args) -> int:
    config = load_experiment_config(args)
    paths = out_paths(args.out_dir)
    train = load_utterances(paths, "train")
    val = load_utterances(paths, "val")
    model = build_sset_model(build_world(config), config)
    scfg = config["sset"]
    opt = AdamState(peak_lr=scfg["peak_lr"], warmup_steps=scfg["warmup_steps"])
    rng = stream(config["seed"], "sset-batches")
    start = 0
    scored: list[tuple[int, float]] = []
    if args.resume:
        tensors, snap = load_checkpoint(args.resume)
        model_tensors, opt_state = split_optimizer(tensors)
        ss.sset_load_state(model, model_tensors)
        _restore_opt(opt, opt_state)
        restore_rng_state(rng, snap["rng_state"])
        start = snap["update"]
        scored = [tuple(v) for v in snap["validations"]]
    else:
        init_pool = train[:scfg["init_utterances"]]
        ss.init_codebooks(model, [u.frames for u in init_pool],
                          seed=config["seed"])
    log = TrainLog(paths["logs"] / "sset.csv", append=start > 0)
    val_frames = [u.frames for u in val]

    def val_mse() -> float:
        total, n = 0.0, 0
        for frames in val_frames:
            latents = model.encode(frames)
            _, quantized, _ = model.quantize_sequence(latents)
            recon = model.decode(quantized)[:len(frames)]
            total += float(((recon - frames) ** 2).sum())
            n += frames.size
        return total / n

    for update in range(start + 1, scfg["steps"] + 1):
        t0 = time.monotonic()
        idx = rng.choice(len(train), size=min(scfg["batch_size"], len(train)),
                         replace=False)
        batch = [train[int(i)].frames for i in idx]
        recon, commit = ss.sset_train_step(model, batch, opt)
        _finite_or_raise(recon, "sset reconstruction loss")
        log.row(update, "sset", recon + scfg["commitment_weight"] * commit,
                opt.lr_at(opt.step_count), (time.monotonic() - t0) * 1e3)
        if update % scfg["val_every"] == 0 or update == scfg["steps"]:
            scored.append((update, val_mse()))
            snap = {"config": config, "stage": "sset", "update": update,
                    "rng_state": rng_state_json(rng),
                    "validations": scored}
            save_with_optimizer(
                paths["checkpoints"] / f"sset-{update:06d}.pspk",
                ss.sset_state_tensors(model), opt, snap)
    best = select_best(scored)
    tensors, snap = load_checkpoint(
        paths["checkpoints"] / f"sset-{best:06d}.pspk")
    model_tensors, _ = split_optimizer(tensors)
    save_checkpoint(paths["checkpoints"] / "sset.pspk", model_tensors,
                    {"config": config, "stage": "sset", "update": best,
                     "validations": scored})
    print(f"best sset checkpoint: update {best}")
    return 0


def _restore_opt(opt: AdamState, opt_state: dict) -> None:
    opt.step_count = opt_state["step_count"]
    opt.first_moment = {k: np.array(v) for k, v in opt_state["m1"].items()}
    opt.second_moment = {k: np.array(v) for k, v in opt_state["m2"].items()}


def _pretrain_text_lm(config: dict, lm_cfg: LmConfig, train_utts,
                      vocab: Vocab) -> MultiModalLm:
    tcfg_d = config["text_lm"]
    tcfg = TrainConfig(accumulation_steps=1,
                       batch_size=tcfg_d["batch_size"],
                       max_updates=tcfg_d["updates"],
                       val_every=max(1, tcfg_d["updates"] // 2),
                       seed=config["seed"],
                       peak_lr=tcfg_d["peak_lr"],
                       warmup_steps=tcfg_d["warmup_steps"])
    text_lm = tr.build_text_lm(lm_cfg, seed=config["seed"] + 1)
    tr.train_text_lm(text_lm, [u.text for u in train_utts], vocab, tcfg)
    return text_lm


def cmd_train_lm(args) -> int:
    config = load_experiment_config(args)
    paths = out_paths(args.out_dir)
    world = build_world(config)
    vocab = build_vocab(world, config)
    train = load_utterances(paths, "train")
    val = load_utterances(paths, "val")

    codes_train = codes_val = None
    if needs_codec(config):
        codec = load_codec(paths, world, config)
        codes_train = tokenize_all(codec, train)
        codes_val = tokenize_all(codec, val)

    lm_cfg = build_lm_config(world, vocab, config)
    model = MultiModalLm(lm_cfg, head_vocab_for(config["tasks"], vocab),
                         seed=config["seed"])
    if config["text_lm_init"]:
        text_lm = _pretrain_text_lm(config, lm_cfg, train, vocab)
        init_from_text_lm(text_lm, model)

    train_data = build_task_data(train, config["tasks"], vocab,
                                 config["source"], codes_train)
    val_data = build_task_data(val, config["tasks"], vocab,
                               config["source"], codes_val)
    mix = TaskMix.from_data(train_data)
    tcfg_d = config["train"]
    tcfg = TrainConfig(seed=config["seed"], **_pick(tcfg_d, (
        "accumulation_steps", "batch_size", "max_updates", "val_every",
        "peak_lr", "warmup_steps")))
    opt = AdamState(peak_lr=tcfg.peak_lr, warmup_steps=tcfg.warmup_steps)
    rng = stream(config["seed"], "train-sampler")
    start = 0
    scored: list[tuple[int, float]] = []
    if args.resume:
        tensors, snap = load_checkpoint(args.resume)
        model_tensors, opt_state = split_optimizer(tensors)
        model.load_state(model_tensors)
        _restore_opt(opt, opt_state)
        restore_rng_state(rng, snap["rng_state"])
        start = snap["update"]
        scored = [tuple(v) for v in snap["validations"]]
    log = TrainLog(paths["logs"] / "lm.csv", append=start > 0)
    for update in range(start + 1, tcfg.max_updates + 1):
        t0 = time.monotonic()
        metrics = train_update(model, opt, train_data, mix, tcfg, rng)
        _finite_or_raise(metrics["loss"], "lm loss")
        tasks_seen = "+".join(sorted(t for t in metrics if t != "loss"))
        log.row(update, tasks_seen, metrics["loss"],
                opt.lr_at(opt.step_count), (time.monotonic() - t0) * 1e3)
        if update % tcfg.val_every == 0 or update == tcfg.max_updates:
            vloss = validation_loss(model, val_data, mix)
            scored.append((update, vloss))
            snap = {"config": config, "stage": "lm", "update": update,
                    "rng_state": rng_state_json(rng),
                    "validations": scored,
                    "head_vocab": head_vocab_for(config["tasks"], vocab)}
            save_with_optimizer(
                paths["checkpoints"] / f"lm-{update:06d}.pspk",
                model.state_tensors(), opt, snap)
    best = select_best(scored)
    tensors, snap = load_checkpoint(paths["checkpoints"] / f"lm-{best:06d}.pspk")
    model_tensors, _ = split_optimizer(tensors)
    save_checkpoint(paths["checkpoints"] / "lm.pspk", model_tensors,
                    {"config": config, "stage": "lm", "update": best,
                     "validations": scored,
                     "head_vocab": head_vocab_for(config["tasks"], vocab)})
    print(f"best lm checkpoint: update {best}")
    return 0


def _decoder_pairs(utts, codes: dict[str, list[int]], rng) -> list[tuple]:
    """(codes, prompt frames, target frames) triples; prompt is a different
    utterance of the target's speaker."""
    by_speaker: dict[int, list] = {}
    for u in utts:
        by_speaker.setdefault(u.speaker, []).append(u)
    pairs = []
    for speaker in sorted(by_speaker):
        group = by_speaker[speaker]
        if len(group) < 2:
            continue
        for i, target in enumerate(group):
            prompt = group[(i + 1) % len(group)]
            pairs.append((codes[target.id], prompt.frames, target.frames))
    if not pairs:
        raise dependency_error("no speaker has two utterances; "
                               "decoder training needs prompt pairs")
    return pairs


def cmd_train_decoder(args) -> int:
    config = load_experiment_config(args)
    paths = out_paths(args.out_dir)
    world = build_world(config)
    train = load_utterances(paths, "train")
    val = load_utterances(paths, "val")
    codec = load_codec(paths, world, config)
    model = build_decoder_model(world, config)
    dcfg = config["decoder"]
    opt = AdamState(peak_lr=dcfg["peak_lr"], warmup_steps=dcfg["warmup_steps"])
    rng = stream(config["seed"], "decoder-batches")
    pairs = _decoder_pairs(train, tokenize_all(codec, train), rng)
    val_pairs = _decoder_pairs(val, tokenize_all(codec, val), rng)
    start = 0
    scored: list[tuple[int, float]] = []
    if args.resume:
        tensors, snap = load_checkpoint(args.resume)
        model_tensors, opt_state = split_optimizer(tensors)
        model.load_state(model_tensors)
        _restore_opt(opt, opt_state)
        restore_rng_state(rng, snap["rng_state"])
        start = snap["update"]
        scored = [tuple(v) for v in snap["validations"]]
    log = TrainLog(paths["logs"] / "decoder.csv", append=start > 0)

    def val_loss() -> float:
        total = 0.0
        for codes, prompt, target in val_pairs:
            spk = model.encode_speaker(prompt)
            decoded = model.decode_to_frames(codes, spk)
            n = min(len(decoded), len(target))
            total += float(((decoded[:n] - target[:n]) ** 2).mean())
        return total / len(val_pairs)

    for update in range(start + 1, dcfg["steps"] + 1):
        t0 = time.monotonic()
        idx = rng.choice(len(pairs), size=min(dcfg["batch_size"], len(pairs)),
                         replace=False)
        loss = td.decoder_train_step(model, [pairs[int(i)] for i in idx], opt)
        _finite_or_raise(loss, "decoder loss")
        log.row(update, "decoder", loss, opt.lr_at(opt.step_count),
                (time.monotonic() - t0) * 1e3)
        if update % dcfg["val_every"] == 0 or update == dcfg["steps"]:
            scored.append((update, val_loss()))
            snap = {"config": config, "stage": "decoder", "update": update,
                    "rng_state": rng_state_json(rng),
                    "validations": scored}
            save_with_optimizer(
                paths["checkpoints"] / f"decoder-{update:06d}.pspk",
                model.state_tensors(), opt, snap)
    best = select_best(scored)
    tensors, _ = load_checkpoint(
        paths["checkpoints"] / f"decoder-{best:06d}.pspk")
    model_tensors, _ = split_optimizer(tensors)
    save_checkpoint(paths["checkpoints"] / "decoder.pspk", model_tensors,
                    {"config": config, "stage": "decoder", "update": best,
                     "validations": scored})
    print(f"best decoder checkpoint: update {best}")
    return 0


# -- inference -----------------------------------------------------------------------


def _load_lm(paths: dict, task: str):
    ckpt = require_checkpoint(paths, "lm")
    tensors, snap = load_checkpoint(ckpt)
    config = snap["config"]
    if task not in snap["head_vocab"]:
        raise dependency_error(
            f"checkpoint has no head for task {task!r}; trained tasks: "
            f"{sorted(snap['head_vocab'])}")
    world = build_world(config)
    vocab = build_vocab(world, config)
    model = MultiModalLm(build_lm_config(world, vocab, config),
                         snap["head_vocab"], seed=config["seed"])
    model.load_state(tensors)
    return model, world, vocab, config


def _source_prefix(u: tw.ToyUtterance, task: str, source: str, vocab: Vocab,
                   codes: dict | None):
    toks = codes.get(u.id) if codes else None
    raw = RawExample.from_utterance(u, speech_tokens=toks)
    from .tasks import _source_elements
    src = _source_elements(raw, source)
    return src + [task_el(tk.TASK_IDS[task])], len(src) + 1


def cmd_infer(args) -> int:
    task = args.task
    if task not in (ASR, TTS, LID, GID):
        raise usage_error(f"unknown task {task!r}")
    if task == TTS and not args.prompt_utterance:
        raise usage_error("TTS inference requires --prompt-utterance")
    paths = out_paths(args.out_dir)
    model, world, vocab, config = _load_lm(paths, task)
    manifest = Path(args.manifest) if args.manifest \
        else require_manifest(paths, "test")
    if not manifest.exists():
        raise dependency_error(f"manifest not found: {manifest}")
    utts = tw.load_manifest(manifest)
    if args.limit:
        utts = utts[:args.limit]
    seed = args.seed if args.seed is not None else config["seed"]
    dcfg = build_decode_config(config, seed)
    if args.mode:
        dcfg.mode = args.mode
    out_path = Path(args.output) if args.output \
        else paths["reports"] / f"outputs-{task}.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)

    codes = None
    codec = None
    if task == TTS or config["source"] == SOURCE_SSET_TOKENS:
        codec = load_codec(paths, world, config)
        codes = tokenize_all(codec, utts)

    records = []
    if task in (LID, GID):
        allowed = vocab.tag_ids(task)
        for u in utts:
            prefix, boundary = _source_prefix(u, task, config["source"],
                                              vocab, codes)
            tag = vocab.text_token(classify(model, prefix, boundary, task,
                                            allowed))
            ref = u.language if task == LID else u.gender
            records.append({"id": u.id, "ref": ref, "hyp": tag})
    elif task == ASR:
        for u in utts:
            prefix, boundary = _source_prefix(u, task, config["source"],
                                              vocab, codes)
            fn = lm_step_fn(model, prefix, boundary, task)
            rng = stream(seed, "infer", task, u.id)
            ids, truncated = generate(fn, vocab.text_eos, dcfg, rng)
            records.append({"id": u.id, "ref": u.text,
                            "hyp": vocab.decode_text(ids),
                            "truncated": truncated})
    else:  # TTS
        decoder_ckpt = require_checkpoint(paths, "decoder")
        dec_tensors, dec_snap = load_checkpoint(decoder_ckpt)
        decoder = build_decoder_model(world, dec_snap["config"])
        decoder.load_state(dec_tensors)
        prompts = {u.id: u for u in utts}
        if args.prompt_utterance not in prompts:
            raise dependency_error(
                f"prompt utterance {args.prompt_utterance!r} not in manifest")
        prompt = prompts[args.prompt_utterance]
        prompt_codes = codes[prompt.id]
        frames_dir = paths["reports"] / "tts-frames"
        frames_dir.mkdir(exist_ok=True)
        spk = decoder.encode_speaker(prompt.frames)
        for u in utts:
            if u.id == prompt.id:
                continue
            prefix, boundary = assemble_tts_infer_prefix(
                prompt.text, u.text, prompt_codes, vocab)
            fn = lm_step_fn(model, prefix, boundary, TTS)
            rng = stream(seed, "infer", task, u.id)
            ids, truncated = generate(fn, vocab.speech_eos, dcfg, rng)
            rec = {"id": u.id, "ref": u.text, "codes": ids,
                   "prompt": prompt.id, "truncated": truncated}
            if ids:
                frames = decoder.decode_to_frames(ids, spk)
                fp = frames_dir / f"{u.id}.psfr"
                tw.write_frames(fp, frames)
                rec["frames_path"] = str(fp.relative_to(paths["root"]))
                rec["prompt_frames"] = str(
                    (manifest.parent / f"frames/{prompt.id}.psfr")
                    .relative_to(paths["root"]))
            records.append(rec)

    with open(out_path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(out_path)
    return 0


def cmd_eval(args) -> int:
    task = args.task
    if task not in (ASR, TTS, LID, GID):
        raise usage_error(f"unknown task {task!r}")
    paths = out_paths(args.out_dir)
    outputs_path = Path(args.outputs) if args.outputs \
        else paths["reports"] / f"outputs-{task}.jsonl"
    if not outputs_path.exists():
        raise dependency_error(f"outputs file not found: {outputs_path}")
    lines = [json.loads(line) for line in
             outputs_path.read_text(encoding="utf-8").splitlines() if line]
    if not lines:
        raise dependency_error(f"outputs file is empty: {outputs_path}")
    out_csv = Path(args.output) if args.output \
        else paths["reports"] / f"eval-{task}.csv"

    reports = []
    if task == ASR:
        hyps = [r["hyp"] for r in lines]
        refs = [r["ref"] for r in lines]
        reports.append(mt.EvalReport(task, "cer",
                                     mt.corpus_cer(hyps, refs), len(lines)))
    elif task in (LID, GID):
        hyps = [r["hyp"] for r in lines]
        refs = [r["ref"] for r in lines]
        classes = sorted(set(refs))
        reports.append(mt.EvalReport(task, "accuracy",
                                     mt.accuracy(hyps, refs), len(lines)))
        reports.append(mt.EvalReport(task, "macro_f1",
                                     mt.macro_f1(hyps, refs, classes),
                                     len(lines)))
    else:  # TTS: oracle CER of synthesized frames + SECS against the prompt
        _, snap = load_checkpoint(require_checkpoint(paths, "lm"))
        world = build_world(snap["config"])
        hyps, refs, secs_vals = [], [], []
        for rec in lines:
            if "frames_path" not in rec:
                continue
            frames = tw.read_frames(paths["root"] / rec["frames_path"])
            hyps.append(tw.oracle_decode_text(world, frames))
            refs.append(rec["ref"])
            prompt_frames = tw.read_frames(paths["root"]
                                           / rec["prompt_frames"])
            secs_vals.append(mt.secs_toy(
                frames, prompt_frames,
                lambda f: tw.estimate_speaker_vector(f, world)))
        if not hyps:
            raise dependency_error("no synthesized frames to evaluate")
        reports.append(mt.EvalReport(task, "oracle_cer",
                                     mt.corpus_cer(hyps, refs), len(hyps)))
        reports.append(mt.EvalReport(task, "secs",
                                     float(np.mean(secs_vals)), len(hyps)))
    mt.write_report_csv(out_csv, reports)
    for r in reports:
        print(f"{r.task},{r.metric},{r.value}")
    return 0


# -- ablation ------------------------------------------------------------------------


def cmd_ablate(args) -> int:
    config = load_experiment_config(args)
    paths = out_paths(args.out_dir)
    matrix = config.get("ablate", {
        "task_sets": [[ASR], [ASR, TTS, LID, GID]],
        "sources": [SOURCE_CONTINUOUS],
        "inits": [False],
    })
    rows = []
    cell_id = 0
    for task_set in matrix["task_sets"]:
        for source in matrix["sources"]:
            for init in matrix["inits"]:
                cell_id += 1
                name = f"cell-{cell_id:02d}"
                row = {"cell": name, "tasks": "+".join(task_set),
                       "source": source, "text_lm_init": init}
                try:
                    row.update(_run_cell(config, paths, name, task_set,
                                         source, init))
                except Exception as exc:  # other cells continue
                    row["error"] = f"{type(exc).__name__}: {exc}"
                rows.append(row)
    out_csv = paths["reports"] / "ablation.csv"
    keys = ["cell", "tasks", "source", "text_lm_init", "val_loss",
            "asr_cer", "lid_accuracy", "gid_accuracy", "error"]
    with open(out_csv, "w", encoding="utf-8") as f:
        f.write(",".join(keys) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(k, "")) for k in keys) + "\n")
    print(out_csv)
    return 0


def _run_cell(base_config: dict, paths: dict, name: str, task_set, source,
              init) -> dict:
    """One ablation cell: shared corpus and seed, its own out-dir."""
    config = copy.deepcopy(base_config)
    config["tasks"] = list(task_set)
    config["source"] = source
    config["text_lm_init"] = bool(init)
    cell_dir = paths["root"] / "ablate" / name
    cell_paths = out_paths(cell_dir)
    # Share the corpus: cells reuse the parent manifests.
    for split in ("train", "val", "test"):
        src = require_manifest(paths, split)
        dst = cell_paths["manifests"] / f"{split}.jsonl"
        if not dst.exists():
            dst.symlink_to(src.resolve())
    frames_link = cell_paths["manifests"] / "frames"
    if not frames_link.exists():
        frames_link.symlink_to((paths["manifests"] / "frames").resolve())

    ns = argparse.Namespace(out_dir=str(cell_dir), config=None, set=None,
                            seed=config["seed"], resume=None)
    if needs_codec(config):
        _with_config(cmd_train_sset, ns, config)
    _with_config(cmd_train_lm, ns, config)
    _, snap = load_checkpoint(cell_paths["checkpoints"] / "lm.pspk")
    result = {"val_loss": min(v for _, v in snap["validations"])}
    for task in task_set:
        if task == TTS:
            continue
        infer_ns = argparse.Namespace(
            out_dir=str(cell_dir), task=task, manifest=None, output=None,
            seed=config["seed"], limit=None, mode=GREEDY,
            prompt_utterance=None)
        cmd_infer(infer_ns)
        out = cell_paths["reports"] / f"outputs-{task}.jsonl"
        lines = [json.loads(x) for x in
                 out.read_text(encoding="utf-8").splitlines()]
        hyps = [r["hyp"] for r in lines]
        refs = [r["ref"] for r in lines]
        if task == ASR:
            result["asr_cer"] = mt.corpus_cer(hyps, refs)
        elif task == LID:
            result["lid_accuracy"] = mt.accuracy(hyps, refs)
        elif task == GID:
            result["gid_accuracy"] = mt.accuracy(hyps, refs)
    return result


def _with_config(cmd, ns, config) -> None:
    """Run a command function with an in-memory config override."""
    import tempfile
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(config, f)
        path = f.name
    try:
        ns.config = path
        cmd(ns)
    finally:
        ns.config = None
        os.unlink(path)


# -- gradcheck -----------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    config = load_experiment_config(args)
    seed = config["seed"]
    results = {}

    world = tw.build_world(tw.ToyWorldConfig(seed=seed))
    u = tw.make_utterance(world, "gradcheck-0", speaker=0)
    vocab = Vocab.from_world(world, codebook_size=8)
    lm_cfg = LmConfig(text_vocab_size=vocab.text_size,
                      speech_vocab_size=vocab.speech_size,
                      continuous_input_dim=world.cfg.frame_dim,
                      num_layers=1, num_heads=2, d_model=8, d_ffn=16,
                      max_seq_len=64)
    model = MultiModalLm(lm_cfg, {ASR: vocab.text_size}, seed=seed)
    ex = assemble(RawExample.from_utterance(u), ASR, vocab)
    results["lm_loss"] = finite_diff_gradcheck(
        lambda p: lm_loss(model.forward(ex.elements, ASR, ex.boundary), ex),
        model.params)

    scfg = ss.SsetConfig(frame_dim=3, latent_dim=2, downsample_factor=2,
                         codebook_size=4, num_rvq_layers=2, hidden_channels=4)
    sm = ss.SsetModel(scfg, seed=seed)
    rng = stream(seed, "gradcheck-sset")
    batch = [rng.normal(size=(5, 3)) for _ in range(6)]
    ss.init_codebooks(sm, batch, seed=seed)
    frames = batch[0]
    lat0 = sm.encode(frames)
    _, q0, _ = sm.quantize_sequence(lat0)
    offset = q0 - lat0

    def sset_loss(params):
        from . import numerics as nm
        latent_t = sm.encode_t(frames)
        recon = sm.decode_t(latent_t + Tensor(offset))[:len(frames)]
        diff = recon - Tensor(frames)
        cdiff = latent_t - Tensor(q0)
        return nm.tmean(nm.mul(diff, diff)) \
            + nm.tmean(nm.mul(cdiff, cdiff)) * scfg.commitment_weight

    results["sset_loss"] = finite_diff_gradcheck(sset_loss, sm.params)

    dcfg = td.TokenDecoderConfig(codebook_size=4, code_dim=3,
                                 upsample_factor=2, frame_dim=3,
                                 speaker_hidden=3, speaker_dim=2)
    dm = td.TokenDecoderModel(dcfg, seed=seed)
    prompt = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 3))

    def dec_loss(params):
        from . import numerics as nm
        spk = dm.encode_speaker_t(prompt)
        diff = dm.decode_t([0, 2], spk) - Tensor(target)
        return nm.tmean(nm.mul(diff, diff))

    results["decoder_loss"] = finite_diff_gradcheck(dec_loss, dm.params)

    ok = True
    for name, err in results.items():
        status = "PASS" if err < 1e-4 else "FAIL"
        ok = ok and err < 1e-4
        print(f"{name}: max rel err {err:.3e} [{status}]")
    if not ok:
        raise CliError("gradcheck failed", 3)
    return 0


# -- entry point ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise usage_error(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="polyspeech",
                     description="Desk-scale multitask speech pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, resume=False):
        p.add_argument("--out-dir", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", default=None,
                       metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, default=None)
        if resume:
            p.add_argument("--resume", default=None,
                           help="full-state checkpoint to continue from")

    p = sub.add_parser("gen-data", help="generate the toy corpus")
    common(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-sset", help="train the speech codec")
    common(p, resume=True)
    p.set_defaults(fn=cmd_train_sset)

    p = sub.add_parser("train-lm", help="train the multitask LM")
    common(p, resume=True)
    p.set_defaults(fn=cmd_train_lm)

    p = sub.add_parser("train-decoder", help="train the token decoder")
    common(p, resume=True)
    p.set_defaults(fn=cmd_train_decoder)

    p = sub.add_parser("infer", help="run inference from checkpoints")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--mode", default=None,
                   choices=[TOP_K, BEAM, GREEDY])
    p.add_argument("--prompt-utterance", default=None)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score inference outputs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--outputs", default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the comparison matrix")
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
