"""
sparsekit 命令行: eval / bench / gradcheck / train / generate / passkey.

stdout 只输出机器可读的 JSON 或 CSV, 人类可读的信息走 stderr 上的 rich console.
退出码: 0 成功, 1 用法错误, 2 数值错误或检查失败, 3 IO 错误.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from rich.console import Console

from sparsekit.cache.kv_cache import dump_cache, load_cache
from sparsekit.cli.bench import BENCH_MODES, run_bench, write_bench_csv
from sparsekit.cli.bootstrap import (
    ConsoleProvider, LoggingBootstrapper, PrecisionBootstrapper, RunConfigProvider, RunOptions,
    SeedBootstrapper, ThreadsBootstrapper, boot,
)
from sparsekit.cli.config import RunConfig, dump_run_config
from sparsekit.cli.gradcheck import PRESETS, JvpFn, run_gradcheck
from sparsekit.container import Container
from sparsekit.exceptions import ArgumentException, CheckFailedException, ConfigException, SparseKException, \
    StorageException
from sparsekit.numerics import make_rng
from sparsekit.ops.sparsek import sparsek, sparsek_partial
from sparsekit.ops.stream import stream_init, stream_push
from sparsekit.trainer.evaluate import Generation, eval_ppl, generate_text, passkey_accuracy
from sparsekit.trainer.tasks import (
    BatchSource, PasskeyTask, RecallTask, RepeatingCorpus, TextCorpus, UniformCorpus,
)
from sparsekit.trainer.train import load_checkpoint_file, new_train_state, save_checkpoint_file, train

logger = logging.getLogger("sparsekit")

CHECKPOINT_FILE = "checkpoint.spkt"
GENERATION_META = "generation.json"


class _Parser(argparse.ArgumentParser):
    """
    argparse 默认以 2 退出; 用法错误统一成 ArgumentException (CODE 1).
    """

    def error(self, message: str):
        raise ArgumentException(message, at=self.prog)


def emit(data) -> None:
    sys.stdout.write(json.dumps(data) + "\n")
    sys.stdout.flush()


# ---- eval ---- #

def read_scores(raw: str) -> np.ndarray:
    """
    inline JSON array, or a path to a file holding one.
    """
    text = raw
    if not raw.lstrip().startswith("["):
        try:
            text = Path(raw).read_text(encoding="utf-8")
        except OSError as e:
            raise StorageException(f"cannot read scores file {raw}", at=raw, e=e)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArgumentException(f"scores are not valid JSON: {e}", at="--scores", e=e)
    if not isinstance(data, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in data):
        raise ArgumentException("scores must be a JSON array of numbers", at="--scores")
    return np.asarray(data, dtype=np.float64)


def cmd_eval(args, container: Container) -> int:
    z = read_scores(args.scores)
    if args.stream:
        state = stream_init(args.k)
        for t, value in enumerate(z, start=1):
            sol = stream_push(state, float(value))
            p = np.zeros(t)
            p[sol.positions] = sol.p
            row = sol.to_dict()
            row.pop("positions", None)
            row["p"] = [float(x) for x in p]
            row["t"] = t
            emit(row)
        return 0
    if args.sort_cap is not None:
        sol = sparsek_partial(z, args.k, sort_cap=args.sort_cap)
    else:
        sol = sparsek(z, args.k)
    emit(sol.to_dict())
    return 0


# ---- bench ---- #

def _sizes(raw: Sequence[str]) -> List[int]:
    sizes = []
    for chunk in raw:
        for part in chunk.split(","):
            if part.strip():
                try:
                    sizes.append(int(part))
                except ValueError:
                    raise ArgumentException(f"--n expects integers, got {part!r}", at="--n")
    if not sizes:
        raise ArgumentException("--n needs at least one size", at="--n")
    return sizes


def cmd_bench(args, container: Container) -> int:
    options = container.force_fetch(RunOptions)
    rows = run_bench(args.mode, _sizes(args.n), k=args.k, window=args.window, repeats=args.repeats,
                     seed=options.seed)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fp:
            write_bench_csv(rows, fp)
    else:
        write_bench_csv(rows, sys.stdout)
    return 0


# ---- gradcheck ---- #

def cmd_gradcheck(args, container: Container, jvp: Optional[JvpFn] = None) -> int:
    options = container.force_fetch(RunOptions)
    console = container.force_fetch(Console)
    report = run_gradcheck(args.size_preset, seed=options.seed, jvp=jvp)
    emit(report.to_dict())
    if not report.passed:
        raise CheckFailedException(
            f"gradcheck {report.preset}: max rel err {report.max_rel_err:.3e} >= {report.tolerance:.0e} "
            f"({report.checked} checked, worst {report.worst})",
            at=report.preset,
        )
    console.print(f"[green]gradcheck {report.preset} passed[/green]: max rel err {report.max_rel_err:.3e}, "
                  f"{report.checked} checked, {report.skipped} skipped")
    return 0


# ---- train / generate / passkey ---- #

def build_source(cfg: RunConfig, corpus: Sequence[str] | None = None) -> BatchSource:
    model = cfg.model
    if cfg.task == "text":
        paths = list(corpus or cfg.corpus)
        if not paths:
            raise ConfigException("task text needs --corpus or corpus in the run config")
        source: BatchSource = TextCorpus.from_paths(paths, model.context)
    elif cfg.task == "repeat":
        source = RepeatingCorpus(period=10, vocab=model.vocab)
    elif cfg.task == "recall":
        source = RecallTask()
    elif cfg.task == "passkey":
        source = PasskeyTask(window=model.attn.window)
    else:
        source = UniformCorpus(vocab=model.vocab, seed=model.seed)
    if source.vocab > model.vocab:
        raise ConfigException(f"task {cfg.task} needs vocab >= {source.vocab}, model has {model.vocab}")
    return source


def cmd_train(args, container: Container) -> int:
    cfg = container.force_fetch(RunConfig)
    options = container.force_fetch(RunOptions)
    console = container.force_fetch(Console)
    if args.steps is not None:
        cfg = cfg.copy(update={"hyper": cfg.hyper.copy(update={"steps": args.steps})})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source = build_source(cfg, args.corpus)
    if args.resume:
        state = load_checkpoint_file(args.resume)
        if args.steps is not None:
            state.hyper = state.hyper.copy(update={"steps": args.steps})
    else:
        (out / "config.json").write_text(dump_run_config(cfg))
        state = new_train_state(cfg.model, cfg.hyper)
    state = train(source, out_dir=out, state=state, run=f"{out.name}:seed={options.seed}")
    checkpoint = save_checkpoint_file(state, out / CHECKPOINT_FILE)
    summary: Dict = {
        "steps": state.step,
        "final_loss": state.last_loss,
        "checkpoint": str(checkpoint),
        "metrics": str(out / "metrics.csv"),
    }
    if cfg.eval_corpus:
        held_out = TextCorpus.from_paths(cfg.eval_corpus, cfg.model.context)
        summary["eval_ppl"] = eval_ppl(state.model, held_out)
    emit(summary)
    console.print(f"trained {state.step} steps, final loss {state.last_loss:.4f}")
    return 0


def _save_generation(out: Path, gen: Generation) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for i, cache in enumerate(gen.caches):
        with (out / f"cache_layer{i}.spkc").open("wb") as fp:
            dump_cache(cache, fp)
    (out / GENERATION_META).write_text(json.dumps({"layers": len(gen.caches), "pending": gen.pending}))
    (out / "generation.txt").write_text(gen.text, encoding="utf-8")


def _load_generation(path: Path) -> Generation:
    try:
        meta = json.loads((path / GENERATION_META).read_text())
        caches = []
        for i in range(int(meta["layers"])):
            with (path / f"cache_layer{i}.spkc").open("rb") as fp:
                caches.append(load_cache(fp))
    except (OSError, ValueError, KeyError) as e:
        raise StorageException(f"cannot resume generation from {path}", at=str(path), e=e)
    return Generation(caches=caches, pending=meta["pending"])


def cmd_generate(args, container: Container) -> int:
    options = container.force_fetch(RunOptions)
    state = load_checkpoint_file(args.checkpoint)
    resume = _load_generation(Path(args.resume)) if args.resume else None
    if resume is not None and len(resume.caches) != state.model_cfg.layers:
        raise StorageException(f"snapshot has {len(resume.caches)} layers, model has {state.model_cfg.layers}")
    prompt = args.prompt
    if args.prompt_tokens is not None:
        prompt = [int(x) for x in read_scores(args.prompt_tokens)]
    gen = generate_text(state.model, prompt, args.tokens, temperature=args.temperature,
                        seed=options.seed, resume=resume)
    if args.out:
        _save_generation(Path(args.out), gen)
    emit({"text": gen.text, "tokens": gen.tokens})
    return 0


def cmd_passkey(args, container: Container) -> int:
    options = container.force_fetch(RunOptions)
    state = load_checkpoint_file(args.checkpoint)
    if state.model_cfg.vocab < 256:
        raise ArgumentException(f"passkey texts are bytes, the model vocab is {state.model_cfg.vocab}",
                                at="--checkpoint")
    window = args.window if args.window is not None else state.model_cfg.attn.window
    if window < 1:
        raise ArgumentException("passkey buckets need a window >= 1", at="--window")
    accuracy = passkey_accuracy(state.model, make_rng(options.seed), window, samples=args.samples)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(accuracy, indent=2))
    emit(accuracy)
    return 0


# ---- parser ---- #

COMMANDS: Dict[str, Callable] = {
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "generate": cmd_generate,
    "passkey": cmd_passkey,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsekit", description="SparseK selection, attention and toy training")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None, help="default: $SPARSEK_THREADS or 1")
    parser.add_argument("--precision", choices=("float64", "float32"), default="float64")
    parser.add_argument("--log-config", default=None, help="YAML logging dictConfig")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("eval", help="evaluate SparseK(z, k)")
    p.add_argument("--scores", required=True, help="JSON array or a file holding one")
    p.add_argument("--k", type=float, required=True)
    p.add_argument("--stream", action="store_true", help="per-prefix solutions as JSON lines")
    p.add_argument("--sort-cap", type=int, default=None)

    p = sub.add_parser("bench", help="CPU timings as CSV")
    p.add_argument("--mode", choices=BENCH_MODES, required=True)
    p.add_argument("--n", nargs="+", required=True, help="sizes, space or comma separated")
    p.add_argument("--k", type=float, default=8)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None, help="CSV path, default stdout")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--size-preset", choices=PRESETS, default="op")

    p = sub.add_parser("train", help="train a toy decoder")
    p.add_argument("--config", default=None, help="RunConfig JSON")
    p.add_argument("--corpus", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="SPKT checkpoint to continue")

    p = sub.add_parser("generate", help="decode from a checkpoint with the recurrent cache")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="", help="UTF-8 text, one byte per token")
    p.add_argument("--prompt-tokens", default=None, help="JSON array of token ids, overrides --prompt")
    p.add_argument("--tokens", type=int, default=100)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--out", default=None, help="directory for text and cache snapshots")
    p.add_argument("--resume", default=None, help="directory written by a previous --out")

    p = sub.add_parser("passkey", help="passkey accuracy per distance bucket")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--out", default=None)
    return parser


def main(argv: Sequence[str] | None = None, container: Container | None = None) -> int:
    container = container or Container()
    console = Console(stderr=True)
    try:
        args = build_parser().parse_args(argv)
        boot(
            container,
            bootstrappers=[
                LoggingBootstrapper(args.log_config),
                PrecisionBootstrapper(args.precision),
                ThreadsBootstrapper(args.threads),
                SeedBootstrapper(args.seed),
            ],
            providers=[
                ConsoleProvider(),
                RunConfigProvider(getattr(args, "config", None)),
            ],
        )
        return COMMANDS[args.command](args, container)
    except SparseKException as e:
        console.print(f"[red]{type(e).__name__}[/red]: {e.message}")
        if e.stack_info:
            logger.debug(e.stack_info)
        return e.CODE
    except Exception as e:
        logger.exception(e)
        console.print(f"[red]{type(e).__name__}[/red]: {e}")
        return 2
