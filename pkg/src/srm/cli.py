"""Command-line entry point: ``srm <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or config error, 2 check failure, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import bench, equivalence
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .generation import SamplerSpec, generate
from .model import SrmModel
from .rlvr import GrpoConfig, decode_bytes, pass_at_k
from .tasks import STOP, AdditionTask, encode, run_grpo, warm_start
from .training import train_copy_task

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("srm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config with 'model' and 'train' sections")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", type=Path, help="write a JSON report here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srm", description="Structured Recurrent Mixer tools")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on the copy task")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--log", type=Path, help="append JSON-lines metrics here")

    p = sub.add_parser("generate", help="sample continuations of byte prompts")
    _common(p)
    p.add_argument("--prompt", action="append", default=[])
    p.add_argument("--batch", type=int, default=1, help="samples per prompt")
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--top-p", type=float, default=1.0)

    p = sub.add_parser("bench", help="decode throughput and latency")
    _common(p)
    p.add_argument("--batch", type=int, action="append", help="batch size (repeatable)")
    p.add_argument("--max-new", type=int, default=32, help="timed decode steps")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("check-equivalence", help="parallel vs recurrent logits over a config grid")
    _common(p)
    p.add_argument("--count", type=int, default=100)

    p = sub.add_parser("grpo", help="GRPO with balanced resampling on the addition task")
    _common(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=32, help="training batch after resampling")
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--questions", type=int, default=8, help="questions pooled per step")
    p.add_argument("--sft-steps", type=int, default=300, help="supervised warm start when no checkpoint is given")
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--out", type=Path, help="save the final checkpoint here")

    p = sub.add_parser("passk", help="unbiased pass@k estimate")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--k", type=int, required=True)

    p = sub.add_parser("inspect", help="parameter count, cache bytes, capacity estimate")
    _common(p)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--bytes-per-scalar", type=int, default=4)
    return parser


def _run_config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _model(args) -> SrmModel:
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        return model
    torch.manual_seed(args.seed)
    return SrmModel(_run_config(args).model)


def _write(path: Path | None, payload: dict) -> None:
    if path:
        path.write_text(json.dumps({"schema_version": 1, **payload}, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    run = _run_config(args)
    overrides = {"seed": args.seed}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.batch is not None:
        overrides["batch_size"] = args.batch
    train_cfg = dataclasses.replace(run.train, **overrides)
    model_cfg = run.model
    needed = 2 * train_cfg.copy_len + 1
    if model_cfg.n_ctx < needed:
        raise ConfigError("n_ctx", f"copy task with copy_len={train_cfg.copy_len} needs n_ctx >= {needed}")
    result = train_copy_task(model_cfg, train_cfg, log_path=args.log, checkpoint_path=args.checkpoint)
    last = result.metrics[-1] if result.metrics else {}
    print(f"steps: {train_cfg.steps}")
    print(f"final_loss: {result.final_loss:.6f}")
    if "accuracy" in last:
        print(f"accuracy: {last['accuracy']:.4f}")
    _write(args.report, {"command": "train", "config": RunConfig(model_cfg, train_cfg).to_dict(), "metrics": result.metrics})
    return EXIT_OK


def cmd_generate(args) -> int:
    model = _model(args)
    prompts = [encode(p) for p in (args.prompt or [""]) for _ in range(args.batch)]
    sampler = SamplerSpec(args.temperature, args.top_p)
    result = generate(model, prompts, args.max_new, sampler, seed=args.seed)
    rows = []
    for prompt, out, lps in zip(prompts, result.sequences, result.logprobs):
        text = decode_bytes(out)
        print(json.dumps({"prompt": decode_bytes(prompt), "output": text}))
        rows.append({"prompt": prompt, "tokens": out, "logprobs": lps})
    _write(args.report, {"command": "generate", "samples": rows})
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _model(args)
    sizes = args.batch or [1, 8, 64]
    reports = bench.bench_decode(model, sizes, args.max_new, seed=args.seed, workers=args.workers)
    for r in reports:
        status = r.error or f"{r.tokens_per_second:,.0f} tok/s  p50 {r.latency_p50_ms:.3f} ms  p95 {r.latency_p95_ms:.3f} ms"
        print(f"batch {r.batch_size:>6}  {r.mode:<6}  {status}")
    ceiling = bench.concurrency_ceiling(reports)
    extra = {"command": "bench", "concurrency_ceiling": ceiling}
    if args.report:
        bench.write_report(args.report, reports, extra)
    return EXIT_OK


def cmd_check_equivalence(args) -> int:
    results = equivalence.run_suite(seed=args.seed, count=args.count)
    worst32 = max(r.max_dev_fp32 for r in results)
    worst16 = max(r.max_dev_half for r in results)
    failed = [r for r in results if not r.passed]
    print(f"configs: {len(results)}")
    print(f"max_dev_fp32: {worst32:.3e} (tol {equivalence.FP32_TOL:g})")
    print(f"max_dev_half_cache: {worst16:.3e} (tol {equivalence.HALF_TOL:g})")
    for r in failed:
        print(f"FAIL seed={r.seed} {r.config.to_dict()} fp32={r.max_dev_fp32:.3e} half={r.max_dev_half:.3e}")
    _write(
        args.report,
        {
            "command": "check-equivalence",
            "max_dev_fp32": worst32,
            "max_dev_half": worst16,
            "results": [
                {"seed": r.seed, "config": r.config.to_dict(), "n": r.n, "fp32": r.max_dev_fp32, "half": r.max_dev_half}
                for r in results
            ],
        },
    )
    return EXIT_CHECK if failed else EXIT_OK


def cmd_grpo(args) -> int:
    task = AdditionTask()
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    else:
        model = warm_start(task, args.sft_steps, args.seed)
    cfg = GrpoConfig(
        group_size=args.group_size, batch_size=args.batch, max_new=4, lr=args.lr, weight_decay=0.0,
        temperature=args.temperature, top_p=args.top_p, total_steps=args.steps, seed=args.seed, stop_id=STOP,
    )

    def show(info) -> None:
        if info.step % 10 == 0 or info.step == args.steps - 1:
            print(f"step {info.step:4d}  reward {info.mean_reward:.3f}  pass@{cfg.pass_k} {info.pass_at_k:.3f}  kl {info.mean_kl:.4f}")

    history = run_grpo(model, task, cfg, questions_per_step=args.questions, on_step=show)
    if args.out:
        save_checkpoint(args.out, model)
    _write(args.report, {"command": "grpo", "history": [h.as_dict() for h in history]})
    return EXIT_OK


def cmd_passk(args) -> int:
    try:
        value = pass_at_k(args.n, args.c, args.k)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{value:.6f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        config = model.config
        n_params = model.num_parameters()
    else:
        config = _run_config(args).model
        n_params = SrmModel(config).num_parameters()
    foot = bench.cache_bytes(config, args.batch, args.bytes_per_scalar)
    per_sample = bench.cache_bytes(config, 1, args.bytes_per_scalar)
    capacity = bench.compression_capacity(config.d_model, 2, 0.5, 14.8)
    info = {
        "parameters": n_params,
        "cache_scalars_per_sample": foot.scalars_per_sample,
        "cache_bytes_per_sample": per_sample.srm_bytes,
        "cache_bytes_batch": foot.srm_bytes,
        "attention_cache_bytes_batch": foot.attention_bytes,
        "compression_capacity_tokens": capacity,
    }
    for k, v in info.items():
        print(f"{k}: {v}")
    _write(args.report, {"command": "inspect", "config": config.to_dict(), **info})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "bench": cmd_bench,
    "check-equivalence": cmd_check_equivalence,
    "grpo": cmd_grpo,
    "passk": cmd_passk,
    "inspect": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"srm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"srm {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
