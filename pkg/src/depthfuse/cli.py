"""Command-line entry point: ``depthfuse <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(the failing stage is named on stderr).
"""

from __future__ import annotations

import argparse
import copy
import math
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import Config, ConfigError, load_config, resolve_seed
from .diffusion.models import MLPDenoiser
from .diffusion.training import optimize_embedding
from .diffusion.world import prompt_embedding
from .evaluation import consistency_variance
from .fileio import (FormatError, ensure_dir, file_hash, read_field, read_model, write_json,
                     write_losses, write_model, write_ppm)
from .numerics import OptimizerState, SeededRng
from .pipeline import _STREAM as STREAMS
from .pipeline import (RunManifest, StageError, build_model, decision_values, estimator_from,
                       reference_image, run_pipeline, train_mlp, write_turntable)
from .shapes import ShapeSpec

COMMANDS = ("train-injector", "optimize-code", "distill", "eval", "turntable", "acceptance")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="depthfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def common(sp, out_default="out"):
        sp.add_argument("--config", type=Path, help="key = value config file (defaults if omitted)")
        sp.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
        sp.add_argument("--seed", type=int, help="overrides config and SDS_SANDBOX_SEED")

    sp = sub.add_parser("train-injector", help="pretrain an MLP base and fit its depth injector")
    common(sp)
    sp.add_argument("--shape", help="shape family (default: first in config)")

    sp = sub.add_parser("optimize-code", help="invert the reference image into an embedding")
    common(sp)
    sp.add_argument("--shape")
    sp.add_argument("--model", type=Path, help="MLP checkpoint (analytic model if omitted)")

    sp = sub.add_parser("distill", help="run the full pipeline for every configured shape")
    common(sp)
    sp.add_argument("--mode", choices=("fused", "baseline"))
    sp.add_argument("--model", type=Path, help="MLP checkpoint")

    sp = sub.add_parser("eval", help="consistency report for a field checkpoint")
    sp.add_argument("--field", type=Path, required=True)
    sp.add_argument("--config", type=Path)
    sp.add_argument("--out", type=Path, help="report directory (default: next to the field)")

    sp = sub.add_parser("turntable", help="render turntable frames of a field checkpoint")
    sp.add_argument("--field", type=Path, required=True)
    sp.add_argument("--config", type=Path)
    sp.add_argument("--out", type=Path, default=Path("turntable"))
    sp.add_argument("--frames", type=int)

    sp = sub.add_parser("acceptance", help="canned experiments; per-suite CSV output")
    sp.add_argument("--suite", default="all")
    sp.add_argument("--seeds", type=int, help="seed count for multi-seed suites")
    sp.add_argument("--iterations", type=int, help="override distillation iterations")
    sp.add_argument("--out", type=Path, default=Path("acceptance"))
    return p


def _config(path: Optional[Path]) -> Config:
    return load_config(path) if path is not None else Config()


def _shape(cfg: Config, name: Optional[str]) -> ShapeSpec:
    family = name or cfg.shapes[0]
    try:
        return ShapeSpec(family)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_model(path: Optional[Path]):
    if path is None:
        return None
    try:
        return read_model(path)
    except (OSError, FormatError) as exc:
        raise StageError("model", str(exc)) from None


def cmd_train_injector(args, cfg: Config, seed: int, source: str) -> int:
    spec = _shape(cfg, args.shape)
    out = ensure_dir(args.out)
    manifest = RunManifest("train-injector", cfg.prompt_id, spec.family, "n/a", seed, source,
                           dict(cfg.values), decision_values(cfg, seed))
    manifest.write(out / "manifest.json")
    started = time.perf_counter()
    try:
        model, traces = train_mlp(cfg.prompt_id, cfg.replace(model="mlp-denoiser"), seed)
    except Exception as exc:
        manifest.status, manifest.error = "failed", {"stage": "injector", "message": str(exc)}
        manifest.write(out / "manifest.json")
        raise StageError("injector", str(exc)) from exc
    write_model(out / "model.ckpt", model)
    write_losses(out / "pretrain_losses.csv", traces["pretrain"])
    write_losses(out / "losses.csv", traces["injector"])
    manifest.loss_proxy = traces["injector"]
    manifest.checksums = {b: model.checksum(b) for b in ("theta", "phi", "psi")}
    manifest.hashes = {n: file_hash(out / n) for n in ("model.ckpt", "losses.csv", "pretrain_losses.csv")}
    manifest.wall_clock_s = time.perf_counter() - started
    manifest.status = "complete"
    manifest.write(out / "manifest.json")
    return 0


def cmd_optimize_code(args, cfg: Config, seed: int, source: str) -> int:
    spec = _shape(cfg, args.shape)
    out = ensure_dir(args.out)
    manifest = RunManifest("optimize-code", cfg.prompt_id, spec.family, "n/a", seed, source,
                           dict(cfg.values), decision_values(cfg, seed))
    manifest.write(out / "manifest.json")
    started = time.perf_counter()
    try:
        model, notes = build_model(spec, cfg.prompt_id, cfg, seed, _load_model(args.model))
        x_hat = reference_image(spec, cfg)
        e0 = prompt_embedding(cfg.prompt_id, cfg.embed_dim)
        e_hat, trace = optimize_embedding(model, x_hat, e0, model.schedule,
                                          OptimizerState("adam", lr=cfg.embed_lr), cfg.embed_steps,
                                          SeededRng(seed).spawn(STREAMS["embedding"]), cfg.embed_batch,
                                          (cfg.embed_t_min, cfg.embed_t_max))
    except StageError:
        raise
    except Exception as exc:
        manifest.status, manifest.error = "failed", {"stage": "semantic-code", "message": str(exc)}
        manifest.write(out / "manifest.json")
        raise StageError("semantic-code", str(exc)) from exc
    np.save(out / "embedding.npy", e_hat)
    write_ppm(out / "reference.ppm", x_hat)
    write_losses(out / "losses.csv", trace)
    manifest.loss_proxy = trace
    manifest.hashes = {n: file_hash(out / n) for n in ("embedding.npy", "reference.ppm", "losses.csv")}
    manifest.wall_clock_s = time.perf_counter() - started
    manifest.status = "complete"
    manifest.write(out / "manifest.json")
    return 0


def cmd_distill(args, cfg: Config, seed: int, source: str) -> int:
    model = _load_model(args.model)
    if model is not None and not isinstance(model, MLPDenoiser):
        raise UsageError("--model must be an MLP checkpoint")
    for family in cfg.shapes:
        spec = ShapeSpec(family)
        # adapter tuning writes into the model, so every shape gets a fresh copy
        fresh = copy.deepcopy(model) if model is not None else None
        run_pipeline(cfg.prompt_id, spec, cfg, args.out / family, seed, source, args.mode, model=fresh)
    return 0


def _side_manifest(path: Path, command: str, cfg: Config, extra: dict) -> dict:
    m = {"command": command, "config": dict(cfg.values), "status": "running", **extra}
    write_json(path, m)
    return m


def cmd_eval(args, cfg: Config) -> int:
    out = ensure_dir(args.out if args.out is not None else args.field.parent)
    # the field's own directory already holds the distill manifest
    mpath = out / "eval_manifest.json"
    m = _side_manifest(mpath, "eval", cfg, {"field": str(args.field)})
    try:
        fld = read_field(args.field)
    except (OSError, FormatError) as exc:
        raise StageError("load-field", str(exc)) from None
    try:
        report = consistency_variance(fld, cfg.eval_frames, math.radians(cfg.eval_elevation_deg),
                                      estimator_from(cfg))
    except Exception as exc:
        raise StageError("eval", str(exc)) from exc
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    m.update(status="complete", field_hash=file_hash(args.field),
             hashes={n: file_hash(out / n) for n in ("report.json", "report.csv")})
    write_json(mpath, m)
    print(f"variance {report.variance:.6g} squared turns over {report.frame_count} frames")
    return 0


def cmd_turntable(args, cfg: Config) -> int:
    try:
        fld = read_field(args.field)
    except (OSError, FormatError) as exc:
        raise StageError("load-field", str(exc)) from None
    if args.frames is not None and args.frames < 1:
        raise UsageError("--frames must be >= 1")
    out = ensure_dir(args.out)
    m = _side_manifest(out / "manifest.json", "turntable", cfg,
                       {"field": str(args.field), "frames": args.frames or cfg.eval_frames})
    names = write_turntable(out, fld, cfg, args.frames)
    m.update(status="complete", hashes={n: file_hash(out / n) for n in names})
    write_json(out / "manifest.json", m)
    return 0


def cmd_acceptance(args) -> int:
    from .acceptance import SUITES, run_suites

    names = list(SUITES) if args.suite == "all" else args.suite.split(",")
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {', '.join(unknown)}; choose from {', '.join(SUITES)} or all")
    if args.seeds is not None and args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    results = run_suites(names, args.out, seeds=args.seeds, iterations=args.iterations)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.summary}")
    return 0 if all(r.passed for r in results) else 2


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        if args.command == "acceptance":
            return cmd_acceptance(args)
        cfg = _config(args.config)
        if args.command == "eval":
            return cmd_eval(args, cfg)
        if args.command == "turntable":
            return cmd_turntable(args, cfg)
        seed, source = resolve_seed(args.seed, cfg, dict(os.environ))
        handler = {"train-injector": cmd_train_injector, "optimize-code": cmd_optimize_code,
                   "distill": cmd_distill}[args.command]
        return handler(args, cfg, seed, source)
    except (UsageError, ConfigError) as exc:
        print(f"depthfuse: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"depthfuse: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unexpected is still a runtime failure
        print(f"depthfuse: stage {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
