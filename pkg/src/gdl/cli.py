"""``gdl`` command line: train, distil, sample, evaluate and reproduce.

Exit status 0 on success, 1 on configuration or validation errors, 2 on
runtime failures. Diagnostics go to stderr; stdout only carries the paths of
written artifacts.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import Optional

import numpy as np

from . import experiments as ex
from .config import ConfigError, RunConfig, load_config
from .experts import ExpertBank
from .io import FormatError, load_bank, load_dataset, load_network, save_bank, save_dataset, save_network
from .networks import EpsilonModel
from .samplers import GuidanceSpec, SamplerConfig, sample
from .training import TrainingDiverged, train_experts_data_free, train_experts_supervised

log = logging.getLogger("gdl")

GUIDANCE_CHOICES = ("none", "naive", "single", "multi", "x0hat", "tcond")
_GUIDANCE_MODES = {"none": "none", "naive": "naive_off_the_shelf", "single": "single_noise_aware",
                   "multi": "multi_expert", "x0hat": "gradients_on_x0hat", "tcond": "t_conditioned"}


class UsageError(Exception):
    """Bad command-line usage; reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def _out_dir(args, cfg: RunConfig) -> str:
    path = cfg.output_dir(args.out)
    os.makedirs(path, exist_ok=True)
    return path


def _artifact(args, cfg: RunConfig, flag_value: Optional[str], default_name: str) -> str:
    return flag_value or os.path.join(cfg.output_dir(args.out), default_name)


def _emit(path: str) -> None:
    print(path)


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def _load_eps(path: str) -> EpsilonModel:
    net, _ = load_network(path, "diffusion")
    return EpsilonModel(net.spec, net)


def _write_curve(path: str, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])


def _write_trace(path: str, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "expert", "confidence", "grad_norm"])
        for r in trace:
            w.writerow([r.t, "" if r.expert is None else r.expert,
                        "" if np.isnan(r.confidence) else repr(r.confidence), repr(r.grad_norm)])


# ---------------------------------------------------------------- subcommands


def cmd_train_diffusion(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    seed = _seed(args, cfg)
    model, curve = ex.train_diffusion(cfg, ex.build_schedule(cfg), seed)
    ckpt = os.path.join(out, "diffusion.gdl")
    save_network(ckpt, model.net, "diffusion", {"seed": seed, "schedule": cfg.to_dict()["schedule"]})
    _write_curve(os.path.join(out, "diffusion_loss.csv"), curve)
    _emit(ckpt)
    return 0


def cmd_train_teacher(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    seed = _seed(args, cfg)
    loss_kind = args.loss or cfg.guidance_net.loss_kind
    net = ex.train_guidance_teacher(cfg, seed, loss_kind)
    ckpt = os.path.join(out, "teacher.gdl")
    save_network(ckpt, net, "teacher", {"seed": seed, "loss_kind": loss_kind})
    _emit(ckpt)
    return 0


def cmd_gen_dataset(args, cfg: RunConfig) -> int:
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    out = _out_dir(args, cfg)
    seed = _seed(args, cfg)
    model = _load_eps(_artifact(args, cfg, args.diffusion, "diffusion.gdl"))
    x = ex.kt_dataset(cfg, ex.build_schedule(cfg), model, seed, args.count)
    path = os.path.join(out, "kt_dataset.gdl")
    save_dataset(path, x, meta={"seed": seed, "source": "diffusion"})
    _emit(path)
    return 0


def cmd_train_experts(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    seed = _seed(args, cfg)
    n = args.experts or cfg.experts.count
    sched = ex.build_schedule(cfg)
    teacher, tmeta = load_network(_artifact(args, cfg, args.teacher, "teacher.gdl"), "teacher")
    loss_kind = tmeta.get("loss_kind", "class_nll")
    e = cfg.experts
    train = ex.with_seed(e.train, seed, loss_kind=loss_kind, expert_count=n)
    if args.tcond:
        if args.mode != "supervised":
            raise ConfigError("--tcond experts are trained with --mode supervised")
        teacher = teacher.with_time_embedding(cfg.guidance_net.time_embed_dim)
    if args.mode == "data-free":
        bank = ExpertBank(teacher, n, sched.T, rank=e.rank, alpha=e.alpha, seed=seed)
        x, _, _ = load_dataset(_artifact(args, cfg, args.dataset, "kt_dataset.gdl"))
        if len(x) == 0:
            raise ConfigError("transfer dataset is empty")
        train_experts_data_free(sched, bank, x, train)
    else:
        rank = None if args.rank == "full" else e.rank
        bank = ExpertBank(teacher, n, sched.T, rank=rank, alpha=e.alpha, seed=seed)
        x, y = ex.teacher_data(cfg, seed)
        train_experts_supervised(sched, bank, x, ex.clean_targets(cfg, x, y, loss_kind), train)
    path = os.path.join(out, "experts.gdl")
    save_bank(path, bank, {"mode": args.mode, "loss_kind": loss_kind, "seed": seed, "tcond": bool(args.tcond)})
    _emit(path)
    return 0


def _guidance_bank(args, cfg: RunConfig):
    if args.guidance == "none":
        return None, "class_nll"
    if args.guidance in ("naive", "x0hat"):
        net, meta = load_network(_artifact(args, cfg, args.teacher, "teacher.gdl"), "teacher")
        return ExpertBank(net, 1, cfg.schedule.T), meta.get("loss_kind", "class_nll")
    bank, meta = load_bank(_artifact(args, cfg, args.experts, "experts.gdl"))
    if bank.T != cfg.schedule.T:
        raise ConfigError(f"expert bank was trained for T={bank.T}, config has T={cfg.schedule.T}")
    return bank, meta.get("loss_kind", "class_nll")


def cmd_sample(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    seed = cfg.sampler.seed if args.seed is None else args.seed
    sched = ex.build_schedule(cfg)
    model = _load_eps(_artifact(args, cfg, args.diffusion, "diffusion.gdl"))
    bank, loss_kind = _guidance_bank(args, cfg)
    g = cfg.guidance
    target_index = g.target if args.target is None else args.target
    if not 0 <= target_index < cfg.task.K:
        raise ConfigError(f"--target must lie in [0, {cfg.task.K})")
    mode = _GUIDANCE_MODES[args.guidance]
    target = None
    if mode != "none":
        target = g.target_vector if (g.target_vector is not None and loss_kind != "class_nll") \
            else ex.guidance_target(cfg, loss_kind, target_index)
    scale = g.scale if args.scale is None else args.scale
    try:
        spec = GuidanceSpec(mode, loss_kind, target, scale, g.grad_scaling, g.rho)
        run = SamplerConfig(cfg.sampler.kind, cfg.sampler.steps, cfg.sampler.eta, seed)
        count = args.count or cfg.metrics.samples_per_target
        res = sample(sched, model, bank, spec, run, count, model.spec.input_dim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    path = os.path.join(out, "samples.gdl")
    save_dataset(path, res.x0, meta={"guidance": args.guidance, "mode": mode, "loss_kind": loss_kind,
                                     "target": target_index, "scale": scale, "seed": seed,
                                     "sampler": cfg.to_dict()["sampler"]})
    _write_trace(os.path.join(out, "trace.csv"), res.trace)
    _emit(path)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    x, _, header = load_dataset(args.samples)
    if len(x) == 0:
        raise ConfigError("no samples to evaluate")
    meta = header.get("meta", {})
    target = int(meta.get("target", cfg.guidance.target)) if args.target is None else args.target
    if not 0 <= target < cfg.task.K:
        raise ConfigError(f"target must lie in [0, {cfg.task.K})")
    task = ex.build_task(cfg)
    if x.shape[1] != 2:
        raise ConfigError("samples must be two-dimensional GMM points")
    rep = ex.evaluate_class_samples(task, {target: x}, metadata={"samples": os.path.abspath(args.samples),
                                                                  "target": target, **meta})
    path = os.path.join(out, "report.json")
    rep.save(path)
    _emit(path)
    return 0


def cmd_reproduce(args, cfg: RunConfig) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    out = _out_dir(args, cfg)
    base = _seed(args, cfg)
    sched = ex.build_schedule(cfg)
    if args.diffusion:
        model = _load_eps(args.diffusion)
    else:
        log.info("training the noise model")
        model, _ = ex.train_diffusion(cfg, sched, base)
    seeds = [base + i for i in range(args.seeds)]
    res = ex.run_pipeline(args.experiment, cfg, sched, model, seeds, log=log.info, out_dir=out)
    _emit(res.save(out, cfg))
    return 0


COMMANDS = {"train-diffusion": cmd_train_diffusion, "train-teacher": cmd_train_teacher,
            "gen-dataset": cmd_gen_dataset, "train-experts": cmd_train_experts, "sample": cmd_sample,
            "evaluate": cmd_evaluate, "reproduce": cmd_reproduce}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gdl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="strict JSON run config (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", help="output directory (else config out_dir, $GDL_OUT, then .)")
        return sp

    common("train-diffusion", "train the noise model")
    sp = common("train-teacher", "train the off-the-shelf guidance network on clean data")
    sp.add_argument("--loss", choices=("class_nll", "regression_l1", "dense_l1"))
    sp = common("gen-dataset", "sample an unlabeled transfer dataset from the noise model")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--diffusion", help="noise model checkpoint (default OUT/diffusion.gdl)")
    sp = common("train-experts", "fine-tune timestep experts from the teacher")
    sp.add_argument("--mode", choices=("supervised", "data-free"), default="data-free")
    sp.add_argument("--experts", type=int, help="number of experts (default from config)")
    sp.add_argument("--rank", choices=("config", "full"), default="config",
                    help="supervised adapters: config rank or a full dense delta")
    sp.add_argument("--tcond", action="store_true", help="timestep-conditioned backbone (supervised)")
    sp.add_argument("--teacher", help="teacher checkpoint (default OUT/teacher.gdl)")
    sp.add_argument("--dataset", help="transfer dataset (default OUT/kt_dataset.gdl)")
    sp = common("sample", "draw guided or unguided samples")
    sp.add_argument("--guidance", choices=GUIDANCE_CHOICES, default="multi")
    sp.add_argument("--scale", type=float)
    sp.add_argument("--target", type=int, help="target component index")
    sp.add_argument("--count", type=int, help="number of samples")
    sp.add_argument("--diffusion", help="noise model checkpoint (default OUT/diffusion.gdl)")
    sp.add_argument("--teacher", help="teacher checkpoint for naive/x0hat (default OUT/teacher.gdl)")
    sp.add_argument("--experts", help="expert bank for single/multi/tcond (default OUT/experts.gdl)")
    sp = common("evaluate", "score a samples file against its target component")
    sp.add_argument("--samples", required=True)
    sp.add_argument("--target", type=int)
    sp = common("reproduce", "run a scripted reproduction pipeline")
    sp.add_argument("--experiment", choices=ex.PIPELINES, required=True)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--diffusion", help="reuse a trained noise model instead of training one")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig().validate()
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing input {exc.filename}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
