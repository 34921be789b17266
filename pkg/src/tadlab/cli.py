"""Command-line driver: teacher pretraining, distillation arms, sweeps and diagnostics.

Output layout under the output root::

    teacher/<hash>/{model.ckpt, log.csv, config.json}
    <arm>/<seed>/{model.ckpt, log.csv, report.json}
    diagnose/<hash>/{diagnose.json, tail_mass.csv}
    summary.json, summary.csv

The teacher directory name is a hash of everything that determines the
teacher (corpus, model and training config), so different teachers never
collide and a finished teacher is found again without bookkeeping.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from tadlab import metrics
from tadlab.corpus import Corpus, CorpusConfig, eval_windows, generate_corpus, load_tokens, split
from tadlab.divergence import DivergenceConfig
from tadlab.errors import CheckpointError, InvalidConfigError, NumericFailure
from tadlab.schemas import SUMMARY_COLUMNS
from tadlab.model import ModelConfig, init_model, init_student_from_teacher, load_checkpoint, save_checkpoint
from tadlab.trainer import TrainConfig, distill, train_clm

log = logging.getLogger("tadlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
ARM_KEYS = {"name", "loss_mode", "K", "beta", "temperature", "cosine_weight"}


@dataclass(frozen=True)
class Arm:
    name: str
    loss_mode: str
    K: int = 10
    beta: float = 2.0
    temperature: float = 1.0
    cosine_weight: float = 0.0

    def train_config(self, base: TrainConfig, seed: int) -> TrainConfig:
        return base.replace(
            loss_mode=self.loss_mode,
            seed=seed,
            cosine_weight=self.cosine_weight,
            divergence=DivergenceConfig(K=self.K, beta=self.beta, temperature=self.temperature),
        )


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    corpus_file: str | None = None
    teacher_model: ModelConfig = field(default_factory=lambda: ModelConfig(n_layers=4))
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student: ModelConfig = field(default_factory=ModelConfig)
    student_init: str = "teacher"
    distill: TrainConfig = field(default_factory=lambda: TrainConfig(loss_mode="tad"))
    arms: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    diagnose_k_max: int = 20
    eval_windows: int = 64

    def __post_init__(self):
        if not self.arms:
            raise InvalidConfigError("at least one distillation arm is required")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise InvalidConfigError(f"arm names must be unique, got {names}")
        if not self.seeds:
            raise InvalidConfigError("seeds must be non-empty")
        if self.student_init not in ("teacher", "random"):
            raise InvalidConfigError(f"student_init must be 'teacher' or 'random', got {self.student_init!r}")
        if self.student.vocab_size != self.teacher_model.vocab_size:
            raise InvalidConfigError("teacher and student vocab sizes differ")
        if self.corpus_file is None and self.corpus.vocab_size != self.teacher_model.vocab_size:
            raise InvalidConfigError("corpus and model vocab sizes differ")

    def arm(self, name: str) -> Arm:
        for a in self.arms:
            if a.name == name:
                return a
        raise InvalidConfigError(f"unknown arm {name!r}; known: {[a.name for a in self.arms]}")

    def teacher_key(self) -> dict:
        return {
            "corpus": self.corpus.to_dict(),
            "corpus_file": self.corpus_file,
            "model": self.teacher_model.to_dict(),
            "train": self.teacher_train.replace(loss_mode="clm_only").to_dict(),
        }

    def teacher_hash(self) -> str:
        blob = json.dumps(self.teacher_key(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _section(data: dict, key: str) -> dict:
    value = data.get(key) or {}
    if not isinstance(value, dict):
        raise InvalidConfigError(f"config section {key!r} must be a mapping")
    return value


def _arms(data: dict) -> list[Arm]:
    arms = []
    for raw in data.get("arms") or []:
        if not isinstance(raw, dict) or "name" not in raw or "loss_mode" not in raw:
            raise InvalidConfigError(f"each arm needs a name and a loss_mode, got {raw!r}")
        unknown = set(raw) - ARM_KEYS
        if unknown:
            raise InvalidConfigError(f"unknown arm fields: {sorted(unknown)}")
        if raw["loss_mode"] not in ("vanilla_kd", "tad", "rkl"):
            raise InvalidConfigError(f"arm {raw['name']!r}: loss_mode must be vanilla_kd, tad or rkl")
        arms.append(Arm(**raw))
    grid = data.get("grid")
    if grid:
        for K in grid.get("K", [10]):
            for beta in grid.get("beta", [2.0]):
                arms.append(Arm(name=f"tad_K{K}_b{beta:g}", loss_mode="tad", K=int(K), beta=float(beta)))
    return arms


def config_from_dict(data: dict) -> ExperimentConfig:
    known = {"corpus", "corpus_file", "teacher", "student", "student_init", "distill", "arms", "grid",
             "seeds", "output_dir", "diagnose", "eval_windows"}
    unknown = set(data) - known
    if unknown:
        raise InvalidConfigError(f"unknown config sections: {sorted(unknown)}")
    teacher = _section(data, "teacher")
    if set(teacher) - {"model", "train"}:
        raise InvalidConfigError("teacher section takes only 'model' and 'train'")
    diag = _section(data, "diagnose")
    try:
        cfg = ExperimentConfig(
            corpus=CorpusConfig.from_dict(_section(data, "corpus")),
            corpus_file=data.get("corpus_file"),
            teacher_model=ModelConfig.from_dict({"n_layers": 4, **_section(teacher, "model")}),
            teacher_train=TrainConfig.from_dict({**_section(teacher, "train"), "loss_mode": "clm_only"}),
            student=ModelConfig.from_dict(_section(data, "student")),
            student_init=data.get("student_init", "teacher"),
            distill=TrainConfig.from_dict({"loss_mode": "tad", **_section(data, "distill")}),
            arms=_arms(data),
            seeds=[int(s) for s in data.get("seeds", [0])],
            output_dir=str(data.get("output_dir", "runs")),
            diagnose_k_max=int(diag.get("k_max", 20)),
            eval_windows=int(data.get("eval_windows", 64)),
        )
    except TypeError as exc:
        raise InvalidConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


# ---------------------------------------------------------------- helpers


def _output_root(cfg: ExperimentConfig, flag: str | None) -> Path:
    return Path(flag or os.environ.get("TADLAB_OUT") or cfg.output_dir)


def _corpus(cfg: ExperimentConfig) -> tuple[Corpus, Corpus]:
    if cfg.corpus_file is not None:
        path = Path(cfg.corpus_file)
        if not path.is_file():
            raise CheckpointError(f"corpus file not found: {path}")
        corpus = load_tokens(path)
        if corpus.vocab_size != cfg.teacher_model.vocab_size:
            raise InvalidConfigError(f"corpus file vocab {corpus.vocab_size} != model vocab {cfg.teacher_model.vocab_size}")
    else:
        corpus = generate_corpus(cfg.corpus)
    return split(corpus, cfg.corpus.valid_fraction)


def _json_value(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def teacher_dir(cfg: ExperimentConfig, root: Path) -> Path:
    return root / "teacher" / cfg.teacher_hash()


def run_dir(root: Path, arm: str, seed: int) -> Path:
    return root / arm / str(seed)


# ---------------------------------------------------------------- commands


def cmd_train_teacher(cfg: ExperimentConfig, root: Path, force: bool = False) -> Path:
    out = teacher_dir(cfg, root)
    ckpt = out / "model.ckpt"
    if ckpt.exists() and not force:
        raise FileExistsError(f"teacher output {out} already exists (use --force to overwrite)")
    train, valid = _corpus(cfg)
    model = init_model(cfg.teacher_model)
    tcfg = cfg.teacher_train.replace(eval_windows=cfg.eval_windows)
    model, tlog = train_clm(model, train, valid, tcfg)
    save_checkpoint(model, ckpt)
    tlog.to_csv(out / "log.csv")
    _write_json(out / "config.json", {"teacher_hash": cfg.teacher_hash(), **cfg.teacher_key()})
    log.info("teacher written to %s", out)
    return out


def _load_teacher(cfg: ExperimentConfig, root: Path):
    ckpt = teacher_dir(cfg, root) / "model.ckpt"
    if not ckpt.is_file():
        raise CheckpointError(f"teacher checkpoint not found: {ckpt} (run train-teacher first)")
    return load_checkpoint(ckpt)


def _make_student(cfg: ExperimentConfig, teacher, seed: int):
    scfg = cfg.student.replace(seed=seed)
    if cfg.student_init == "teacher":
        return init_student_from_teacher(teacher, scfg)
    return init_model(scfg)


def cmd_distill(cfg: ExperimentConfig, root: Path, arm_name: str, seed: int, force: bool = False,
                teacher=None, data=None) -> dict:
    """Run one (arm, seed); a finished run is read back instead of recomputed."""
    arm = cfg.arm(arm_name)
    out = run_dir(root, arm.name, seed)
    report_path = out / "report.json"
    if report_path.exists() and not force:
        log.info("skipping finished run %s", out)
        return json.loads(report_path.read_text())
    teacher = teacher if teacher is not None else _load_teacher(cfg, root)
    train, valid = data if data is not None else _corpus(cfg)
    student = _make_student(cfg, teacher, seed)
    tcfg = arm.train_config(cfg.distill.replace(eval_windows=cfg.eval_windows), seed)
    student, tlog = distill(teacher, student, train, valid, tcfg)
    save_checkpoint(student, out / "model.ckpt")
    tlog.to_csv(out / "log.csv")
    n_eval = cfg.eval_windows * student.config.context
    kl_curve = metrics.Curve(x=tlog.column("tokens"), y=tlog.column("heldout_kl"))
    reports = [
        metrics.MetricReport("heldout_kl", n_eval, value=_json_value(tlog.records[-1]["heldout_kl"])),
        metrics.MetricReport("heldout_clm", n_eval, value=tlog.records[-1]["heldout_clm"]),
        metrics.MetricReport("heldout_kl_curve", n_eval, curve=kl_curve),
        metrics.MetricReport(
            "distillation_flops",
            tlog.records[-1]["tokens"],
            value=metrics.distillation_flops(teacher.config, student.config, tlog.records[-1]["tokens"], arm.loss_mode),
        ),
    ]
    payload = {
        "arm": arm.name,
        "seed": seed,
        "loss_mode": arm.loss_mode,
        "K": arm.K,
        "beta": arm.beta,
        "teacher_hash": cfg.teacher_hash(),
        "train_config": tcfg.to_dict(),
        "reports": [r.to_dict() for r in reports],
    }
    _write_json(report_path, payload)
    return payload


def _final(payload: dict, name: str):
    for r in payload["reports"]:
        if r["name"] == name:
            return r.get("value")
    return None


def summarize(cfg: ExperimentConfig, root: Path) -> dict:
    """Collect finished runs into one table with per-seed winners."""
    rows = []
    for arm in cfg.arms:
        for seed in cfg.seeds:
            path = run_dir(root, arm.name, seed) / "report.json"
            if not path.is_file():
                continue
            payload = json.loads(path.read_text())
            rows.append({
                "arm": arm.name,
                "loss_mode": arm.loss_mode,
                "K": arm.K,
                "beta": arm.beta,
                "seed": seed,
                "heldout_kl": _final(payload, "heldout_kl"),
                "heldout_clm": _final(payload, "heldout_clm"),
            })
    winners = {}
    for seed in cfg.seeds:
        cands = [r for r in rows if r["seed"] == seed and r["heldout_kl"] is not None]
        if cands:
            # ties go to the arm listed first
            winners[str(seed)] = min(cands, key=lambda r: r["heldout_kl"])["arm"]
    counts = {a.name: sum(1 for w in winners.values() if w == a.name) for a in cfg.arms}
    per_arm = {}
    for arm in cfg.arms:
        kls = [r["heldout_kl"] for r in rows if r["arm"] == arm.name and r["heldout_kl"] is not None]
        if kls:
            per_arm[arm.name] = {
                "n": len(kls),
                "mean_heldout_kl": float(np.mean(kls)),
                "min_heldout_kl": float(min(kls)),
                "max_heldout_kl": float(max(kls)),
            }
    kl_all = [r["heldout_kl"] for r in rows if r["heldout_kl"] is not None]
    summary = {
        "teacher_hash": cfg.teacher_hash(),
        "rows": rows,
        "winners": winners,
        "winner_counts": counts,
        "per_arm": per_arm,
        "min_heldout_kl": float(min(kl_all)) if kl_all else None,
    }
    _write_json(root / "summary.json", summary)
    with (root / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in SUMMARY_COLUMNS])
    return summary


def cmd_sweep(cfg: ExperimentConfig, root: Path, force: bool = False) -> dict:
    teacher = _load_teacher(cfg, root)
    data = _corpus(cfg)
    for seed in cfg.seeds:
        for arm in cfg.arms:
            cmd_distill(cfg, root, arm.name, seed, force=force, teacher=teacher, data=data)
    return summarize(cfg, root)


def cmd_diagnose(cfg: ExperimentConfig, root: Path, checkpoint: str | None = None) -> dict:
    ckpt = Path(checkpoint) if checkpoint else teacher_dir(cfg, root) / "model.ckpt"
    if not ckpt.is_file():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    _, valid = _corpus(cfg)
    batch = eval_windows(valid, model.config.context, cfg.eval_windows)
    p = model.predict_probs(batch.inputs)
    V = model.config.vocab_size
    k_list = list(range(1, min(cfg.diagnose_k_max, V - 1) + 1))
    n = int(batch.targets.size)
    curve = metrics.tail_mass_curve(p, k_list=k_list)
    reports = [
        metrics.MetricReport("tail_mass", n, curve=curve),
        metrics.MetricReport("mismatch_rate", n, value=metrics.mismatch_rate(p, targets=batch.targets)),
        metrics.MetricReport("full_ece", n, value=metrics.full_ece(p, targets=batch.targets), config={"n_bins": 20, "scale": "percent"}),
        metrics.MetricReport("forward_flops_per_million_tokens", 10**6, value=metrics.flop_estimate(model.config, 10**6, "forward")),
        metrics.MetricReport(
            "distillation_flops_per_million_tokens", 10**6,
            value=metrics.distillation_flops(model.config, cfg.student, 10**6, "tad"),
        ),
    ]
    tag = hashlib.sha256(ckpt.read_bytes()).hexdigest()[:16]
    out = root / "diagnose" / tag
    reports[0].write_curve_csv(out / "tail_mass.csv", x_name="K")
    payload = {"checkpoint_sha256": tag, "reports": [r.to_dict() for r in reports]}
    _write_json(out / "diagnose.json", payload)
    return payload


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tadlab", description="Tail-aware distillation experiments on synthetic corpora.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML experiment config")
    common.add_argument("--seed", type=int, action="append", help="run only these seeds (repeatable)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 keeps runs bitwise reproducible)")
    common.add_argument("--out", help="output root (overrides TADLAB_OUT and output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-teacher", parents=[common], help="pretrain the teacher with the CLM loss")
    d = sub.add_parser("distill", parents=[common], help="distill the teacher into students")
    d.add_argument("--arm", action="append", help="arm name (repeatable; default: all arms)")
    sub.add_parser("sweep", parents=[common], help="run every arm and seed, then summarize")
    g = sub.add_parser("diagnose", parents=[common], help="tail mass, mismatch, calibration and FLOPs of a checkpoint")
    g.add_argument("--checkpoint", help="model checkpoint (default: the configured teacher)")
    sub.add_parser("report", parents=[common], help="summarize finished runs")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise InvalidConfigError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        cfg = load_config(args.config)
        if args.seed:
            cfg.seeds = list(args.seed)
            if args.command == "train-teacher":
                s = args.seed[0]
                cfg.teacher_model = cfg.teacher_model.replace(seed=s)
                cfg.teacher_train = cfg.teacher_train.replace(seed=s)
        root = _output_root(cfg, args.out)
        if args.command == "train-teacher":
            result = {"teacher_dir": str(cmd_train_teacher(cfg, root, args.force))}
        elif args.command == "distill":
            teacher = _load_teacher(cfg, root)
            data = _corpus(cfg)
            names = args.arm or [a.name for a in cfg.arms]
            for name in names:
                cfg.arm(name)
            for seed in cfg.seeds:
                for name in names:
                    cmd_distill(cfg, root, name, seed, args.force, teacher=teacher, data=data)
            result = summarize(cfg, root)
        elif args.command == "sweep":
            result = cmd_sweep(cfg, root, args.force)
        elif args.command == "diagnose":
            result = cmd_diagnose(cfg, root, args.checkpoint)
        else:
            result = summarize(cfg, root)
        print(json.dumps(result, sort_keys=True, indent=2))
        return EXIT_OK
    except InvalidConfigError as exc:
        print(f"tadlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"tadlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"tadlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
