"""Command-line entry point: ``taprestore <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional

import jsonschema

from . import config as C
from .autodiff import NonFiniteError, set_check_finite
from .checkpoint import CheckpointError, file_sha256, load_checkpoint, save_checkpoint
from .degradation import ConfigError, DatasetIOError, build_dataset, load_dataset, manifest_hash
from .objectives import FeatureExtractor
from .backbone.model import RestorationModel

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("taprestore")

PARAMS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["checkpoint", "stage", "total", "trainable", "components"],
    "properties": {
        "checkpoint": {"type": "string"},
        "stage": {"enum": ["pretrain", "tune", "joint"]},
        "total": {"type": "integer", "minimum": 0},
        "trainable": {"type": "integer", "minimum": 0},
        "prompt_formula": {"type": ["integer", "null"]},
        "components": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "required": ["total", "trainable"],
                "properties": {"total": {"type": "integer"}, "trainable": {"type": "integer"}},
            },
        },
    },
}


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_cfg(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    cfg = C.load(args.config, args.profile, overrides)
    set_check_finite(bool(cfg["check_finite"]))
    return cfg


def _data_paths(cfg: dict, args) -> tuple:
    train = Path(getattr(args, "data", None) or cfg["data"]["root"])
    test = Path(getattr(args, "test_data", None) or cfg["data"]["test_root"])
    return train, test


def _run_dir(cfg: dict, args, default: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(cfg["output_root"]) / default


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_data(path: Path):
    if not (path / "manifest.json").is_file():
        raise UsageError(f"no dataset at {path} (missing manifest.json); run `taprestore synth` first")
    return load_dataset(path)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    specs = C.degradation_specs(cfg)
    root = Path(args.out) if args.out else None
    d = cfg["data"]
    splits = ("train", "test") if args.split == "both" else (args.split,)
    for split in splits:
        if root is not None:
            target = root / split if args.split == "both" else root
        else:
            target = Path(d["root"] if split == "train" else d["test_root"])
        count = d["train_per_task"] if split == "train" else d["test_per_task"]
        seed = cfg["seed"] if split == "train" else d["test_seed"]
        build_dataset(target, count, d["size"], seed=seed, specs=specs, tasks=cfg["tasks"])
        print(target / "manifest.json")
    return EXIT_OK


def _train_common(cfg: dict, args):
    from . import training as T

    setup = T.resolve_prompt(args.strategy or cfg["prompt"]["strategy"], args.length, args.rank,
                             default_length=cfg["prompt"]["length"], enhanced_rank=cfg["prompt"]["rank"],
                             key_bias=cfg["prompt"]["key_bias"])
    return T, setup


def cmd_pretrain(args) -> int:
    from . import training as T

    cfg = _load_cfg(args)
    train_path, test_path = _data_paths(cfg, args)
    data = _load_data(train_path)
    tc = C.train_config(cfg, "pretrain")
    if args.epochs:
        tc.epochs = args.epochs
    run_dir = _run_dir(cfg, args, f"{cfg['name']}-pretrain")
    resume = load_checkpoint(_require_file(args.resume, "resume checkpoint")) if args.resume else None
    model = RestorationModel(C.model_config(cfg))
    extractor = FeatureExtractor(cfg["loss"]["perceptual_seed"])
    res = T.pretrain(tc, model, data, C.loss_weights(cfg, "none"), extractor, run_dir=run_dir, resume=resume,
                     header_extra={"config": cfg, "dataset_sha256": manifest_hash(train_path)})
    path = save_checkpoint(res.checkpoint, run_dir / "pretrain.ckpt")
    print(path)
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = _load_cfg(args)
    T, setup = _train_common(cfg, args)
    train_path, test_path = _data_paths(cfg, args)
    tc_stage = "joint" if setup.joint else "tune"
    run_dir = _run_dir(cfg, args, f"{cfg['name']}-{setup.strategy}")
    extra = {"config": cfg, "dataset_sha256": None}
    if setup.strategy == "none":
        raise UsageError("strategy 'none' has no prompts to tune; evaluate the pretrain checkpoint directly")
    if not setup.joint:
        if not args.checkpoint:
            raise UsageError("tune needs --checkpoint <pretrain.ckpt>")
        pre = load_checkpoint(_require_file(args.checkpoint, "pretrain checkpoint"))
    data = _load_data(train_path)
    extra["dataset_sha256"] = manifest_hash(train_path)
    eval_data = _load_data(test_path) if (test_path / "manifest.json").is_file() else None
    tc = C.train_config(cfg, tc_stage)
    if args.epochs:
        tc.epochs = args.epochs
    resume = load_checkpoint(_require_file(args.resume, "resume checkpoint")) if args.resume else None
    weights = C.loss_weights(cfg, setup.strategy)
    graph = C.graph(cfg)
    p = cfg["prompt"]
    if setup.joint:
        model = RestorationModel(C.model_config(cfg))
        extractor = FeatureExtractor(cfg["loss"]["perceptual_seed"])
        res = T.joint_train(tc, model, data, weights, extractor, setup, graph, p["seed"], p["init_std"],
                            run_dir=run_dir, resume=resume, header_extra=extra, eval_data=eval_data)
    else:
        res = T.prompt_tune(tc, pre, data, graph, weights, setup, p["seed"], p["init_std"], run_dir=run_dir,
                            resume=resume, eval_data=eval_data)
        res.checkpoint.header.update(extra)
    path = save_checkpoint(res.checkpoint, run_dir / f"{tc_stage}.ckpt")
    print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .analysis import evaluate, write_report
    from .training import restore

    cfg = _load_cfg(args)
    ck_path = _require_file(args.checkpoint, "checkpoint")
    ckpt = load_checkpoint(ck_path)
    model, bank = restore(ckpt)
    _, test_path = _data_paths(cfg, args)
    data = _load_data(Path(args.data) if args.data else test_path)
    if args.no_prompt:
        bank = None
    rep = evaluate(model, data, bank, args.task, C.config_hash(cfg), file_sha256(ck_path))
    out = Path(args.out) if args.out else ck_path.parent / "eval"
    rp, _ = write_report(rep, out)
    print(rp)
    return EXIT_OK


def _parse_grid(spec: str) -> dict:
    grid = {}
    for part in spec.replace(";", " ").split():
        if "=" not in part:
            raise UsageError(f"bad --grid entry {part!r}; expected key=v1,v2")
        key, vals = part.split("=", 1)
        if key not in ("length", "rank"):
            raise UsageError(f"--grid supports length and rank, got {key!r}")
        try:
            grid[key] = [int(v) for v in vals.split(",") if v]
        except ValueError:
            raise UsageError(f"--grid values for {key} must be integers, got {vals!r}") from None
    return grid


def _run_grid(cfg: dict, args, out: Path) -> Path:
    from . import training as T
    from .analysis import evaluate

    grid = _parse_grid(args.grid)
    pre = load_checkpoint(_require_file(args.checkpoint, "pretrain checkpoint"))
    train_path, test_path = _data_paths(cfg, args)
    data, test = _load_data(train_path), _load_data(test_path)
    strategy = args.strategy or "p_attn"
    rows = []
    for length, rank in itertools.product(grid.get("length", [cfg["prompt"]["length"]]),
                                          grid.get("rank", [cfg["prompt"]["rank"]])):
        setup = T.resolve_prompt(strategy, length, rank, key_bias=cfg["prompt"]["key_bias"])
        tc = C.train_config(cfg, "tune")
        if args.epochs:
            tc.epochs = args.epochs
        p = cfg["prompt"]
        res = T.prompt_tune(tc, pre, data, C.graph(cfg), C.loss_weights(cfg, strategy), setup, p["seed"],
                            p["init_std"])
        model, bank = T.restore(res.checkpoint)
        rep = evaluate(model, test, bank)
        rows.append({"strategy": strategy, "length": length, "rank": rank,
                     "trainable": T.expected_prompt_count(bank),
                     "psnr": repr(rep.average["psnr"]), "ssim": repr(rep.average["ssim"])})
        log.info("grid length=%d rank=%d psnr=%.4f", length, rank, rep.average["psnr"])
    path = out / "grid_summary.csv"
    out.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=("strategy", "length", "rank", "trainable", "psnr", "ssim"),
                            lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    return path


def cmd_analyze(args) -> int:
    from . import analysis as A
    from .training import restore

    cfg = _load_cfg(args)
    ck_path = _require_file(args.checkpoint, "checkpoint")
    out = Path(args.out) if args.out else ck_path.parent / "analysis"
    if args.grid:
        print(_run_grid(cfg, args, out))
        return EXIT_OK
    ckpt = load_checkpoint(ck_path)
    model, bank = restore(ckpt)
    _, test_path = _data_paths(cfg, args)
    data = _load_data(Path(args.data) if args.data else test_path)
    written = []
    if bank is not None and bank.length and len(bank.tasks) >= 2:
        if bank.strategy == "attn":
            written.append(str(A.write_matrix_csv(A.similarity_matrix(bank), bank.tasks,
                                                  out / "similarity.csv")))
        written.append(str(A.write_svd_csv(bank, out / "svd_energy.csv")))
    # attention maps for the first sample of the chosen task, with and without prompts
    task = args.task or data.tasks[0]
    idx = data.indices_for(task)
    if len(idx) == 0:
        raise UsageError(f"task {task!r} is absent from the dataset")
    lq = data.lq[idx[0]]
    written += [str(p) for p in A.export_attention(model, lq, task, args.layer, out, "no_prompt", None)]
    if bank is not None and bank.length:
        cond = "enhanced_prompt" if ckpt.header.get("prompt", {}).get("strategy") == "p_attn_enhanced" else "prompt"
        written += [str(p) for p in A.export_attention(model, lq, task, args.layer, out, cond, bank)]
    written.append(str(A.export_embeddings(model, data, out, bank)))
    for w in written:
        print(w)
    return EXIT_OK


def param_report(ckpt_path) -> dict:
    from .nn import param_count
    from .training import expected_prompt_count, restore

    ckpt = load_checkpoint(ckpt_path)
    model, bank = restore(ckpt)
    stage = ckpt.header["stage"]
    model.requires_grad_(stage in ("pretrain", "joint"))
    comps = {"backbone": {"total": param_count(model), "trainable": param_count(model, True)}}
    formula = None
    if bank is not None:
        bank.requires_grad_(stage in ("tune", "joint"))
        comps["prompts"] = {"total": param_count(bank), "trainable": param_count(bank, True)}
        formula = expected_prompt_count(bank)
    total = sum(c["total"] for c in comps.values())
    trainable = sum(c["trainable"] for c in comps.values())
    return {"checkpoint": str(ckpt_path), "stage": stage, "total": total, "trainable": trainable,
            "prompt_formula": formula, "components": comps}


def cmd_params(args) -> int:
    rep = param_report(_require_file(args.checkpoint, "checkpoint"))
    jsonschema.validate(rep, PARAMS_SCHEMA)
    if args.json:
        _emit(rep)
    else:
        print(f"stage      {rep['stage']}")
        for name, c in rep["components"].items():
            print(f"{name:<10} total {c['total']:>9,d}  trainable {c['trainable']:>9,d}")
        print(f"{'all':<10} total {rep['total']:>9,d}  trainable {rep['trainable']:>9,d}")
        if rep["prompt_formula"] is not None:
            print(f"prompt formula {rep['prompt_formula']:,d}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON merged over the profile defaults")
    common.add_argument("--profile", choices=sorted(C.PROFILES), default="desk")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="taprestore", description="Task-prompted all-in-one weather restoration")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the paired synthetic dataset")
    p.add_argument("--out", help="output directory (default: data.root / data.test_root from config)")
    p.add_argument("--split", choices=("train", "test", "both"), default="both")
    p.set_defaults(func=cmd_synth)

    def train_args(p):
        p.add_argument("--data", help="training dataset root")
        p.add_argument("--test-data", dest="test_data", help="held-out dataset root")
        p.add_argument("--out", help="run directory (default: <output_root>/<name>-<stage>)")
        p.add_argument("--epochs", type=int, help="override the stage's epoch count")
        p.add_argument("--resume", help="continue from an epoch checkpoint")

    p = sub.add_parser("pretrain", parents=[common], help="stage one: train the backbone")
    train_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("tune", parents=[common], help="stage two: train prompts on a frozen backbone")
    train_args(p)
    p.add_argument("--checkpoint", help="pretrain checkpoint")
    p.add_argument("--strategy", choices=C.STRATEGIES)
    p.add_argument("--rank", type=int)
    p.add_argument("--length", type=int)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (default: data.test_root)")
    p.add_argument("--task")
    p.add_argument("--out")
    p.add_argument("--no-prompt", action="store_true", help="ignore the checkpoint's prompts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="similarity, SVD, attention and embedding exports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--test-data", dest="test_data")
    p.add_argument("--task")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--grid", help="prompt sweep, e.g. 'length=4,8,12,16 rank=0,4,8' (needs a pretrain checkpoint)")
    p.add_argument("--strategy", choices=C.STRATEGIES)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("params", parents=[common], help="parameter counts of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)
    return ap


def _thread_limit():
    raw = os.environ.get("TAP_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"TAP_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[list] = None) -> int:
    from .training import BackboneModified, TrainingAborted

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (TrainingAborted, NonFiniteError, BackboneModified, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DatasetIOError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, jsonschema.ValidationError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
