"""Command-line interface.

Subcommands: gen-phantoms, train, evaluate, segment, verify, plot-slices.
Every command writes a run manifest (resolved config, source fingerprint,
seed, timestamp) into its output directory before heavy work starts.
Exit codes: 0 success, 1 usage, 2 data error, 3 verification failure.
"""

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, nifti
from .config import (MODALITIES, ModelConfig, PhantomSpec, TrainConfig,
                     asdict, build_train_config, load_config_file)
from .data import (load_case, normalize_case, read_manifest, restore_raw_labels,
                   identity_policy)
from .errors import (CheckpointError, ConfigError, DataError, ProtosegError,
                     VerificationFailure)
from .metrics import evaluate_case, write_report
from .phantom import generate_dataset
from .training import Trainer, load_model, predict_case, foreground_dice


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error[Usage]: {message}", file=sys.stderr)
        sys.exit(1)


def source_fingerprint():
    """Hash of the package's source files, recorded in run manifests."""
    pkg = Path(__file__).parent
    digest = hashlib.sha256()
    for path in sorted(pkg.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def write_run_manifest(out_dir, command, resolved, seed):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "source_fingerprint": source_fingerprint(),
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "resolved_config": resolved,
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def _load_cases(manifest_path, label_policy):
    dirs = read_manifest(manifest_path)
    if not dirs:
        raise DataError(f"manifest {manifest_path} lists no cases")
    cases = []
    for d in dirs:
        try:
            cases.append(load_case(d, label_policy))
        except ProtosegError as exc:
            raise type(exc)(f"{d.name}: {exc}") from exc
    return cases


# -- gen-phantoms -------------------------------------------------------------

def cmd_gen_phantoms(args):
    if any(s % 16 != 0 for s in (args.size,) * 3):
        print(f"warning: size {args.size} not divisible by 16; training will "
              "need a smaller crop", file=sys.stderr)
    spec = PhantomSpec(grid_size=(args.size,) * 3,
                       radii=tuple(args.radii), noise_sigma=args.noise,
                       center_jitter=args.jitter, brain_margin=args.brain_margin,
                       seed=args.seed)
    write_run_manifest(args.out, "gen-phantoms",
                       dataclasses.asdict(spec) | {"count": args.count}, args.seed)
    out_dir, manifest = generate_dataset(args.out, args.count, base_spec=spec,
                                         seed=args.seed)
    print(f"wrote {args.count} cases under {out_dir} (manifest: {manifest})")
    return 0


# -- train --------------------------------------------------------------------

def _train_overrides(args):
    model = {}
    if args.base_channels is not None:
        model["base_channels"] = args.base_channels
    over = {
        "base_lr": args.lr,
        "total_epochs": args.epochs,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "crop": (args.crop,) * 3 if args.crop else None,
        "checkpoint_every": args.checkpoint_every,
    }
    if model:
        over["model"] = model
    return over


def cmd_train(args):
    file_cfg = load_config_file(args.config) if args.config else {}
    cfg = build_train_config(file_cfg, _train_overrides(args))
    out = Path(args.out)
    write_run_manifest(out, "train", asdict(cfg), cfg.seed)

    cases = _load_cases(args.data, "require")
    val_cases = _load_cases(args.val_data, "require") if args.val_data else None
    augment = identity_policy(cfg.crop, cfg.seed) if args.no_augment else None
    trainer = Trainer(cfg, cases, augment=augment, log_path=out / "train_log.jsonl")

    if args.resume:
        trainer.restore(args.resume)
        print(f"resumed from {args.resume} at step {trainer.step}")

    if args.dry_run:
        x, y = trainer._next_batch()
        outputs = trainer.model(x)
        total, breakdown = trainer.compute_losses(outputs, y)
        total.backward()
        print(f"input {tuple(x.shape)}, labels {tuple(y.shape)}")
        print(f"seg_probs {tuple(outputs.seg_probs.shape)}")
        print("deep supervision:",
              [tuple(p.shape) for p in outputs.deep_supervision])
        print("prototype maps:",
              {m: tuple(v.shape) for m, v in (outputs.prototype_maps or {}).items()})
        print("expert maps:",
              [tuple(p.shape) for p in (outputs.expert_maps or [])])
        print("share branches:",
              {k: tuple(v.shape) for k, v in (outputs.share_probs or {}).items()})
        print("loss breakdown:", json.dumps(breakdown.as_dict(), indent=2))
        return 0

    total_steps = args.steps or cfg.total_epochs * trainer.steps_per_epoch
    best = -1.0
    eval_cases = val_cases if val_cases else trainer.cases
    eval_normalized = val_cases is None

    while trainer.step < total_steps:
        breakdown = trainer.train_step()
        step = trainer.step
        if step % 10 == 0 or step == total_steps:
            print(f"step {step}/{total_steps} epoch {trainer.epoch} "
                  f"total={breakdown.total:.4f}")
        epoch_end = step % trainer.steps_per_epoch == 0
        epoch = trainer.epoch
        if epoch_end and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            trainer.save_checkpoint(out / "last.pt")
        if epoch_end and cfg.val_every and epoch % cfg.val_every == 0:
            score = _mean_foreground_dice(trainer, eval_cases, eval_normalized)
            print(f"epoch {epoch}: mean foreground dice {score:.4f}")
            if score > best:
                best = score
                trainer.save_checkpoint(out / "best.pt")
    trainer.save_checkpoint(out / "final.pt")
    score = _mean_foreground_dice(trainer, eval_cases, eval_normalized)
    print(f"final mean foreground dice {score:.4f}; checkpoints in {out}")
    return 0


def _mean_foreground_dice(trainer, cases, already_normalized):
    trainer.model.eval()
    scores = []
    for case in cases:
        c = case if already_normalized else normalize_case(case)
        _, pred = predict_case(trainer.model, c, trainer.cfg.crop,
                               trainer.cfg.tta_enabled)
        scores.append(np.mean(list(foreground_dice(pred, c.labels).values())))
    trainer.model.train()
    return float(np.mean(scores))


# -- evaluate -----------------------------------------------------------------

def cmd_evaluate(args):
    out = Path(args.out)
    if args.identity:
        write_run_manifest(out, "evaluate", {"identity": True}, 0)
        cases = _load_cases(args.data, "require")
        reports = [evaluate_case(c.labels, c.labels, c.spacing, case_id=c.case_id)
                   for c in cases]
        model_cfg = None
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint (or --identity)")
        model, cfg, _ = load_model(args.checkpoint)
        write_run_manifest(out, "evaluate",
                           asdict(cfg) | {"tta": args.tta}, cfg.seed)
        cases = _load_cases(args.data, "require")
        reports = []
        for case in cases:
            c = normalize_case(case)
            _, pred = predict_case(model, c, cfg.crop, args.tta)
            reports.append(evaluate_case(pred, c.labels, c.spacing,
                                         case_id=c.case_id))
    csv_path = write_report(reports, out / "report.csv", out / "report.json")
    for rep in reports:
        for _, region, d, h in rep.rows():
            print(f"{rep.case_id} {region}: dice={d:.4f} hd95={h:.4f}")
    print(f"report written to {csv_path}")
    return 0


# -- segment ------------------------------------------------------------------

def cmd_segment(args):
    out = Path(args.out)
    model, cfg, _ = load_model(args.checkpoint)
    write_run_manifest(out, "segment", asdict(cfg) | {"tta": args.tta}, cfg.seed)
    cases = _load_cases(args.data, "optional")
    for case in cases:
        c = normalize_case(case)
        probs, pred = predict_case(model, c, cfg.crop, args.tta)
        raw = restore_raw_labels(pred)
        path = out / f"{case.case_id}_seg.nii.gz"
        nifti.write(path, raw, case.spacing)
        print(f"{case.case_id}: wrote {path}")
        if args.dump_prototypes:
            _dump_prototypes(model, c, out / f"{case.case_id}_prototypes.json")
    return 0


def _dump_prototypes(model, case, path):
    import torch
    x = torch.from_numpy(case.stacked()).unsqueeze(0)
    # prototypes live at the crop/bottleneck scale; use the central crop
    crop = model.config  # noqa: F841 (config held for future use)
    with torch.no_grad():
        out = model(x)
    payload = {m: {r: v.squeeze(0).tolist() for r, v in regions.items()}
               for m, regions in out.prototypes.items()}
    Path(path).write_text(json.dumps(payload, indent=2))


# -- verify -------------------------------------------------------------------

def cmd_verify(args):
    from .verify import run_suites
    write_run_manifest(args.out, "verify", {"suites": args.suite or "all"},
                       args.seed)
    results = run_suites(args.suite, seed=args.seed)
    failures = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    print(f"{len(results) - len(failures)}/{len(results)} checks passed")
    if failures:
        raise VerificationFailure(
            "failed: " + ", ".join(f"{r.suite}:{r.name}" for r in failures))
    return 0


# -- plot-slices --------------------------------------------------------------

def cmd_plot_slices(args):
    from .plotting import plot_activation_maps, plot_case_slices
    out = Path(args.out)
    write_run_manifest(out, "plot-slices", {"case": str(args.case)}, 0)
    case = load_case(args.case, "optional")
    pred = None
    if args.pred:
        raw, _ = nifti.read(args.pred)
        from .data import remap_labels
        pred = remap_labels(np.rint(np.asarray(raw)).astype(np.int64))
    paths = plot_case_slices(case, out, pred_labels=pred)
    if args.activations:
        if not args.checkpoint:
            raise ConfigError("--activations needs --checkpoint")
        import torch
        model, cfg, _ = load_model(args.checkpoint)
        c = normalize_case(case)
        x = torch.from_numpy(c.stacked()).unsqueeze(0)
        with torch.no_grad():
            outputs = model(x, internals=True)
        paths += plot_activation_maps(case.case_id, outputs.activations, out)
    for p in paths:
        print(f"wrote {p}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser():
    parser = Parser(prog="protoseg",
                    description="Prototype-guided multi-modal tumor segmentation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", help="generate synthetic nested-region cases")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--radii", type=float, nargs=3, default=(5.0, 8.0, 10.5),
                   metavar=("R_ET", "R_TC", "R_WT"))
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--jitter", type=float, default=2.0)
    p.add_argument("--brain-margin", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("train", help="train on a case manifest")
    p.add_argument("--data", required=True, help="manifest of training cases")
    p.add_argument("--val-data", help="manifest of validation cases")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--crop", type=int, help="cubic crop edge (multiple of 16)")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--dry-run", action="store_true",
                   help="one forward+backward, print shapes and losses")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute Dice/HD95 reports")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--identity", action="store_true",
                   help="score ground truth against itself (sanity path)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("segment", help="write predicted label volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--dump-prototypes", action="store_true")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("verify", help="run verification suites")
    p.add_argument("--suite", action="append",
                   choices=["gradients", "oracles", "metrics", "normalization",
                            "determinism"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot-slices", help="mid-slice overlay images")
    p.add_argument("--case", required=True, help="case directory")
    p.add_argument("--pred", help="predicted label volume (raw BraTS values)")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--activations", action="store_true",
                   help="also export per-(modality, region) activation heatmaps")
    p.set_defaults(func=cmd_plot_slices)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except VerificationFailure as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    except ProtosegError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
