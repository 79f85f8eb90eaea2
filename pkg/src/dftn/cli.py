"""Command-line entry point.

Every training subcommand writes a config snapshot, a metrics log, and
checkpoints into its --out directory, so any artifact can be traced back
to the exact configuration (and its content hash) that produced it.

Exit codes: 0 success, 1 runtime failure (bad data, missing files,
diverged training), 2 usage errors (argparse's own convention).
"""

import argparse
import json
import os
import sys

import torch

from . import __version__
from .config import _coerce, make_config, parse_config_file, PRESETS
from .counting import count_forward_macs, count_parameters, macs_to_gflops
from .data import ClipDataset
from .dfn import DeformationFlowNetwork
from .errors import DftnError
from .branches import Branch
from .report import EvalReport, emit_report, strategy_rows, summary_rows
from .synthetic import DatasetSpec, generate_dataset
from .training import (
    evaluate_branch,
    evaluate_two_stream,
    extract_flows_to,
    finetune_flow_encoder,
    load_branch,
    load_checkpoint,
    load_dfn,
    load_two_stream,
    train_branch,
    train_dfn,
    train_two_stream,
)
from .warp import load_fields


def _data_root(args):
    root = args.data_root or os.environ.get("DFTN_DATA_ROOT")
    if not root:
        raise DftnError("no dataset root: pass --data-root or set DFTN_DATA_ROOT")
    return root


def _build_config(args, **extra):
    overrides = {}
    if getattr(args, "config", None):
        overrides.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise DftnError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = _coerce(key.strip(), value)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    overrides.update(extra)
    return make_config(args.preset, **overrides)


def _dataset(root, split, cfg, augment, flow_root=None):
    return ClipDataset(root, split, flow_root=flow_root,
                       crop_size=cfg.crop_size, augment=augment)


def cmd_gen_data(args):
    cfg = _build_config(args)
    spec = DatasetSpec(
        num_classes=cfg.num_classes,
        frame_size=cfg.frame_size,
        clip_len=cfg.clip_len,
        clips_per_class={"train": args.train, "val": args.val, "test": args.test},
        seed=cfg.seed,
    )
    manifest = generate_dataset(_data_root(args), spec)
    print(f"wrote {len(manifest['clips'])} clips under {_data_root(args)}")
    return 0


def cmd_train_dfn(args):
    cfg = _build_config(args)
    root = _data_root(args)
    train_ds = _dataset(root, "train", cfg, augment=False)
    val_ds = _dataset(root, "val", cfg, augment=False)
    out = train_dfn(cfg, train_ds, val_ds, args.out, resume=args.resume)
    print(f"best val PSNR {out['best_val_psnr']:.2f} dB -> {args.out}")
    return 0


def cmd_extract_flow(args):
    cfg = _build_config(args)
    root = _data_root(args)
    model = load_dfn(cfg, args.ckpt)
    total = 0
    for split in args.splits.split(","):
        ds = _dataset(root, split, cfg, augment=False)
        total += len(extract_flows_to(model, ds, args.flow_root))
    print(f"wrote {total} field files under {args.flow_root}")
    return 0


def cmd_train_branch(args):
    cfg = _build_config(args)
    root = _data_root(args)
    flow_root = args.flow_root if args.modality == "flow" else None
    train_ds = _dataset(root, "train", cfg, cfg.augment, flow_root)
    val_ds = _dataset(root, "val", cfg, False, flow_root)
    stages = tuple(args.stages.split(","))
    out = train_branch(cfg, args.modality, train_ds, val_ds, args.out,
                       stages=stages, resume=args.resume)
    print(f"best val accuracy {100 * out['best_val_acc']:.2f}% -> {args.out}")
    return 0


def cmd_train_twostream(args):
    mode = "bikd" if args.bikd else args.distill
    cfg = _build_config(args, distill_mode=mode)
    root = _data_root(args)
    train_ds = _dataset(root, "train", cfg, cfg.augment, args.flow_root)
    val_ds = _dataset(root, "val", cfg, False, args.flow_root)
    init = {}
    if args.init_gray:
        init["gray"] = args.init_gray
    if args.init_flow:
        init["flow"] = args.init_flow
    out = train_two_stream(cfg, train_ds, val_ds, args.out,
                           resume=args.resume, init_from=init or None)
    print(f"best val accuracy {100 * out['best_val_acc']:.2f}% -> {args.out}")
    return 0


def cmd_finetune_flow_encoder(args):
    cfg = _build_config(args)
    root = _data_root(args)
    dfn = load_dfn(cfg, args.dfn_ckpt)
    branch, _ = load_branch(args.branch_ckpt, "flow")
    train_ds = _dataset(root, "train", cfg, augment=False)
    val_ds = _dataset(root, "val", cfg, augment=False)
    out = finetune_flow_encoder(cfg, dfn, branch, train_ds, val_ds, args.out,
                                resume=args.resume)
    print(f"best val accuracy {100 * out['best_val_acc']:.2f}% -> {args.out}")
    return 0


def cmd_eval(args):
    state = load_checkpoint(args.ckpt)
    kind = state.get("kind", "")
    from .config import config_from_dict

    cfg = config_from_dict(state["config"])
    root = _data_root(args)
    if kind == "two-stream":
        model, _ = load_two_stream(args.ckpt)
        ds = _dataset(root, args.split, cfg, False, args.flow_root)
        strategies = ("mul_prob", "avg_prob", "avg_fc", "add_res4") if args.strategies == "all" \
            else tuple(args.strategies.split(","))
        scores = evaluate_two_stream(model, ds, strategies=strategies)
    elif kind.startswith("branch-"):
        modality = kind.split("-", 1)[1]
        branch, _ = load_branch(args.ckpt, modality)
        flow_root = args.flow_root if modality == "flow" else None
        ds = _dataset(root, args.split, cfg, False, flow_root)
        scores = {f"acc_{modality}": evaluate_branch(branch, ds)}
    else:
        raise DftnError(f"checkpoint kind {kind!r} is not evaluable")
    record = {
        "split": args.split,
        "config_hash": cfg.content_hash(),
        "seed": cfg.seed,
        "scores": scores,
    }
    if args.out:
        parent = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(parent, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(record, fh, indent=1, sort_keys=True)
    for name in sorted(scores):
        print(f"{name}\t{100 * scores[name]:.2f}")
    return 0


def _load_scores(path):
    with open(path) as fh:
        return json.load(fh)["scores"]


def cmd_report(args):
    none_scores = _load_scores(args.none_eval)
    bikd_scores = _load_scores(args.bikd_eval)
    tables = {"Branch and fusion summary": summary_rows(none_scores, bikd_scores)}
    if args.g2d_eval and args.d2g_eval:
        tables["Fusion strategies and distillation directions"] = strategy_rows(
            none_scores, _load_scores(args.g2d_eval), _load_scores(args.d2g_eval), bikd_scores
        )
    accuracies = {f"none/{k}": v for k, v in none_scores.items()}
    accuracies.update({f"bikd/{k}": v for k, v in bikd_scores.items()})
    meta = json.load(open(args.none_eval))
    report = EvalReport(seed=meta.get("seed", 0), config_hash=meta.get("config_hash", ""),
                        accuracies=accuracies)
    metrics_rows = None
    if args.metrics:
        with open(args.metrics) as fh:
            metrics_rows = [json.loads(line) for line in fh if line.strip()]
    flow_fields = load_fields(args.flows) if args.flows else None
    written = emit_report(report, args.out, tables=tables,
                          metrics_rows=metrics_rows, flow_fields=flow_fields)
    print("\n".join(written))
    return 0


def cmd_count(args):
    cfg = _build_config(args)
    t, c = cfg.clip_len, cfg.crop_size
    branch = Branch("gray", num_classes=cfg.num_classes, base_width=cfg.classifier_width,
                    hidden_size=cfg.hidden_size)
    branch.eval()
    gray_params = count_parameters(branch)
    gray_gflops = macs_to_gflops(
        count_forward_macs(branch, torch.zeros(1, 1, t, c, c))[0]
    )
    flow_branch = Branch("flow", num_classes=cfg.num_classes, base_width=cfg.classifier_width,
                         hidden_size=cfg.hidden_size)
    flow_branch.eval()
    flow_params = count_parameters(flow_branch)
    flow_gflops = macs_to_gflops(
        count_forward_macs(flow_branch, torch.zeros(1, t, 2, c, c))[0]
    )
    dfn = DeformationFlowNetwork(base_width=cfg.dfn_width)
    dfn.eval()
    dfn_params = count_parameters(dfn)
    s = cfg.frame_size
    pair_macs, _ = count_forward_macs(
        dfn, torch.zeros(1, 1, s, s), torch.zeros(1, 1, s, s)
    )
    dfn_gflops = macs_to_gflops(pair_macs * (t - 1))
    print(f"grayscale branch\t{gray_params}\tparams\t{gray_gflops:.2f}\tGFLOPs/clip")
    print(f"flow branch\t{flow_params}\tparams\t{flow_gflops:.2f}\tGFLOPs/clip")
    print(f"flow network\t{dfn_params}\tparams\t{dfn_gflops:.2f}\tGFLOPs/clip")
    return 0


def _add_common(p, with_out=True):
    p.add_argument("--data-root", default=None,
                   help="dataset root (default: $DFTN_DATA_ROOT)")
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--config", default=None, help="key = value overrides file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="single config override; repeatable")
    p.add_argument("--seed", type=int, default=None)
    if with_out:
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--resume", action="store_true",
                       help="continue from --out/last.ckpt if present")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dftn",
        description="Two-stream lip-motion classification on learned deformation flow.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=1,
                        help="torch CPU threads (1 keeps runs deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic clip dataset")
    _add_common(p, with_out=False)
    p.add_argument("--train", type=int, default=50, help="clips per class, train split")
    p.add_argument("--val", type=int, default=10)
    p.add_argument("--test", type=int, default=10)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-dfn", help="self-supervised deformation flow training")
    _add_common(p)
    p.set_defaults(func=cmd_train_dfn)

    p = sub.add_parser("extract-flow", help="precompute per-clip fields to .dfld files")
    _add_common(p, with_out=False)
    p.add_argument("--ckpt", required=True, help="flow-network checkpoint")
    p.add_argument("--flow-root", required=True)
    p.add_argument("--splits", default="train,val,test")
    p.set_defaults(func=cmd_extract_flow)

    p = sub.add_parser("train-branch", help="train one classifier branch")
    _add_common(p)
    p.add_argument("--modality", required=True, choices=("gray", "flow"))
    p.add_argument("--flow-root", default=None)
    p.add_argument("--stages", default="front,back,joint",
                   help="comma list from {front,back,joint}")
    p.set_defaults(func=cmd_train_branch)

    p = sub.add_parser("train-twostream", help="joint two-branch training")
    _add_common(p)
    p.add_argument("--flow-root", required=True)
    p.add_argument("--bikd", action="store_true",
                   help="shorthand for --distill bikd")
    p.add_argument("--distill", default="none", choices=("none", "bikd", "g2d", "d2g"))
    p.add_argument("--strategy", default="mul_prob",
                   choices=("mul_prob", "avg_prob", "avg_fc", "add_res4"),
                   help="fusion reported during validation")
    p.add_argument("--init-gray", default=None, help="branch checkpoint to start from")
    p.add_argument("--init-flow", default=None)
    p.set_defaults(func=cmd_train_twostream)

    p = sub.add_parser("finetune-flow-encoder",
                       help="refine the flow producer under the label loss")
    _add_common(p)
    p.add_argument("--dfn-ckpt", required=True)
    p.add_argument("--branch-ckpt", required=True, help="trained flow-branch checkpoint")
    p.set_defaults(func=cmd_finetune_flow_encoder)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p, with_out=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--flow-root", default=None)
    p.add_argument("--strategies", default="all")
    p.add_argument("--out", default=None, help="write scores as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="emit ablation tables and plots")
    p.add_argument("--out", required=True)
    p.add_argument("--none-eval", required=True, help="eval JSON of the plain run")
    p.add_argument("--bikd-eval", required=True)
    p.add_argument("--g2d-eval", default=None)
    p.add_argument("--d2g-eval", default=None)
    p.add_argument("--metrics", default=None, help="metrics.jsonl to plot")
    p.add_argument("--flows", default=None, help=".dfld file to render as panels")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("count", help="parameter and GFLOP accounting")
    _add_common(p, with_out=False)
    p.set_defaults(func=cmd_count)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except DftnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
