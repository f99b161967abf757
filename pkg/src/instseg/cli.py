"""Command-line entry points.

Subcommands cover the full workflow: generate synthetic scenes, train a
decoder, evaluate or run inference from a checkpoint, verify gradients, and
inspect the contrastive loss and self-attention statistics of a model.

Exit codes: 0 on success, 2 for configuration, file, or verification
failures, 3 when training diverges.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import ConfigError, ContractError, NumericsError, ShapeError, Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .checks import run_gradient_suite
from .config import build_configs, load_config_file
from .contrastive import contrastive_from_features, relation_prior
from .decoder import decoder_forward, prepare_scene
from .evaluation import evaluate_scenes, extract_instances, nms
from .scene import ValidationError, load_scene, save_scene, synth_scene, voxelize
from .training import DivergenceError, train


def _collect_values(args):
    values = load_config_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = (part.strip() for part in item.split("=", 1))
        if not key or not val:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key] = val
    return values


def _configs(args):
    return build_configs(_collect_values(args))


def _load_scene_dir(path):
    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"{path}: not a directory of scenes")
    files = sorted(p for p in root.iterdir() if p.suffix in (".json", ".bin"))
    if not files:
        raise ValidationError(f"{path}: holds no .json or .bin scene files")
    return [load_scene(p) for p in files]


def _maybe_voxelize(scenes, voxel_size):
    if voxel_size <= 0:
        return scenes
    return [voxelize(s, voxel_size) for s in scenes]


def _emit(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args):
    synth_cfg, _, _ = _configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suffix = "json" if args.format == "json" else "bin"
    files, points = [], 0
    for index in range(synth_cfg.scene_count):
        scene = synth_scene(synth_cfg, index)
        path = out / f"scene_{index:04d}.{suffix}"
        save_scene(scene, path, fmt=args.format)
        files.append(str(path))
        points += scene.n_points
    _emit({"scenes": files, "format": args.format, "total_points": points})
    return 0


def cmd_train(args):
    _, dec_cfg, tr_cfg = _configs(args)
    scenes = _maybe_voxelize(_load_scene_dir(args.data), tr_cfg.voxel_size)
    val = None
    if args.val_data:
        val = _maybe_voxelize(_load_scene_dir(args.val_data), tr_cfg.voxel_size)
    stream = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout
    try:
        result = train(
            scenes,
            dec_cfg,
            tr_cfg,
            val_scenes=val,
            log_stream=stream,
            eval_every=args.eval_every,
            target_ap25=args.target_ap25,
            target_ap50=args.target_ap50,
        )
    finally:
        if args.log:
            stream.close()
    save_checkpoint(args.out, result.params, dec_cfg)
    summary = {
        "checkpoint": str(args.out),
        "epochs_run": len(result.history),
        "stopped_early_at": result.stopped_epoch,
        "final": result.history[-1],
    }
    if args.log:
        _emit(summary)
    else:
        print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args):
    params, dec_cfg = load_checkpoint(args.checkpoint)
    _, _, tr_cfg = _configs(args)
    scenes = _maybe_voxelize(_load_scene_dir(args.data), tr_cfg.voxel_size)
    report = evaluate_scenes(params, dec_cfg, scenes, tr_cfg.nms_iou, tr_cfg.confidence_floor)
    _emit(report.to_dict())
    return 0


def cmd_infer(args):
    params, dec_cfg = load_checkpoint(args.checkpoint)
    _, _, tr_cfg = _configs(args)
    scene = _maybe_voxelize([load_scene(args.scene)], tr_cfg.voxel_size)[0]
    prep = prepare_scene(scene)
    with no_grad():
        out = decoder_forward(prep, params, dec_cfg)
    instances = nms(
        extract_instances(out.predictions[-1], prep, dec_cfg, tr_cfg.confidence_floor),
        tr_cfg.nms_iou,
    )
    doc = {
        "scene": prep.digest,
        "point_count": scene.n_points,
        "instances": [
            {
                "category": inst.category,
                "confidence": inst.confidence,
                "query_index": inst.query_index,
                "superpoints": np.nonzero(inst.sp_mask)[0].tolist(),
                "points": np.nonzero(inst.point_mask)[0].tolist(),
            }
            for inst in instances
        ],
    }
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2), encoding="utf-8")
        print(f"wrote {len(doc['instances'])} instances to {args.out}")
    else:
        _emit(doc)
    return 0


def cmd_grad_check(args):
    seeds = tuple(int(s) for s in args.seeds.split(","))
    results = run_gradient_suite(seeds=seeds, tol=args.tol, max_probes=args.max_probes)
    failures = 0
    for (name, seed), report in sorted(results.items()):
        status = "ok" if report.passed else "FAIL"
        print(f"{name:18s} seed={seed} max_rel_err={report.max_rel_err:.3e} {status}")
        failures += 0 if report.passed else 1
    print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    return 0 if failures == 0 else 2


def _load_features(path):
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    doc = json.loads(p.read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        doc = doc.get("features")
    arr = np.asarray(doc, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{path}: features must be a 2-D array")
    return arr


def cmd_l_cont(args):
    scene = load_scene(args.scene)
    prior = relation_prior(scene)
    if args.features:
        feats = _load_features(args.features)
        value = contrastive_from_features(Tensor(feats), prior)
        _emit({"l_cont": float(value.data), "superpoints": prior.count})
        return 0
    params, dec_cfg = load_checkpoint(args.checkpoint)
    prep = prepare_scene(scene)
    with no_grad():
        out = decoder_forward(prep, params, dec_cfg)
    taps = [("pooled", out.pooled_features)]
    taps += [(f"refined_{i}", f) for i, f in enumerate(out.refined_features)]
    values = {name: float(contrastive_from_features(f, prior).data) for name, f in taps}
    _emit({"taps": values, "mean": float(np.mean(list(values.values())))})
    return 0


def cmd_attn_stats(args):
    params, dec_cfg = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    prep = prepare_scene(scene)
    with no_grad():
        out = decoder_forward(prep, params, dec_cfg, record_attention=True)
    weights = np.concatenate([w.reshape(-1) for w in out.attention_maps])
    kept = weights[weights > args.exclude_below]
    counts, edges = np.histogram(kept, bins=args.bins, range=(args.exclude_below, 1.0))
    _emit(
        {
            "layers": len(out.attention_maps),
            "heads": dec_cfg.heads,
            "total": int(weights.size),
            "excluded": int(weights.size - kept.size),
            "exclude_below": args.exclude_below,
            "histogram": [
                {"lo": float(edges[i]), "hi": float(edges[i + 1]), "count": int(counts[i])}
                for i in range(len(counts))
            ],
            "mean_kept": float(kept.mean()) if kept.size else 0.0,
        }
    )
    return 0


# -- parser ---------------------------------------------------------------------


def _add_config_options(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")


def build_parser():
    parser = argparse.ArgumentParser(prog="instseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    _add_config_options(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("json", "binary"), default="json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a decoder on a scene directory")
    _add_config_options(p)
    p.add_argument("--data", required=True, help="directory of training scenes")
    p.add_argument("--val-data", help="directory of validation scenes")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="write per-epoch JSON lines here instead of stdout")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--target-ap25", type=float)
    p.add_argument("--target-ap50", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene directory")
    _add_config_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run one scene through a checkpoint")
    _add_config_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", help="write instances JSON here instead of stdout")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-probes", type=int, default=4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("l-cont", help="contrastive loss of stored features or model taps")
    p.add_argument("--scene", required=True, help="scene supplying the relation target")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--features", help=".npy or JSON feature matrix, one row per superpoint")
    src.add_argument("--checkpoint", help="compute from a model's feature taps")
    p.set_defaults(func=cmd_l_cont)

    p = sub.add_parser("attn-stats", help="histogram of query self-attention weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--exclude-below", type=float, default=0.03)
    p.set_defaults(func=cmd_attn_stats)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValidationError, ContractError, ShapeError, NumericsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
