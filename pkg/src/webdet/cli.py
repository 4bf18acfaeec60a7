"""Command-line entry point: gen, train, eval, ablate, embed.

Every command writes a manifest.json with the resolved configuration, seed,
and input hashes, enough to reproduce its outputs bitwise. Exit codes:
0 success, 2 configuration or data error, 3 overwrite refusal, 4 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bags import TARGET, WEB, load_bags, save_bags
from .boxes import iou_matrix
from .configio import load_config
from .datagen import GenConfig, generate
from .errors import (CheckpointError, ConfigError, DataFormatError, InputError,
                     TrainingError, WebdetError)
from .metrics import evaluate, export_embedding
from .model import feature_forward
from .trainer import (MODE_ISOLATED, TrainConfig, load_checkpoint,
                      save_checkpoint, train, train_isolated,
                      train_state_extra, train_with_checkpoints)
from .wsd import forward_wsd

ABLATION_VARIANTS: list[tuple[str, dict]] = [
    ("WSD", {"enable_da": False, "st_streams": 0}),
    ("WSD+DA", {"enable_da": True, "st_streams": 0}),
    ("WSD+3ST", {"enable_da": False, "st_streams": 3}),
    ("WSD+DA(w/o.FA)+3ST", {"enable_da": True, "enable_fa": False, "st_streams": 3}),
    ("WSD+DA+ST", {"enable_da": True, "st_streams": 1}),
    ("WSD+DA+2ST", {"enable_da": True, "st_streams": 2}),
    ("WSD+DA+3ST", {"enable_da": True, "st_streams": 3}),
]


class _OverwriteRefusal(WebdetError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _prepare_out(out: Path, filenames: list[str], force: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    existing = [name for name in filenames if (out / name).exists()]
    if existing and not force:
        raise _OverwriteRefusal(
            f"refusing to overwrite {', '.join(existing)} in {out} (use --force)")


def _write_manifest(out: Path, command: str, config, seed, inputs: dict[str, str],
                    outputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": dataclasses.asdict(config) if dataclasses.is_dataclass(config) else config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_data_dir(data_dir: Path):
    web_path = data_dir / "web.bags"
    target_path = data_dir / "target.bags"
    for p in (web_path, target_path):
        if not p.exists():
            raise ConfigError(f"missing dataset file {p}")
    return load_bags(web_path), load_bags(target_path), {
        "web.bags": _sha256(web_path), "target.bags": _sha256(target_path)}


def _gen_config(args) -> GenConfig:
    if args.config:
        cfg = load_config(GenConfig, args.config)
    else:
        cfg = GenConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def cmd_gen(args) -> int:
    cfg = _gen_config(args)
    out = Path(args.out)
    outputs = ["web.bags", "target.bags"]
    _prepare_out(out, outputs, args.force)
    web, target = generate(cfg, threads=args.threads)
    save_bags(out / "web.bags", web)
    save_bags(out / "target.bags", target)
    _write_manifest(out, "gen", cfg, cfg.seed,
                    inputs={"config": args.config or "<defaults>"},
                    outputs=outputs,
                    extra={"n_web": len(web), "n_target": len(target)})
    print(f"wrote {len(web)} web bags and {len(target)} target bags to {out}")
    return 0


def _train_config(args) -> TrainConfig:
    if args.config:
        cfg = load_config(TrainConfig, args.config)
    else:
        cfg = TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    outputs = ["checkpoint.json", "metrics.csv"]
    if not args.resume:
        _prepare_out(out, outputs, args.force)
    else:
        out.mkdir(parents=True, exist_ok=True)
    web, target, hashes = _load_data_dir(Path(args.data))

    if cfg.mode == MODE_ISOLATED:
        if args.resume:
            raise ConfigError("--resume is not supported in isolated mode")
        params, history = train_isolated(web, target, cfg)
        save_checkpoint(out / "checkpoint.json", params, cfg,
                        extra=train_state_extra(cfg, cfg.epochs, 0))
        history.write_csv(out / "metrics.csv")
        pipeline = "isolated"
    else:
        resume = bool(args.resume) and (out / "checkpoint.json").exists()
        params, history = train_with_checkpoints(web, target, cfg,
                                                 out / "checkpoint.json", resume=resume)
        history.write_csv(out / "metrics.csv", append=resume)
        pipeline = "simultaneous"

    _write_manifest(out, "train", cfg, cfg.seed,
                    inputs={"config": args.config or "<defaults>", **hashes},
                    outputs=outputs,
                    extra={"pipeline": pipeline, "resumed": bool(args.resume)})
    final = history.rows[-1] if history.rows else None
    if final is not None:
        print(f"finished at epoch {final.epoch}: map={final.map:.4f} corloc={final.corloc:.4f}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    outputs = ["report.csv", "report.json"]
    _prepare_out(out, outputs, args.force)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}")
    params, cfg, _ = load_checkpoint(ckpt)
    _, target, hashes = _load_data_dir(Path(args.data))
    report = evaluate(params, target, nms_thresh=cfg.nms_thresh, threads=args.threads)
    report.write_csv(out / "report.csv")
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    _write_manifest(out, "eval", cfg, cfg.seed,
                    inputs={"checkpoint": str(ckpt), **hashes},
                    outputs=outputs)
    print(f"map={report.map:.4f} corloc={report.corloc:.4f} "
          f"(scores from {report.metadata['score_source']})")
    return 0


def cmd_ablate(args) -> int:
    base = _train_config(args)
    out = Path(args.out)
    outputs = ["ablation.csv"]
    _prepare_out(out, outputs, args.force)
    web, target, hashes = _load_data_dir(Path(args.data))
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise ConfigError("ablate needs at least one seed")

    wanted = None
    if args.variants:
        wanted = {v.strip() for v in args.variants.split(",")}
        known = {name for name, _ in ABLATION_VARIANTS}
        unknown = wanted - known
        if unknown:
            raise ConfigError(f"unknown variant(s): {', '.join(sorted(unknown))}")

    rows: list[tuple[str, str, float, float]] = []
    for name, changes in ABLATION_VARIANTS:
        if wanted is not None and name not in wanted:
            continue
        maps, corlocs = [], []
        for seed in seeds:
            cfg = dataclasses.replace(base, seed=seed, **changes)
            _, history = train(web, target, cfg)
            last = history.rows[-1]
            rows.append((name, str(seed), last.map, last.corloc))
            maps.append(last.map)
            corlocs.append(last.corloc)
        rows.append((name, "mean", float(np.mean(maps)), float(np.mean(corlocs))))

    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("variant,seed,map,corloc\n")
        for name, seed, m, c in rows:
            fh.write(f"{name},{seed},{m!r},{c!r}\n")
    _write_manifest(out, "ablate", base, seeds, inputs={**hashes}, outputs=outputs,
                    extra={"variants": [n for n, _ in ABLATION_VARIANTS
                                        if wanted is None or n in wanted]})
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
    return 0


def cmd_embed(args) -> int:
    out = Path(args.out)
    outputs = ["embedding.csv"]
    _prepare_out(out, outputs, args.force)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}")
    params, cfg, _ = load_checkpoint(ckpt)
    web, target, hashes = _load_data_dir(Path(args.data))

    feats_rows = []
    labels = []
    for bag in web + target:
        bundle = forward_wsd(bag.feats, params)
        transformed = feature_forward(bag.feats, params).data
        order = np.argsort(bundle.fg.data.reshape(-1))[::-1][:2]
        for i in order:
            if bag.domain == WEB:
                cls = int(np.asarray(bag.weak_label).argmax())
            else:
                gt_arr = np.stack([b for _, b in bag.gt_boxes])
                ious = iou_matrix(bag.boxes[i:i + 1], gt_arr)[0]
                if ious.max() < 0.5:
                    continue
                cls = bag.gt_boxes[int(ious.argmax())][0]
            feats_rows.append(transformed[i])
            labels.append((str(cls), bag.domain))
    if len(feats_rows) < 2:
        raise InputError("not enough foreground proposals to embed")

    rng = np.random.default_rng(args.seed if args.seed is not None else cfg.seed)
    take = min(args.samples, len(feats_rows))
    chosen = sorted(rng.choice(len(feats_rows), size=take, replace=False))
    export_embedding(np.stack([feats_rows[i] for i in chosen]),
                     [labels[i] for i in chosen], out / "embedding.csv")
    _write_manifest(out, "embed", cfg, args.seed if args.seed is not None else cfg.seed,
                    inputs={"checkpoint": str(ckpt), **hashes},
                    outputs=outputs, extra={"samples": take})
    print(f"wrote {take} embedding rows to {out / 'embedding.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="webdet",
                                     description="transfer detection experiments on proposal bags")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic two-domain dataset")
    p.add_argument("--config", help="genconfig file (key=value lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--config", help="traincfg file (key=value lines)")
    p.add_argument("--data", required=True, help="directory with web.bags and target.bags")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.add_argument("--resume", action="store_true",
                   help="continue from checkpoint.json in the output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on target bags")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the stream-combination comparison table")
    p.add_argument("--config", help="base traincfg file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", help="comma-separated subset of variant names")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("embed", help="export a 2-D PCA embedding of foreground features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_embed)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _OverwriteRefusal as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrainingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, DataFormatError, InputError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
