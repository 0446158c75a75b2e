"""Command-line front end: gen-data, train, eval, bench, inspect.

One JSON document configures everything; any flag wins over the file. All
randomness flows through the single seed, so rerunning a command with the
same config and seed reproduces every output byte for byte (timing columns
in the benchmark CSV excepted, as wall time is measured, not derived).

Exit codes: 0 success, 1 runtime or numeric failure, 2 missing input,
3 malformed input file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import (
    SyntheticSpec,
    load_dataset,
    read_annotations,
    read_features,
    write_dataset,
)
from .detection import read_predictions, write_predictions, zoom_in_detect
from .errors import FormatError, ParseError
from .evaluation import bench_report, make_report, write_bench_csv
from .model import (
    CHECKPOINT_MAGIC,
    GroundingModel,
    ModelConfig,
    apply_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .training import Sample, TrainConfig, TrainingDiverged, train_loop, write_loss_log


@dataclass
class RunConfig:
    """Every knob of the pipeline; the zero-argument instance is a valid run."""

    # data
    video_len: int = 128
    feature_dim: int = 32
    vocab_size: int = 64
    snr_range: tuple[float, float] = (0.1, 0.3)
    noise_scale: float = 1.0
    pattern_strength: float = 3.0
    query_len: int = 6
    sample_count: int = 512
    # model
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    cross_layers: int = 4
    anchor_scales: tuple[int, ...] = (4, 8, 16, 32)
    window_radii: tuple[int, ...] | None = None
    schedule_type: str = "decrease"
    max_video_len: int = 128
    max_text_len: int = 32
    # training
    steps: int = 1200
    batch_size: int = 4
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    top_n: int = 16
    n_pos: int = 4
    mu: float = 1e-3
    lam: float = 0.1
    iou_threshold: float = 0.5
    # evaluation
    recall_n: tuple[int, ...] = (1, 5)
    recall_m: tuple[float, ...] = (0.5, 0.7)
    bucket_edges: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    # benchmark
    bench_t: tuple[int, ...] = (200, 600)
    bench_text_len: int = 20
    bench_radii: tuple[int, ...] = (4, 8, 16)
    bench_repeats: int = 20
    # shared
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        cfg = cls(**doc)
        for f in dataclasses.fields(cls):
            v = getattr(cfg, f.name)
            if isinstance(v, list):
                setattr(cfg, f.name, tuple(v))
        return cfg

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            heads=self.heads,
            enc_layers=self.enc_layers,
            cross_layers=self.cross_layers,
            anchor_scales=tuple(self.anchor_scales),
            window_radii=None if self.window_radii is None else tuple(self.window_radii),
            schedule_type=self.schedule_type,
            vocab_size=self.vocab_size,
            feature_dim=self.feature_dim,
            max_video_len=self.max_video_len,
            max_text_len=self.max_text_len,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            video_len=self.video_len,
            feature_dim=self.feature_dim,
            vocab_size=self.vocab_size,
            snr_range=tuple(self.snr_range),
            noise_scale=self.noise_scale,
            pattern_strength=self.pattern_strength,
            query_len=self.query_len,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            top_n=self.top_n,
            n_pos=self.n_pos,
            mu=self.mu,
            lam=self.lam,
            iou_threshold=self.iou_threshold,
            seed=self.seed,
        )


def load_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    if args.config is not None:
        if not os.path.exists(args.config):
            raise FileNotFoundError(args.config)
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except ValueError as e:
                raise ParseError(f"configuration is not valid JSON: {e}", 1) from e
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            doc[key] = json.loads(raw)
        except ValueError:
            doc[key] = raw
    cfg = RunConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    count = cfg.sample_count if args.count is None else args.count
    write_dataset(args.out, cfg.synthetic_spec(), count)
    print(f"wrote {count} samples to {args.out}")
    return 0


def _load_samples(data_dir: str) -> list[Sample]:
    return [
        Sample(feats, ann.token_ids, (ann.t_s, ann.t_e))
        for feats, ann in load_dataset(data_dir)
    ]


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    if args.steps is not None:
        cfg.steps = args.steps
    samples = _load_samples(args.data)
    model = GroundingModel(cfg.model_config(), seed=cfg.seed)
    history = train_loop(model, samples, cfg.train_config())
    os.makedirs(args.out, exist_ok=True)
    write_loss_log(os.path.join(args.out, "loss.csv"), history)
    save_checkpoint(os.path.join(args.out, "model.ckpt"), model.params)
    print(
        f"trained {cfg.steps} steps on {len(samples)} samples; "
        f"final total loss {history[-1].total:.6f}; artifacts in {args.out}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(args.checkpoint)
    model = GroundingModel(cfg.model_config(), seed=cfg.seed)
    apply_checkpoint(model, load_checkpoint(args.checkpoint))
    pairs = load_dataset(args.data)

    def infer(pair):
        features, ann = pair
        return ann.query_id, zoom_in_detect(model, features, ann.token_ids, cfg.top_n)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            records = list(pool.map(infer, pairs))
    else:
        records = [infer(p) for p in pairs]

    os.makedirs(args.out, exist_ok=True)
    write_predictions(os.path.join(args.out, "predictions.jsonl"), records)
    annotations = [ann for _, ann in pairs]
    report = make_report(
        dict(records), annotations, cfg.recall_n, cfg.recall_m, cfg.bucket_edges
    )
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for key in sorted(report["recall"]):
        print(f"{key} = {report['recall'][key]:.2f}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    rows = bench_report(
        cfg.bench_t, cfg.bench_text_len, cfg.bench_radii, cfg.bench_repeats,
        cfg.d_model, cfg.heads, cfg.seed,
    )
    out = args.out or "bench.csv"
    write_bench_csv(out, rows)
    for row in rows:
        print(f"{row.config}: ops={row.op_count} median={row.wall_ms_median:.3f}ms")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    path = args.path
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        head = fh.read(6)
    if head.startswith(CHECKPOINT_MAGIC):
        loaded = load_checkpoint(path)
        total = 0
        for name, arr in loaded.items():
            print(f"{name}  shape={list(arr.shape)}  size={arr.size}")
            total += arr.size
        print(f"total parameters: {total}")
        return 0
    if head.startswith(b"NFTF"):
        arr = read_features(path)
        print(f"features: T={arr.shape[0]} F={arr.shape[1]} dtype=float64")
        return 0
    try:
        annotations = read_annotations(path)
        lens = [a.t_e - a.t_s for a in annotations]
        print(f"annotations: {len(annotations)} records")
        if annotations:
            print(f"video_len range: {min(a.video_len for a in annotations)}"
                  f"..{max(a.video_len for a in annotations)}")
            print(f"span length range: {min(lens):g}..{max(lens):g}")
        return 0
    except ParseError:
        pass
    try:
        preds = read_predictions(path)
        counts = [len(v) for v in preds.values()]
        print(f"predictions: {len(preds)} queries")
        if counts:
            print(f"proposals per query: {min(counts)}..{max(counts)}")
        return 0
    except ParseError as e:
        raise FormatError(f"unrecognized file format: {e}", 0) from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nftvg",
        description="Temporal grounding: synthesize data, train, evaluate, benchmark.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON configuration document")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=None, help="samples (default: config)")
    p.set_defaults(run=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output directory for loss.csv + model.ckpt")
    p.add_argument("--steps", type=int, default=None, help="training steps (default: config)")
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="run inference and report recall",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--checkpoint", required=True, help="model.ckpt from train")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for predictions + report")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("bench", help="attention cost benchmark",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--out", default=None, help="output CSV path")
    p.set_defaults(run=cmd_bench)

    p = sub.add_parser("inspect", help="describe a checkpoint, feature, or JSONL file",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("path", help="file to inspect")
    p.set_defaults(run=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except FileNotFoundError as e:
        print(f"error: missing input: {e}", file=sys.stderr)
        return 2
    except (FormatError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
