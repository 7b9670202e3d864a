"""Command-line entry points: train, eval, bench and ablate.

Exit codes: 0 success, 2 invalid configuration or checkpoint, 3 I/O
failure, 4 benchmark interaction-count mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import pathlib
import sys
import time
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import data, geom, net, nlops, report
from .exceptions import InvalidArgument, ParseError

log = logging.getLogger("cascadenl")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_BENCH = 0, 2, 3, 4


class ConfigError(InvalidArgument):
    pass


class BenchMismatch(RuntimeError):
    pass


@dataclass
class RunConfig:
    network: net.NetworkConfig = field(default_factory=net.NetworkConfig)
    train: net.TrainConfig = field(default_factory=net.TrainConfig)
    data: Optional[str] = None
    out: str = "runs/default"
    checkpoint: Optional[str] = None
    scene_seed: int = 0
    scene_points: int = 16384
    scene_extent: float = 4.0
    scene_count: int = 1
    scene_noise: float = 0.005
    block_size: float = 1.0
    block_points: int = 4096
    bench_sizes: Tuple[int, ...] = (512, 1024, 2048, 4096)
    bench_seed: int = 0


_NET_KEYS = {f.name: f for f in dataclasses.fields(net.NetworkConfig)}
_TRAIN_KEYS = {f.name: f for f in dataclasses.fields(net.TrainConfig)}
_RUN_KEYS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name not in ("network", "train")}

_INT_LISTS = {"stage_M", "stage_K", "stage_D", "stage_Dplus", "dec_widths", "bench_sizes"}
_BOOLS = {"use_relpos", "class_weighting"}
_OPTIONAL_STR = {"data", "checkpoint"}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key in _INT_LISTS:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if key in _BOOLS:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes", "on")
        if key in _OPTIONAL_STR:
            return raw or None
        if key == "levels":
            return raw
        if isinstance(default, bool):
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def _defaults():
    return net.NetworkConfig(), net.TrainConfig(), RunConfig()


def parse_config_text(text: str, source: str = "<config>") -> Tuple[dict, RunConfig]:
    """Parse ``key = value`` lines; returns (explicitly set keys, RunConfig)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = raw
    return values, build_run_config(values)


def build_run_config(values: dict) -> RunConfig:
    ndef, tdef, rdef = _defaults()
    nkw, tkw, rkw = {}, {}, {}
    for key, raw in values.items():
        if key in _NET_KEYS:
            nkw[key] = _coerce(key, raw, getattr(ndef, key))
        elif key in _TRAIN_KEYS:
            tkw[key] = _coerce(key, raw, getattr(tdef, key))
        elif key in _RUN_KEYS:
            rkw[key] = _coerce(key, raw, getattr(rdef, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        rc = RunConfig(network=net.NetworkConfig(**nkw), train=net.TrainConfig(**tkw), **rkw)
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from None
    validate_run_config(rc)
    return rc


def validate_run_config(rc: RunConfig):
    if rc.scene_points < 1 or rc.scene_count < 1:
        raise ConfigError("scene_points and scene_count must be >= 1")
    if not rc.scene_extent > 0 or not rc.block_size > 0 or rc.scene_noise < 0:
        raise ConfigError("scene_extent and block_size must be positive, scene_noise >= 0")
    if rc.block_points < rc.network.stage_M[0]:
        raise ConfigError(f"block_points={rc.block_points} is below stage_M[0]={rc.network.stage_M[0]}")
    if not rc.bench_sizes or min(rc.bench_sizes) < 1:
        raise ConfigError("bench_sizes must be positive")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(rc: RunConfig) -> str:
    """Every effective key, in a form :func:`parse_config_text` reads back."""
    lines = ["# network"]
    lines += [f"{k} = {_fmt(getattr(rc.network, k))}" for k in _NET_KEYS]
    lines += ["# training"]
    lines += [f"{k} = {_fmt(getattr(rc.train, k))}" for k in _TRAIN_KEYS]
    lines += ["# run"]
    lines += [f"{k} = {_fmt(getattr(rc, k))}" for k in _RUN_KEYS]
    return "\n".join(lines) + "\n"


def load_run_config(path, overrides: dict) -> Tuple[dict, RunConfig]:
    try:
        text = pathlib.Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    values, _ = parse_config_text(text, str(path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return values, build_run_config(values)


# --- data ------------------------------------------------------------------

def source_clouds(rc: RunConfig):
    """The clouds to train and evaluate on: a data file or synthetic scenes."""
    if rc.data:
        return [data.load_cloud(rc.data)]
    return [data.generate_scene(data.default_scene_spec(
        rc.scene_seed + i, rc.scene_points, rc.scene_extent, rc.network.num_classes,
        rc.scene_noise)) for i in range(rc.scene_count)]


def make_blocks(rc: RunConfig, clouds, seed: int):
    blocks = []
    for i, cloud in enumerate(clouds):
        blocks += data.block_split(cloud, rc.block_size, rc.block_points, seed + i)
    if not blocks:
        raise ConfigError("block splitting produced no blocks")
    return blocks


def resolve_channels(values: dict, rc: RunConfig, blocks) -> RunConfig:
    width = blocks[0].n_channels
    if "in_channels" not in values and rc.network.in_channels != width:
        values = dict(values, in_channels=str(width))
        rc = build_run_config(values)
    if rc.network.in_channels != width:
        raise ConfigError(f"in_channels={rc.network.in_channels} but the data has {width} channels")
    if any(b.labels is None for b in blocks):
        raise ConfigError("the data has no labels")
    labels_max = max(int(b.labels.max()) for b in blocks)
    if labels_max >= rc.network.num_classes:
        raise ConfigError(f"data has label {labels_max} but num_classes={rc.network.num_classes}")
    return rc


def _announce(rc: RunConfig, out: pathlib.Path):
    text = format_config(rc)
    sys.stderr.write("# effective config\n" + text)
    (out / "effective.cfg").write_text(text, encoding="utf-8")


# --- commands ---------------------------------------------------------------

def run_training(rc: RunConfig, blocks, out: pathlib.Path, emit=print, tag: str = ""):
    """Train from scratch; returns (params, history)."""
    cfg, tc = rc.network, rc.train
    dataset = net.prepare_dataset(blocks, cfg, seed=tc.seed)
    params = net.init_params(cfg, tc.seed)
    state = net.init_optimizer(params)
    history = []
    with open(out / f"metrics{tag}.jsonl", "w", encoding="utf-8") as mfile:
        for epoch in range(tc.total_epochs):
            params, state, stats = net.train_epoch(dataset, cfg, tc, params, state, epoch)
            line = json.dumps(stats)
            emit(line)
            mfile.write(line + "\n")
            history.append(stats)
            if (epoch + 1) % tc.decay_every == 0:
                net.save_checkpoint(out / f"ckpt{tag}_epoch{epoch + 1:04d}.bin", params)
    net.save_checkpoint(out / f"model{tag}.ckpt", params)
    if history:
        report.plot_training(history, out / f"train_curve{tag}.png")
    return params, history


def cmd_train(args) -> int:
    values, rc = load_run_config(args.config, _overrides(args))
    out = pathlib.Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    blocks = make_blocks(rc, source_clouds(rc), rc.train.seed)
    rc = resolve_channels(values, rc, blocks)
    _announce(rc, out)
    run_training(rc, blocks, out)
    return EXIT_OK


def evaluate(rc: RunConfig, params: dict, clouds, seed: int) -> dict:
    """Predict every point of every cloud through block splitting.

    A point sampled into several blocks keeps the prediction of the last
    block; points left out of every block take the prediction of their
    nearest predicted point.
    """
    cfg = rc.network
    cm = data.ConfusionMatrix(cfg.num_classes)
    for ci, cloud in enumerate(clouds):
        blocks = data.block_split(cloud, rc.block_size, rc.block_points, seed + ci)
        pred = np.full(len(cloud), -1, dtype=np.int64)
        for bi, block in enumerate(blocks):
            geometry = net.build_geometry(block, cfg, seed=seed + bi)
            p = net.predict(block, cfg, params, geometry)
            for row, src in enumerate(block.index):
                pred[src] = p[row]  # later blocks overwrite earlier ones
        missing = np.flatnonzero(pred < 0)
        have = np.flatnonzero(pred >= 0)
        if len(have) == 0:
            raise ConfigError("no block was large enough to evaluate")
        if len(missing):
            nn = geom.knn(cloud.positions[have], cloud.positions[missing], 1)[:, 0]
            pred[missing] = pred[have[nn]]
        if cloud.labels is None:
            raise ConfigError("evaluation data has no labels")
        cm = data.accumulate_metrics(cm, pred, cloud.labels)
    return data.finalize_metrics(cm)


def cmd_eval(args) -> int:
    values, rc = load_run_config(args.config, _overrides(args))
    ckpt = args.checkpoint or rc.checkpoint or str(pathlib.Path(rc.out) / "model.ckpt")
    clouds = source_clouds(rc)
    probe = make_blocks(rc, clouds[:1], 0)
    rc = resolve_channels(values, rc, probe)
    try:
        params = net.load_checkpoint(ckpt)
    except ParseError as exc:
        raise ConfigError(str(exc)) from None
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {ckpt}: {exc.strerror}") from None
    net.check_params(params, rc.network)
    metrics = evaluate(rc, params, clouds, rc.train.seed)
    print(data.metrics_line(metrics))
    return EXIT_OK


def bench_cloud(n: int, seed: int, channels: int = 6) -> geom.PointCloud:
    """Uniform points in an 8 m x 8 m x 1 m slab with random colors."""
    rng = np.random.default_rng([seed, n])
    pos = rng.uniform(0, 1, size=(n, 3)) * (8.0, 8.0, 1.0)
    extra = rng.uniform(0, 1, size=(n, channels - 3))
    return geom.PointCloud(pos, np.concatenate([pos, extra], axis=1))


def run_bench(rc: RunConfig, channels: int = 6):
    """Cascaded module vs. all-pairs gather at equal width, for every N."""
    cfg = rc.network
    d, dp = cfg.stage_D[0], cfg.stage_Dplus[0]
    relpos = 3 if cfg.use_relpos else 0
    rng = np.random.default_rng(rc.bench_seed)

    def glorot(shape):
        lim = np.sqrt(6.0 / sum(shape))
        return rng.uniform(-lim, lim, size=shape)

    params = nlops.CascadeParams(
        nlops.LevelWeights(glorot((channels + relpos, d)), glorot((channels + relpos, d))),
        nlops.LevelWeights(glorot((d, d)), glorot((d, d))),
        nlops.LevelWeights(glorot((d, d)), glorot((d, d))),
        glorot((3 * d, dp)), np.zeros(dp))
    base_w = nlops.LevelWeights(glorot((channels, d)), glorot((channels, d)))
    rows = []
    for n in rc.bench_sizes:
        cloud = bench_cloud(n, rc.bench_seed, channels)
        m = min(cfg.stage_M[0], max(1, n // 4))
        k = min(cfg.stage_K[0], n)
        order = geom.canonical_order(cloud)
        pos, feats = cloud.positions[order], cloud.features[order]
        part = geom.voxel_partition(pos, cfg.cell_size, cfg.N_sp_cap)
        cs = geom.farthest_point_sample(pos, m)
        table = geom.knn(pos, cs, k)
        csp = part.assignment[cs.indices]
        samples = geom.sample_superpoint_peers(csp, cfg.K_sp, rc.bench_seed)

        nlops.interaction_counter.reset()
        nlops.buffer_stats.reset()
        t0 = time.perf_counter()
        lf, _ = nlops.cascaded_forward(feats, pos, cs, table, samples, csp, params,
                                       cfg.level_set, cfg.use_relpos)
        secs = time.perf_counter() - t0
        measured = nlops.interaction_counter.read()
        lv = cfg.level_set
        n_sp = len(lf.V) if lf.V is not None else 0
        analytic = nlops.pair_interaction_count(
            m, k, cfg.K_sp if 2 in lv else 0, n_sp if 3 in lv else 0)
        rows.append({"n": n, "variant": "cascaded", "interactions": measured,
                     "analytic": analytic, "seconds": secs,
                     "peak_bytes": nlops.buffer_stats.peak, "M": m, "K": k, "N_sp": n_sp})

        nlops.interaction_counter.reset()
        nlops.buffer_stats.reset()
        t0 = time.perf_counter()
        nlops.baseline_full_nonlocal(feats, base_w)
        secs = time.perf_counter() - t0
        rows.append({"n": n, "variant": "baseline", "interactions": nlops.interaction_counter.read(),
                     "analytic": n * n, "seconds": secs, "peak_bytes": nlops.buffer_stats.peak})
    return rows


def cmd_bench(args) -> int:
    _, rc = load_run_config(args.config, _overrides(args))
    out = pathlib.Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_bench(rc)
    lines = ["n,variant,interactions,seconds,peak_bytes"]
    lines += [f"{r['n']},{r['variant']},{r['interactions']},{r['seconds']:.6f},{r['peak_bytes']}"
              for r in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    (out / "bench.csv").write_text(text, encoding="utf-8")
    report.plot_bench(rows, out / "bench.png")
    bad = [r for r in rows if r["interactions"] != r["analytic"]]
    if bad:
        for r in bad:
            log.error("n=%d %s: measured %d interactions, expected %d",
                      r["n"], r["variant"], r["interactions"], r["analytic"])
        raise BenchMismatch("interaction count mismatch")
    return EXIT_OK


def run_ablation(values: dict, rc: RunConfig, out: pathlib.Path, variants=("1", "12", "123")):
    train_blocks = make_blocks(rc, source_clouds(rc), rc.train.seed)
    rc = resolve_channels(values, rc, train_blocks)
    clouds = source_clouds(rc)
    rows = []
    for levels in variants:
        vrc = dataclasses.replace(rc, network=dataclasses.replace(rc.network, levels=levels))
        tag = f"_L{levels}"
        params, history = run_training(vrc, train_blocks, out, emit=lambda _l: None, tag=tag)
        metrics = evaluate(vrc, params, clouds, rc.train.seed)
        shuffle = hashlib.sha256("".join(h["order"] for h in history).encode()).hexdigest()[:16]
        rows.append({"levels": levels, **{k: metrics[k] for k in ("miou", "macc", "oa")},
                     "shuffle": shuffle})
    return rows


def cmd_ablate(args) -> int:
    values, rc = load_run_config(args.config, _overrides(args))
    out = pathlib.Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(values, rc, out)
    lines = ["levels,miou,macc,oa,shuffle"]
    lines += [f"{r['levels']},{r['miou']:.6f},{r['macc']:.6f},{r['oa']:.6f},{r['shuffle']}"
              for r in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    (out / "ablation.csv").write_text(text, encoding="utf-8")
    report.plot_ablation(rows, out / "ablation.png")
    return EXIT_OK


# --- entry point -------------------------------------------------------------

def _overrides(args) -> dict:
    return {"seed": None if args.seed is None else str(args.seed),
            "total_epochs": None if args.epochs is None else str(args.epochs),
            "levels": args.levels, "out": args.out, "data": args.data}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascadenl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in (("train", cmd_train), ("eval", cmd_eval),
                       ("bench", cmd_bench), ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        p.set_defaults(func=func)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--levels", choices=("1", "12", "123", "full"))
        p.add_argument("--out", metavar="PATH")
        p.add_argument("--data", metavar="PATH")
        if name == "eval":
            p.add_argument("--checkpoint", metavar="PATH")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidArgument) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except BenchMismatch as exc:
        log.error("%s", exc)
        return EXIT_BENCH
    except (OSError, ParseError) as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
