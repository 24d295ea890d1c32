"""Command-line front end: one subcommand per pipeline stage, one artifact file per stage.

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import cae, clustering_eval, pipeline, raster, similarity, synth_bench
from .errors import DataError, DivergedError
from .trajectory_io import BoundingBox, ingest_csv, split_on_gap, write_csv

log = logging.getLogger("trajsim")

THREADS_ENV = "TRAJSIM_THREADS"


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline.  File paths are given per invocation, not stored here."""

    lat_min: float = synth_bench.SCENARIO_BBOX.lat_min
    lat_max: float = synth_bench.SCENARIO_BBOX.lat_max
    lng_min: float = synth_bench.SCENARIO_BBOX.lng_min
    lng_max: float = synth_bench.SCENARIO_BBOX.lng_max
    delta: float = synth_bench.SCENARIO_DELTA
    epsilon: int = raster.DEFAULT_EPSILON
    interval: float = 5.0
    max_gap: float = 600.0
    L: int = 3
    lambda1: float = 0.15
    lambda2: float = 0.85
    batch_size: int = 200
    epochs: int = 3000
    lr: float = 0.001
    loss: str = "hybrid"
    optimizer: str = "adam"
    dtype: str = "float32"
    linkage: str = "average"
    Z: int = 3
    zmin: int = 2
    zmax: int = 25
    seed: int = 0
    lanes: int = 3
    per_lane: int = 20
    jitter: float = 0.002

    def validate(self) -> None:
        BoundingBox(self.lat_min, self.lat_max, self.lng_min, self.lng_max)
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not self.interval > 0 or not self.max_gap > 0:
            raise ValueError("interval and max_gap must be positive")
        if self.linkage not in clustering_eval.LINKAGES:
            raise ValueError(f"linkage must be one of {clustering_eval.LINKAGES}")
        if not 1 <= self.zmin <= self.zmax or self.Z < 1:
            raise ValueError("need Z >= 1 and 1 <= zmin <= zmax")
        self.cae_config()

    @property
    def bbox(self) -> BoundingBox:
        return BoundingBox(self.lat_min, self.lat_max, self.lng_min, self.lng_max)

    def grid(self) -> raster.GridSpec:
        return raster.GridSpec.from_delta(self.bbox, self.delta)

    def cae_config(self) -> cae.CaeConfig:
        return cae.CaeConfig(
            L=self.L,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr=self.lr,
            seed=self.seed,
            loss=self.loss,
            optimizer=self.optimizer,
            dtype=self.dtype,
        )

    def serialize(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}".replace("'", "") + "\n" for f in fields(self))

    @classmethod
    def parse(cls, text: str) -> PipelineConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in kinds:
                raise DataError(f"config line {lineno}: expected 'key = value' with a known key, got {line!r}")
            values[key] = _convert(kinds[key], value, key)
        cfg = cls(**values)
        try:
            cfg.validate()
        except ValueError as exc:
            raise DataError(f"invalid config: {exc}") from exc
        return cfg


def _convert(kind: str, value: str, key: str):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError as exc:
        raise DataError(f"config key {key}: {value!r} is not a valid {kind}") from exc
    return value


def load_config(path) -> PipelineConfig:
    try:
        return PipelineConfig.parse(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="key = value config file")
    g.add_argument("--save-config", type=Path, metavar="PATH", help="write the effective config here")
    g.add_argument("--threads", type=int, help=f"worker threads (also ${THREADS_ENV})")
    for f in fields(PipelineConfig):
        kind = {"int": int, "float": float}.get(f.type, str)
        flag = "--" + f.name.replace("_", "-")
        extra = {"choices": clustering_eval.LINKAGES} if f.name == "linkage" else {}
        g.add_argument(
            flag, dest=f"cfg_{f.name}", metavar=f.name.upper(), type=kind, default=None,
            help=f"default {f.default!r}", **extra,
        )
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _config_flags()
    parser = _Parser(prog="trajsim", description="Trajectory similarity via a convolutional auto-encoder.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, parents=[common])

    p = add("synth", "generate labelled synthetic lane trajectories")
    p.add_argument("--out", type=Path, required=True, help="trajectory CSV")
    p.add_argument("--labels", type=Path, help="ground-truth labels CSV")

    p = add("ingest", "read AIS records, crop to the bbox, split on time gaps")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("resample", "resample trajectories onto a fixed time step")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("rasterize", "project trajectories to binary images (.npz)")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("train", "train the auto-encoder on an image set")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="output model file")
    p.add_argument("--curve", type=Path, help="per-epoch loss CSV")

    p = add("embed", "encode an image set to embeddings")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("distmat", "pairwise distance matrix")
    p.add_argument("--metric", choices=similarity.METRICS, required=True)
    p.add_argument("--input", type=Path, help="trajectory CSV (dtw, frechet, or cae with --model)")
    p.add_argument("--embeddings", type=Path, help="embedding CSV (cae)")
    p.add_argument("--model", type=Path, help="model file (cae from trajectories)")
    p.add_argument("--out", type=Path, required=True)

    p = add("cluster", "hierarchical clustering cut at Z clusters")
    p.add_argument("--matrix", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--geojson", type=Path, help="also write clusters as GeoJSON")
    p.add_argument("--input", type=Path, help="trajectory CSV for --geojson")

    p = add("evaluate", "BC/WC/AC of an assignment, and Rand index against labels")
    p.add_argument("--clusters", type=Path, required=True)
    p.add_argument("--embeddings", type=Path, required=True)
    p.add_argument("--labels", type=Path, help="ground-truth labels CSV")
    p.add_argument("--out", type=Path, help="metric,value CSV")

    p = add("sweep-ac", "BC/WC/AC for every Z in [zmin, zmax]")
    p.add_argument("--matrix", type=Path, required=True)
    p.add_argument("--embeddings", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("bench", "time distance-matrix construction per method")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", type=Path)
    p.add_argument("--methods", default="cae,dtw,frechet")
    p.add_argument("--sizes", help="comma-separated N values (prefixes of the input)")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)

    p = add("export-images", "write images (and reconstructions) as PGM files")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--model", type=Path, help="also write reconstructions")
    p.add_argument("--outdir", type=Path, required=True)
    p.add_argument("--limit", type=int, default=0, help="at most this many images (0: all)")
    return parser


def effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(PipelineConfig)}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    try:
        cfg.validate()
    except ValueError as exc:
        raise DataError(f"invalid config: {exc}") from exc
    return cfg


def set_threads(n: int | None) -> None:
    """Bound numba and BLAS thread pools; None leaves the machine default."""
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return
        try:
            n = int(env)
        except ValueError as exc:
            raise DataError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    if n < 1:
        raise DataError("thread count must be at least 1")
    import numba
    from threadpoolctl import threadpool_limits

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    threadpool_limits(n)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg):
    trajs, labels = synth_bench.generate(synth_bench.scenario(cfg.lanes, cfg.per_lane, cfg.seed, cfg.jitter))
    write_csv(args.out, trajs)
    if args.labels:
        synth_bench.write_labels_csv(args.labels, trajs, labels)
    return f"synth: {len(trajs)} trajectories in {cfg.lanes} lanes -> {args.out}"


def cmd_ingest(args, cfg):
    trajs = ingest_csv(args.input, cfg.bbox)
    segments = [s for t in trajs for s in split_on_gap(t, cfg.max_gap)]
    if not segments:
        raise DataError("no segment with at least two points")
    write_csv(args.out, segments)
    return f"ingest: {len(trajs)} trajectories, {len(segments)} segments -> {args.out}"


def cmd_resample(args, cfg):
    trajs = pipeline.resample_all(ingest_csv(args.input), cfg.interval)
    write_csv(args.out, trajs)
    return f"resample: {len(trajs)} trajectories at {cfg.interval:g} s -> {args.out}"


def cmd_rasterize(args, cfg):
    grid = cfg.grid()
    trajs = pipeline.clip_all(ingest_csv(args.input), grid)
    images = pipeline.images_for(trajs, grid, cfg.epsilon)
    raster.save_images(args.out, images)
    return f"rasterize: {len(images)} images on a {grid.W}x{grid.H} grid (padded {grid.pad_W}x{grid.pad_H}) -> {args.out}"


def cmd_train(args, cfg):
    images = raster.load_images(args.images)
    result = cae.train(images, cfg.cae_config())
    cae.save_model(result.model, args.model)
    if args.curve:
        with args.curve.open("w", encoding="utf-8") as fh:
            fh.write("epoch,loss\n")
            for i, v in enumerate(result.losses, start=1):
                fh.write(f"{i},{v:.12g}\n")
    final = result.losses[-1] if result.losses else float("nan")
    return f"train: {len(images)} images, {cfg.epochs} epochs, final loss {final:.6g} -> {args.model}"


def cmd_embed(args, cfg):
    images = raster.load_images(args.images)
    model = cae.load_model(args.model)
    if images[0].grid.padded_shape != model.grid.padded_shape:
        raise DataError("image set and model use different grids")
    values = cae.encode_batch(model, images)
    cae.write_embeddings_csv(args.out, [im.id for im in images], values)
    return f"embed: {len(images)} embeddings of dimension {model.L} -> {args.out}"


def cmd_distmat(args, cfg):
    if args.metric == "cae" and args.embeddings:
        ids, values = cae.read_embeddings_csv(args.embeddings)
        matrix = similarity.from_embeddings(ids, values)
    elif args.input is None:
        raise DataError("--input is required (or --embeddings for cae)")
    else:
        trajs = ingest_csv(args.input)
        model = None
        if args.metric == "cae":
            if args.model is None:
                raise DataError("cae from trajectories needs --model")
            model = cae.load_model(args.model)
        matrix = similarity.build_matrix(trajs, args.metric, model=model, epsilon=cfg.epsilon)
    matrix.to_csv(args.out)
    return f"distmat: {matrix.n}x{matrix.n} {args.metric} matrix -> {args.out}"


def cmd_cluster(args, cfg):
    matrix = similarity.DistanceMatrix.from_csv(args.matrix)
    assignment = clustering_eval.cut(clustering_eval.hca(matrix, cfg.linkage), cfg.Z)
    clustering_eval.write_assignment_csv(args.out, matrix.ids, assignment)
    if args.geojson:
        if args.input is None:
            raise DataError("--geojson needs --input trajectories")
        by_id = {t.id: t for t in ingest_csv(args.input)}
        missing = [i for i in matrix.ids if i not in by_id]
        if missing:
            raise DataError(f"{len(missing)} matrix id(s) not found in {args.input}, e.g. {missing[0]!r}")
        clustering_eval.write_geojson(args.geojson, [by_id[i] for i in matrix.ids], assignment)
    sizes = np.bincount(assignment.labels)[1:]
    return f"cluster: {matrix.n} trajectories into {assignment.Z} clusters (sizes {sizes.tolist()}) -> {args.out}"


def _aligned(ids, other_ids, values, what):
    pos = {i: k for k, i in enumerate(other_ids)}
    try:
        return values[[pos[i] for i in ids]]
    except KeyError as exc:
        raise DataError(f"id {exc.args[0]!r} missing from {what}") from exc


def cmd_evaluate(args, cfg):
    ids, assignment = clustering_eval.read_assignment_csv(args.clusters)
    emb_ids, emb = cae.read_embeddings_csv(args.embeddings)
    q = clustering_eval.bc_wc_ac(assignment, _aligned(ids, emb_ids, emb, args.embeddings))
    rows = [("Z", f"{assignment.Z}"), ("BC", f"{q.BC:.12g}"), ("WC", f"{q.WC:.12g}"), ("AC", f"{q.AC:.12g}")]
    if args.labels:
        lab_ids, truth = clustering_eval.read_assignment_csv(args.labels)
        truth_labels = _aligned(ids, lab_ids, truth.labels, args.labels)
        rows.append(("rand_index", f"{clustering_eval.rand_index(assignment, truth_labels):.12g}"))
    if args.out:
        with args.out.open("w", encoding="utf-8") as fh:
            fh.write("metric,value\n")
            fh.writelines(f"{k},{v}\n" for k, v in rows)
    return "evaluate: " + " ".join(f"{k}={v}" for k, v in rows)


def cmd_sweep_ac(args, cfg):
    matrix = similarity.DistanceMatrix.from_csv(args.matrix)
    emb_ids, emb = cae.read_embeddings_csv(args.embeddings)
    y = _aligned(matrix.ids, emb_ids, emb, args.embeddings)
    rows = clustering_eval.sweep_ac(clustering_eval.hca(matrix, cfg.linkage), y, cfg.zmin, cfg.zmax)
    clustering_eval.write_sweep_csv(args.out, rows)
    return f"sweep-ac: Z {cfg.zmin}..{cfg.zmax}, {len(rows)} rows -> {args.out}"


def cmd_bench(args, cfg):
    methods = {m.strip() for m in args.methods.split(",") if m.strip()}
    unknown = methods - set(similarity.METRICS)
    if unknown:
        raise DataError(f"unknown method(s): {sorted(unknown)}")
    trajs = ingest_csv(args.input)
    model = cae.load_model(args.model) if args.model else None
    if "cae" in methods and model is None:
        raise DataError("bench with cae needs --model")
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else None
    report = synth_bench.bench(trajs, methods, args.repetitions, model, cfg.epsilon, sizes)
    report.to_csv(args.out)
    return f"bench: {len(report.rows)} rows -> {args.out}"


def cmd_export_images(args, cfg):
    images = raster.load_images(args.images)
    if args.limit > 0:
        images = images[: args.limit]
    args.outdir.mkdir(parents=True, exist_ok=True)
    recon = None
    if args.model:
        model = cae.load_model(args.model)
        batch = raster.stack_images(images)
        recon = np.concatenate([cae.reconstruct(model, batch[a : a + 64]) for a in range(0, len(batch), 64)])
    for k, im in enumerate(images):
        name = im.id or f"image{k:04d}"
        raster.write_pgm(args.outdir / f"{name}.pgm", im.pixels)
        if recon is not None:
            raster.write_pgm(args.outdir / f"{name}.recon.pgm", recon[k, 0])
    n = len(images) * (2 if recon is not None else 1)
    return f"export-images: {n} PGM files -> {args.outdir}"


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "resample": cmd_resample,
    "rasterize": cmd_rasterize,
    "train": cmd_train,
    "embed": cmd_embed,
    "distmat": cmd_distmat,
    "cluster": cmd_cluster,
    "evaluate": cmd_evaluate,
    "sweep-ac": cmd_sweep_ac,
    "bench": cmd_bench,
    "export-images": cmd_export_images,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = effective_config(args)
        set_threads(args.threads)
        if args.save_config:
            args.save_config.write_text(cfg.serialize(), encoding="utf-8")
        print(COMMANDS[args.command](args, cfg))
    except (DataError, DivergedError, ValueError, OSError) as exc:
        print(f"trajsim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
