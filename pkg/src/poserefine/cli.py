"""Operator surface: dataset generation, training, refinement, tracking,
evaluation and benchmarking as one executable with subcommands.

Configuration comes from a JSON file with one section per subsystem; unknown
keys are rejected. Command-line flags override config values. Exit codes:
0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise SystemExit(1 if status else 0)


def _apply_threads(threads: int | None, deterministic: bool):
    n = "1" if deterministic else (str(threads) if threads else None)
    if n is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMBA_NUM_THREADS"):
            os.environ[var] = n


def _from_dict(cls, d: dict, path: str):
    """Construct a dataclass from a dict, rejecting unknown keys, recursing
    into nested dataclass fields."""
    import dataclasses

    if not dataclasses.is_dataclass(cls):
        raise AssertionError(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {sorted(unknown)}")
    kwargs = {}
    for key, val in d.items():
        ftype = fields[key].type
        if isinstance(val, dict) and ftype not in ("dict", dict):
            target = _NESTED.get((cls.__name__, key))
            if target is not None:
                val = _from_dict(target, val, f"{path}.{key}")
        if isinstance(val, list) and key in ("categories", "ts_hidden",
                                             "enc_point_dims", "enc_global_dims"):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad config section {path}: {e}") from e


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    known = {"data", "model", "train", "track", "eval"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _apply_overrides(cfg: dict, sets: list[str]):
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, _, raw = item.partition("=")
        parts = key.split(".")
        if len(parts) < 2:
            raise ConfigError(f"--set key must be section.key[...], got {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args):
    import numpy as np  # noqa: F401  (heavy imports deferred past --threads)

    from .synthdata import AugmentSpec, GenConfig, PerturbSpec, gen_dataset, write_dataset
    from .templates import default_categories
    from .track import MotionSpec, gen_sequence, write_sequences

    cfg = _apply_overrides(_load_config(args.config), args.set)
    data_cfg = dict(cfg.get("data", {}))
    if args.seed is not None:
        data_cfg["seed"] = args.seed
    seq_cfg = data_cfg.pop("sequences", None)
    gen_cfg = _from_dict(GenConfig, data_cfg, "data")
    registry = default_categories()

    if seq_cfg is None and not gen_cfg.categories:
        raise ConfigError("data.categories is empty")

    wrote_any = False
    if gen_cfg.samples_per_category > 0 and gen_cfg.categories:
        samples = gen_dataset(gen_cfg, registry)
        write_dataset(
            samples, args.out, registry, transform=gen_cfg.transform,
            extra_manifest={"n_o": gen_cfg.n_o, "seed": gen_cfg.seed},
        )
        counts = {}
        for s in samples:
            counts[s.category] = counts.get(s.category, 0) + 1
        for cat in sorted(counts):
            print(f"{cat}: {counts[cat]} samples")
        wrote_any = True

    if seq_cfg:
        known = {"count", "length", "rot_deg_per_frame", "trans_m_per_frame",
                 "discontinuities", "categories", "seed"}
        unknown = set(seq_cfg) - known
        if unknown:
            raise ConfigError(f"unknown keys in data.sequences: {sorted(unknown)}")
        import numpy as np

        seq_cats = seq_cfg.get("categories", list(gen_cfg.categories))
        motion = MotionSpec(
            rot_deg_per_frame=seq_cfg.get("rot_deg_per_frame", 5.0),
            trans_m_per_frame=seq_cfg.get("trans_m_per_frame", 0.01),
        )
        seqs = []
        count = seq_cfg.get("count", 1)
        length = seq_cfg.get("length", 50)
        disc = seq_cfg.get("discontinuities", [])
        seed = seq_cfg.get("seed", gen_cfg.seed)
        for i in range(count):
            cat = registry[seq_cats[i % len(seq_cats)]]
            rng = np.random.default_rng([seed, 211, i])
            seqs.append(gen_sequence(
                cat, length, motion, rng, seq_id=f"{cat.name}_seq{i:04d}",
                n_model=gen_cfg.n_model, discontinuities=disc,
            ))
        out = args.seq_out or args.out
        write_sequences(seqs, out, registry)
        print(f"sequences: {len(seqs)} x {length} frames -> {out}")
        wrote_any = True
    if not wrote_any:
        raise ConfigError("nothing to generate: no samples or sequences configured")
    return 0


def _cmd_train(args):
    from .network import build_model
    from .synthdata import categories_from_manifest, read_dataset
    from .train import TrainConfig, load_checkpoint, train

    cfg = _apply_overrides(_load_config(args.config), args.set)
    train_cfg_d = dict(cfg.get("train", {}))
    if args.epochs is not None:
        train_cfg_d["epochs"] = args.epochs
    if args.seed is not None:
        train_cfg_d["seed"] = args.seed
    tcfg = _from_dict(TrainConfig, train_cfg_d, "train")

    samples, _, manifest = read_dataset(args.data)
    categories = categories_from_manifest(manifest)

    if args.resume:
        model, opt_state, start_epoch = load_checkpoint(args.resume)
        print(f"resuming from {args.resume} at epoch {start_epoch}")
    else:
        model_cfg = dict(cfg.get("model", {}))
        model_cfg.setdefault("mode", tcfg.mode)
        from .network import build_model as _bm
        import dataclasses  # noqa: F401

        allowed = {"n_o", "n_p", "mode", "seed", "t_net", "enc_point_dims",
                   "enc_global_dims", "rot_hidden", "ts_hidden", "gn_groups"}
        unknown = set(model_cfg) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys in model: {sorted(unknown)}")
        model_cfg.setdefault("n_o", manifest.get("n_o", 1024))
        model_cfg.setdefault("n_p", 1024)
        for k in ("enc_point_dims", "enc_global_dims", "ts_hidden"):
            if k in model_cfg:
                model_cfg[k] = tuple(model_cfg[k])
        model = _bm(**model_cfg)
        opt_state, start_epoch = None, 0

    log_path = args.log or (args.out + ".log.jsonl")
    train(model, samples, categories, tcfg, log_path=log_path,
          ckpt_path=args.out, start_epoch=start_epoch, opt_state=opt_state)
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_refine(args):
    import numpy as np

    from .metrics import rotation_error_deg, translation_error_cm
    from .network import refine_dataset
    from .synthdata import categories_from_manifest, read_dataset, write_dataset
    from .train import load_checkpoint, build_priors, TrainConfig

    model, _, _ = load_checkpoint(args.ckpt)
    model.set_requires_grad(False)
    samples, _, manifest = read_dataset(args.data)
    categories = categories_from_manifest(manifest)
    prior_kind = args.prior or manifest.get("prior_kind", "mean-shape")
    pcfg = TrainConfig(prior_kind=prior_kind, mode=model.mode)
    priors = build_priors(categories, pcfg, model.n_p, samples)
    syms = {name: cat.symmetry for name, cat in categories.items()}

    rng = np.random.default_rng([args.seed if args.seed is not None else 0, 31])
    per_iter_poses = refine_dataset(model, samples, priors, args.iters, rng)

    trace = []
    for k in range(args.iters + 1):
        poses_k = [row[k] for row in per_iter_poses]
        r_errs = [
            rotation_error_deg(s.gt, p, syms[s.category])
            for s, p in zip(samples, poses_k)
        ]
        t_errs = [translation_error_cm(s.gt, p) for s, p in zip(samples, poses_k)]
        trace.append({
            "iteration": k,
            "mean_rot_err_deg": float(np.mean(r_errs)),
            "mean_trans_err_cm": float(np.mean(t_errs)),
        })
        print(json.dumps(trace[-1]))

    preds = {s.sample_id: row[-1] for s, row in zip(samples, per_iter_poses)}
    write_dataset(
        samples, args.out, categories, transform=manifest.get("transform", "camera-axis-scale"),
        preds=preds, kind="predictions",
        extra_manifest={"iteration_trace": trace, "iters": args.iters,
                        "prior_kind": prior_kind},
    )
    return 0


def _cmd_track(args):
    import numpy as np

    from .metrics import EvalRecord, rotation_error_deg, translation_error_cm, tracking_report
    from .synthdata import categories_from_manifest
    from .track import TrackConfig, model_refiner, oracle_refiner, read_sequences, track_sequence
    from .train import build_priors, load_checkpoint, TrainConfig

    seqs, manifest = read_sequences(args.seq)
    categories = categories_from_manifest(manifest)
    syms = {name: cat.symmetry for name, cat in categories.items()}

    if args.oracle:
        refiner = oracle_refiner()
        n_o = 1024
    else:
        model, _, _ = load_checkpoint(args.ckpt)
        model.set_requires_grad(False)
        pcfg = TrainConfig(prior_kind=args.prior or "mean-shape", mode=model.mode)
        priors = build_priors(
            categories, pcfg, model.n_p,
            [f for s in seqs for f in s.frames],
        )
        refiner = model_refiner(model, priors, args.iters)
        n_o = model.n_o

    cfg = TrackConfig(iters=args.iters, n_o=n_o,
                      seed=args.seed if args.seed is not None else 0)
    all_records = []
    log_lines = []
    for seq in seqs:
        poses, events = track_sequence(seq, refiner, cfg)
        recs = []
        for fi, (frame, pose) in enumerate(zip(seq.frames, poses)):
            rec = EvalRecord(frame.sample_id, seq.category, frame.gt, pose,
                             frame.model_points_normalized())
            recs.append(rec)
            log_lines.append({
                "seq": seq.seq_id,
                "frame": fi,
                "rot_err_deg": rotation_error_deg(frame.gt, pose, syms[seq.category]),
                "trans_err_cm": translation_error_cm(frame.gt, pose),
                "reinit": fi in events,
                "pose": {"r": pose.r.m.tolist(), "t": pose.t.tolist(), "s": pose.s.tolist()},
            })
        all_records.append(recs)
    report = tracking_report(all_records, syms, iou_points=args.iou_points)
    if args.out:
        with open(args.out, "w") as f:
            for line in log_lines:
                f.write(json.dumps(line) + "\n")
    print(report.to_json())
    return 0


def _cmd_eval(args):
    import numpy as np

    from .metrics import (EvalRecord, add_metric, adds_metric, auc_add, map_sweep)
    from .synthdata import categories_from_manifest, read_dataset

    samples, preds, manifest = read_dataset(args.preds)
    if manifest.get("kind") != "predictions":
        raise ConfigError(f"{args.preds} is not a predictions dataset")
    missing = [s.sample_id for s in samples if s.sample_id not in preds]
    if missing:
        raise ConfigError(f"predictions missing for sample ids: {missing[:5]}...")
    if args.data:
        ref_samples, _, _ = read_dataset(args.data)
        ref_ids = {s.sample_id for s in ref_samples}
        got_ids = {s.sample_id for s in samples}
        if got_ids != ref_ids:
            raise ConfigError(
                f"sample id mismatch: {sorted(got_ids ^ ref_ids)[:5]} differ"
            )
    categories = categories_from_manifest(manifest)
    syms = {name: cat.symmetry for name, cat in categories.items()}
    records = [
        EvalRecord(s.sample_id, s.category, s.gt, preds[s.sample_id],
                   s.model_points_normalized())
        for s in samples
    ]
    report = map_sweep(records, syms, iou_points=args.iou_points)
    add_errs, cats_of = [], []
    for r in records:
        sym = syms.get(r.category)
        err = (adds_metric if sym and sym.kind != "none" else add_metric)(
            r.model_points, r.gt, r.pred
        )
        add_errs.append(err)
        cats_of.append(r.category)
    table = dict(report.table)
    table["add_auc"] = {}
    for c in sorted(set(cats_of)):
        errs = [e for e, cc in zip(add_errs, cats_of) if cc == c]
        table["add_auc"][c] = auc_add(errs)
    table["add_auc"]["overall"] = float(
        np.mean([v for k, v in table["add_auc"].items() if k != "overall"])
    )
    from .metrics import MetricReport

    report = MetricReport(table=table)
    if args.out:
        with open(args.out + ".json", "w") as f:
            f.write(report.to_json())
        with open(args.out + ".csv", "w") as f:
            f.write(report.to_csv())
    print(report.to_csv())
    return 0


def _cmd_bench(args):
    from .priors import bbox_corners_prior, mean_shape
    from .templates import default_categories
    from .train import load_checkpoint
    from .track import bench_throughput

    model, _, _ = load_checkpoint(args.ckpt)
    if model.n_p == 8:
        prior = bbox_corners_prior()
    else:
        prior = mean_shape(default_categories()["bowl"], model.n_p)
    results = {}
    for iters in sorted({1, args.iters}):
        results[f"k{iters}"] = bench_throughput(
            model, prior, iters=iters, n_runs=args.runs
        )
    print(json.dumps(results, indent=1))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poserefine", description=__doc__)
    p.add_argument("--threads", type=int, default=None, help="cap worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, fixed-order execution")
    p.add_argument("--seed", type=int, default=None, help="override config seeds")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", required=False)
    g.add_argument("--out", required=True)
    g.add_argument("--seq-out", default=None, help="separate dir for sequences")
    g.add_argument("--set", action="append", help="override: section.key=value")
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train the refiner")
    t.add_argument("--config", required=False)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", default=None, help="JSON-lines training log path")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--set", action="append")
    t.set_defaults(fn=_cmd_train)

    r = sub.add_parser("refine", help="run iterative refinement on a dataset")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--iters", type=int, default=4)
    r.add_argument("--out", required=True, help="predictions directory")
    r.add_argument("--prior", default=None)
    r.set_defaults(fn=_cmd_refine)

    k = sub.add_parser("track", help="track sequences")
    k.add_argument("--ckpt", default=None)
    k.add_argument("--seq", required=True)
    k.add_argument("--out", default=None, help="JSON-lines per-frame log")
    k.add_argument("--iters", type=int, default=1)
    k.add_argument("--prior", default=None)
    k.add_argument("--oracle", action="store_true",
                   help="use the gt-returning stub refiner (plumbing check)")
    k.add_argument("--iou-points", type=int, default=100_000)
    k.set_defaults(fn=_cmd_track)

    e = sub.add_parser("eval", help="evaluate predictions")
    e.add_argument("--preds", required=True)
    e.add_argument("--data", default=None, help="cross-check sample ids")
    e.add_argument("--out", default=None, help="report base path (.json/.csv)")
    e.add_argument("--iou-points", type=int, default=100_000)
    e.set_defaults(fn=_cmd_eval)

    b = sub.add_parser("bench", help="refinement throughput")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--iters", type=int, default=4)
    b.add_argument("--runs", type=int, default=100)
    b.set_defaults(fn=_cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _apply_threads(args.threads, args.deterministic)
    try:
        return args.fn(args)
    except (ConfigError,) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 0
    except Exception as e:  # runtime failures exit 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
