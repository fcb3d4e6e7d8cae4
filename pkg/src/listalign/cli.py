"""Command-line pipeline: gen, train, quantize, eval, search, report.

Exit codes by failure domain: 0 success, 2 configuration or input-path
problems, 3 training failures, 4 codec failures, 5 evaluation failures,
6 search failures (including unknown listing ids). Artifacts are written
atomically and contain no timestamps, so a rerun with the same inputs
produces byte-identical files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import align, codec as codecmod, eval as evalmod, model as modelmod, synth
from ._fileio import atomic_write_text
from .config import PipelineConfig, load_pipeline_config, resolved_dict
from .errors import ConfigError, ListalignError, UnknownId

__all__ = ["main"]


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _load_cfg(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_pipeline_config(args.config)
    return PipelineConfig()


def _load_split_dirs(data_dir: str):
    train_dir = os.path.join(data_dir, "train")
    holdout_dir = os.path.join(data_dir, "holdout")
    try:
        train = synth.load_dataset(train_dir)
        holdout = synth.load_dataset(holdout_dir)
        gcfg = synth.load_generator_config(train_dir)
    except (FileNotFoundError, NotADirectoryError) as exc:
        raise ConfigError(f"dataset not found under {data_dir}: {exc}")
    return train, holdout, gcfg


def _encode_records(ps, te, records):
    photos, counts = synth.pack_photos(records)
    ps_emb = modelmod.encode_photoset_batch(ps, photos, counts)
    tx_emb = modelmod.encode_text(te, synth.pack_texts(records))
    return ps_emb, tx_emb


def _multimodal_rows(ps_emb: np.ndarray, tx_emb: np.ndarray) -> np.ndarray:
    mixed = ps_emb + tx_emb
    norms = np.linalg.norm(mixed, axis=1)
    safe = norms > 1e-12
    out = np.where(safe[:, None], mixed / np.where(safe, norms, 1.0)[:, None], ps_emb)
    return out


def _clamp_ks(ks, n: int):
    kept = tuple(k for k in ks if 1 <= k <= n)
    return kept if kept else (1,)


def _parse_int_list(text: str, flag: str):
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"{flag} expects a comma-separated integer list, got {text!r}")
    if not values:
        raise ConfigError(f"{flag} expects at least one integer")
    return values


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, generator=dataclasses.replace(cfg.generator, seed=args.seed)
        )
    records = synth.generate(cfg.generator)
    scorer = None
    if cfg.filters.use_alignment:
        scorer = synth.build_generator(cfg.generator).alignment_score
    kept, stats = synth.apply_filters(
        records,
        min_photos=cfg.filters.min_photos,
        min_text_len=cfg.filters.min_text_len,
        alignment_threshold=cfg.filters.alignment_threshold,
        prelim_scorer=scorer,
    )
    train_recs, holdout_recs = synth.split(kept, cfg.split.holdout_fraction, cfg.split.seed)
    os.makedirs(args.out, exist_ok=True)
    synth.save_dataset(os.path.join(args.out, "train"), train_recs, cfg.generator)
    synth.save_dataset(os.path.join(args.out, "holdout"), holdout_recs, cfg.generator)
    atomic_write_text(
        os.path.join(args.out, "filter_stats.json"),
        json.dumps(stats.as_dict(), sort_keys=True, indent=2) + "\n",
    )
    atomic_write_text(
        os.path.join(args.out, "config.json"),
        json.dumps(resolved_dict(cfg), sort_keys=True, indent=2) + "\n",
    )
    _say(
        args,
        f"generated {stats.n_input} listings, kept {stats.n_output} "
        f"({len(train_recs)} train / {len(holdout_recs)} holdout) -> {args.out}",
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            init_seed=args.seed,
            schedule=dataclasses.replace(cfg.schedule, seed=args.seed),
        )
    train_recs, holdout_recs, gcfg = _load_split_dirs(args.data)
    # the dataset's own geometry wins over whatever the config file says
    cfg = dataclasses.replace(cfg, generator=gcfg)
    n_total = len(train_recs) + len(holdout_recs)
    ks = _clamp_ks(cfg.schedule.eval_ks, n_total)
    if ks != tuple(cfg.schedule.eval_ks):
        _say(args, f"eval ks clamped to {ks} for a gallery of {n_total}")
    schedule = dataclasses.replace(cfg.schedule, eval_ks=ks)

    ps = modelmod.init_set_encoder(cfg.set_encoder_config(), seed=cfg.init_seed)
    te = modelmod.init_text_tower(cfg.text_tower_config(), seed=cfg.init_seed + 1)
    try:
        result = align.train(train_recs, holdout_recs, ps, te, cfg.loss, schedule)
    except ConfigError:
        raise
    except ListalignError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 3

    os.makedirs(args.out, exist_ok=True)
    # the loss scalars ride along in the checkpoint payload under their own names
    loss_extra = {name: var.value for name, var in result.loss_params.named()}
    modelmod.save_checkpoint(
        os.path.join(args.out, "checkpoint.blm"),
        result.ps,
        result.te,
        extra=loss_extra,
    )
    result.log.save_jsonl(os.path.join(args.out, "trainlog.jsonl"))
    result.log.save_epoch_csv(os.path.join(args.out, "epochs.csv"))
    if result.log.epochs:
        last = result.log.epochs[-1]
        summary = " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in last.items())
        _say(args, f"final epoch: {summary}")
    _say(args, f"checkpoint and logs -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# quantize
# ---------------------------------------------------------------------------

def cmd_quantize(args) -> int:
    cfg = _load_cfg(args)
    settings = cfg.codec
    if args.kind:
        settings = dataclasses.replace(settings, kind=args.kind)
    if args.seed is not None:
        settings = dataclasses.replace(settings, seed=args.seed)
    try:
        x = codecmod.load_embeddings(args.emb)
    except FileNotFoundError as exc:
        raise ConfigError(f"embeddings not found: {exc}")
    try:
        trained = codecmod.train_codec(settings.kind, x, **settings.train_kwargs())
        block = codecmod.encode(trained, x)
        x_hat = codecmod.decode(trained, block)
        report = codecmod.compression_report(x, x_hat)
    except ConfigError:
        raise
    except ListalignError as exc:
        print(f"quantization failed: {exc}", file=sys.stderr)
        return 4

    os.makedirs(args.out, exist_ok=True)
    codecmod.save_codec(os.path.join(args.out, "codec.blc"), trained)
    codecmod.save_embeddings(os.path.join(args.out, "codes.emb"), block.codes)
    atomic_write_text(
        os.path.join(args.out, "percentiles.json"),
        json.dumps(report.as_dict(), sort_keys=True, indent=2) + "\n",
    )
    _say(args, f"{settings.kind}: {block.bytes_per_vector} bytes/vector over {block.n} vectors")
    for level, value in zip(report.levels, report.values):
        _say(args, f"  p{int(round(level * 100)):02d} error {value:.6f}")
    _say(args, f"mean error {report.mean_error:.6f} (relative {report.mean_relative_error:.6f})")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _mean_ndcg(tx_emb, ps_emb, ids, query_rows, depth: int) -> float:
    ids = np.asarray(ids)
    scores = []
    for i in query_rows:
        sims = tx_emb[i] @ ps_emb.T
        order = np.lexsort((ids, -sims))
        ranking = ids[order]
        scores.append(evalmod.ndcg_binary(ranking, {ids[i]}, depth=depth))
    return float(np.mean(scores))


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    train_recs, holdout_recs, _ = _load_split_dirs(args.data)
    try:
        ps, te, _extra = modelmod.load_checkpoint(args.model)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {exc}")

    everything = train_recs + holdout_recs
    n = len(everything)
    try:
        ps_emb, tx_emb = _encode_records(ps, te, everything)
        query_rows = np.arange(len(train_recs), n)
        ks = _clamp_ks(_parse_int_list(args.ks, "--ks") if args.ks else (1, 5, 10), n)
        metrics = evalmod.retrieval_metrics(tx_emb, ps_emb, ks=ks, query_indices=query_rows)
        ids = [r.id for r in everything]
        depth = min(10, n)
        retrieval = dict(metrics.as_dict())
        retrieval[f"ndcg_t2i@{depth}"] = _mean_ndcg(tx_emb, ps_emb, ids, query_rows, depth)

        probe = {}
        k_probe = min(10, len(train_recs))
        train_ps = ps_emb[: len(train_recs)]
        hold_ps = ps_emb[len(train_recs) :]
        for attr in synth.ATTRIBUTE_NAMES:
            tr_labels = [r.attributes[attr] for r in train_recs]
            ho_labels = [r.attributes[attr] for r in holdout_recs]
            probe[attr] = evalmod.knn_probe(train_ps, tr_labels, hold_ps, ho_labels, k=k_probe)

        sweep = []
        if args.sweep:
            dims = _parse_int_list(args.sweep, "--sweep")
            sweep = evalmod.pca_dim_sweep(
                tx_emb, ps_emb, dims=dims, ks=ks,
                query_indices=query_rows, quantize=args.quantize_sweep,
            )
    except ConfigError:
        raise
    except ListalignError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return 5

    report = evalmod.EvalReport(retrieval=retrieval, probe=probe, sweep=sweep)
    atomic_write_text(args.out, report.to_json() + "\n")
    if args.sweep_csv and sweep:
        cols = ["dim", "quantized", "mean_rank_t2i", "mean_rank_i2t"]
        cols += [f"recall_t2i@{k}" for k in ks]
        lines = [",".join(cols)]
        for row in sweep:
            cells = [str(row["dim"]), str(row["quantized"]),
                     repr(row["mean_rank_t2i"]), repr(row["mean_rank_i2t"])]
            cells += [repr(row["recall_t2i"][str(k)]) for k in ks]
            lines.append(",".join(cells))
        atomic_write_text(args.sweep_csv, "\n".join(lines) + "\n")
    _say(args, f"mean rank t2i {metrics.mean_rank_t2i:.3f}, recall@{ks[0]} "
               f"{metrics.recall_t2i[ks[0]]:.4f} over {metrics.n_queries} holdout queries")
    _say(args, f"report -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def cmd_search(args) -> int:
    try:
        train_recs, holdout_recs, _ = _load_split_dirs(args.data)
        ps, te, _extra = modelmod.load_checkpoint(args.model)
    except ConfigError:
        raise
    except (ListalignError, FileNotFoundError) as exc:
        print(f"search failed: {exc}", file=sys.stderr)
        return 6

    everything = train_recs + holdout_recs
    ids = np.array([r.id for r in everything])
    try:
        row_by_id = {r.id: i for i, r in enumerate(everything)}
        if args.query_id not in row_by_id:
            raise UnknownId(f"no listing with id {args.query_id}")
        row = row_by_id[args.query_id]
        ps_emb, tx_emb = _encode_records(ps, te, everything)
        gallery = _multimodal_rows(ps_emb, tx_emb)
        if args.modality == "photo":
            query = ps_emb[row]
        elif args.modality == "text":
            query = tx_emb[row]
        else:
            query = gallery[row]
        scores = gallery @ query
        order = np.lexsort((ids, -scores))
    except ListalignError as exc:
        print(f"search failed: {exc}", file=sys.stderr)
        return 6

    for i in order[: args.top]:
        print(f"{ids[i]} {scores[i]:.6f}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    for path in args.paths:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                report = evalmod.EvalReport.from_json(fh.read())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"cannot read report {path}: {exc}", file=sys.stderr)
            return 5
        print(f"== {path} ==")
        for key in sorted(report.retrieval):
            value = report.retrieval[key]
            if isinstance(value, dict):
                inner = ", ".join(f"@{k}={value[k]:.4f}" for k in sorted(value, key=int))
                print(f"  {key}: {inner}")
            elif isinstance(value, float):
                print(f"  {key}: {value:.4f}")
            else:
                print(f"  {key}: {value}")
        for attr in sorted(report.probe):
            print(f"  probe {attr}: {report.probe[attr]:.4f}")
        for row in report.sweep:
            print(
                f"  sweep dim={row['dim']} quantized={row['quantized']} "
                f"mean_rank_t2i={row['mean_rank_t2i']:.3f}"
            )
        if report.compression:
            print(f"  compression: {json.dumps(report.compression, sort_keys=True)}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(sp, out_required: bool = True):
    sp.add_argument("--config", help="pipeline config JSON")
    sp.add_argument("--seed", type=int, default=None, help="override the stage seed")
    sp.add_argument("--quiet", action="store_true", help="suppress progress output")
    if out_required:
        sp.add_argument("--out", required=True, help="output directory or file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="listalign",
        description="listing photo-set/text alignment pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate, filter, and split a synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the two towers on a generated dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory produced by gen")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="fit a codec to an embedding file")
    _add_common(p)
    p.add_argument("--emb", required=True, help="embedding file to compress")
    p.add_argument("--kind", choices=("pq", "opq", "scalar", "pca"), help="codec family")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="retrieval metrics, probes, and sweeps")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--ks", help="comma-separated recall cutoffs, default 1,5,10")
    p.add_argument("--sweep", help="comma-separated projection dims")
    p.add_argument("--sweep-csv", help="also write the sweep as CSV here")
    p.add_argument("--quantize-sweep", action="store_true",
                   help="round-trip sweep projections through the 8-bit codec")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="nearest listings for a query listing")
    _add_common(p, out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--query-id", type=int, required=True)
    p.add_argument("--modality", choices=("photo", "text", "multimodal"), default="multimodal")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="pretty-print saved evaluation reports")
    p.add_argument("paths", nargs="+", help="report JSON files")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ListalignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
