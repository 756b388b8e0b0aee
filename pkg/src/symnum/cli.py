"""Command-line entry point: ``symnum <command> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, args: argparse.Namespace, inputs: dict[str, str] | None = None) -> None:
    """``<out>.manifest.json``: flags plus content hashes of checkpoints read or written."""
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    hashes = {}
    for role, path in sorted((inputs or {}).items()):
        if path and Path(path).is_file():
            hashes[role] = sha256_file(path)
    doc = {"version": __version__, "command": args.command, "flags": flags, "sha256": hashes}
    Path(f"{out}.manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def read_config(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment. Keys use flag spelling
    with or without leading dashes (``d-emb`` and ``d_emb`` both work)."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().lstrip("-").replace("-", "_")] = v.strip()
    return out


def _threads(n: int | None):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------- commands


def cmd_gen_corpus(args) -> None:
    from .exprtree import SamplerConfig
    from .numgen import generate_corpus, write_corpus

    cfg = SamplerConfig(d_max=args.d_max, b_max=args.b_max, u_max=args.u_max)
    recs = generate_corpus(args.n, args.seed, cfg, n_points=args.points, normalize_y=not args.raw_y, max_tokens=args.max_tokens, workers=args.workers)
    if args.props:
        from .numgen import record_to_pair
        from .properties import compute_properties

        for i, r in enumerate(recs):
            _, ds = record_to_pair(r)
            r["props"] = compute_properties(ds, rng=np.random.default_rng([args.seed, i]))
    write_corpus(args.out, recs)
    write_manifest(args.out, args)
    print(f"wrote {len(recs)} records to {args.out}")


def cmd_props(args) -> None:
    from .harness import load_dataset
    from .numgen import read_corpus, record_to_pair
    from .properties import PROPERTY_NAMES, compute_properties

    if args.csv:
        ds = load_dataset(args.csv)
        props = compute_properties(ds, rng=np.random.default_rng(args.seed))
        print(json.dumps(props, sort_keys=True))
        return
    if not args.corpus or not args.out:
        raise SystemExit("props: give --csv, or --corpus with --out")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + list(PROPERTY_NAMES))
        for i, rec in enumerate(read_corpus(args.corpus)):
            _, ds = record_to_pair(rec)
            p = compute_properties(ds, rng=np.random.default_rng([args.seed, i]))
            w.writerow([i] + [("" if k not in p else f"{p[k]:.8g}") for k in PROPERTY_NAMES])
    write_manifest(args.out, args)


def _encoder_cfg(args):
    from .encoders import EncoderConfig

    return EncoderConfig(d_emb=args.d_emb, n_layers=args.layers, n_heads=args.heads, max_dim=args.max_dim, max_symbolic_len=args.max_len)


def cmd_pretrain(args) -> None:
    from .exprtree import SamplerConfig
    from .numgen import read_corpus
    from .pretrain import PretrainConfig, pretrain_run

    cfg = PretrainConfig(
        batch_size=args.batch,
        temperature=args.tau,
        peak_lr=args.lr,
        warmup_steps=args.warmup,
        steps_per_epoch=args.steps,
        seed=args.seed,
        min_points=args.min_points,
        max_points=args.max_points,
        learn_temperature=args.learn_tau,
        sampler=SamplerConfig(d_max=args.d_max, b_max=args.b_max, u_max=args.u_max),
        encoder=_encoder_cfg(args),
    )
    corpus = list(read_corpus(args.corpus)) if args.corpus else None
    trainer = pretrain_run(cfg, corpus, out=args.out, metrics_path=args.metrics, log=_log)
    last = trainer.history[-1] if trainer.history else None
    write_manifest(args.out, args, {"checkpoint": args.out})
    if last:
        print(f"step {last.step} loss {last.loss:.4f} top1 {last.top1:.3f}")


def cmd_eval_retrieval(args) -> None:
    from .exprtree import SamplerConfig
    from .numgen import generate_pair, read_corpus, record_to_pair
    from .pretrain import load_dual_encoder, make_batch, retrieval_topk
    from . import tensorcore as tc

    model, config = load_dual_encoder(args.encoder)
    if args.corpus:
        pairs = [record_to_pair(r) for r in read_corpus(args.corpus)][: args.n]
    else:
        s = config.get("pretrain", {}).get("sampler", {})
        cfg = SamplerConfig(d_max=s.get("d_max", 3), b_max=s.get("b_max", 3), u_max=s.get("u_max", 2))
        rng = np.random.default_rng(args.seed)
        pairs = [generate_pair(rng, cfg, n_points=args.points, max_tokens=model.cfg.max_symbolic_len - 2) for _ in range(args.n)]
    with tc.no_grad():
        b = make_batch(pairs, model.cfg)
        zv = model.enc_v(b.tokens).data
        zs = model.enc_s(b.ids, b.valid).data
    res = {f"top{k}": retrieval_topk(zs, zv, k) for k in (1, 5) if k <= len(pairs)}
    print(json.dumps(res, sort_keys=True))


def cmd_train_property(args) -> None:
    from .encoders import EncoderConfig
    from .prophead import HeadConfig, labelled_corpus, train_property_model
    from . import tensorcore as tc

    arrays = None
    if args.encoder:
        arrays, config = tc.load_checkpoint(args.encoder)
        enc_cfg = EncoderConfig(**config["encoder"])
    else:
        enc_cfg = _encoder_cfg(args)
    mode_arrays = None if args.mode == "supervised" else arrays
    cfg = HeadConfig(hidden=args.hidden, mode=args.mode, prop=args.property, train_size=args.train_size, lr=args.lr, epochs=args.epochs, seed=args.seed)
    data = labelled_corpus(args.train_size + args.test_size, args.seed)
    res = train_property_model(data[: args.train_size], data[args.train_size :], cfg, enc_cfg, mode_arrays)
    line = {"mode": args.mode, "property": args.property, "train_size": args.train_size, "r2": round(res.r2, 6), "nmse": round(res.nmse, 6)}
    print(json.dumps(line, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(line, sort_keys=True) + "\n")
        write_manifest(args.out, args, {"encoder": args.encoder})


def cmd_train_sr(args) -> None:
    from .exprtree import SamplerConfig
    from .srgen import DecoderConfig, SRTrainConfig, save_sr_model, sr_batches, sr_model_from_encoder, train_sr
    from .encoders import EncoderConfig
    from . import tensorcore as tc

    arrays, config = tc.load_checkpoint(args.encoder)
    enc_cfg = EncoderConfig(**config["encoder"])
    dec_cfg = DecoderConfig(d_emb=enc_cfg.d_emb, n_layers=args.dec_layers, n_heads=enc_cfg.n_heads, prefix_len=args.prefix_len, max_len=enc_cfg.max_symbolic_len)
    cfg = SRTrainConfig(
        stage1_steps=args.stage1_steps,
        stage2_steps=args.stage2_steps,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        sampler=SamplerConfig(d_max=args.d_max, b_max=args.b_max, u_max=args.u_max),
    )
    if args.d_max > enc_cfg.max_dim:
        raise SystemExit(f"train-sr: --d-max {args.d_max} exceeds the encoder's max_dim={enc_cfg.max_dim}")
    model = sr_model_from_encoder(arrays, enc_cfg, dec_cfg, args.seed)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 2]))
    losses = train_sr(model, sr_batches(cfg, enc_cfg.max_symbolic_len - 2, rng), cfg, log=_log)
    save_sr_model(args.out, model, {"train": cfg.to_dict()})
    write_manifest(args.out, args, {"encoder": args.encoder, "checkpoint": args.out})
    if losses:
        print(f"final loss {losses[-1]:.4f}")


def _lso_cfg(args):
    from .lso import LsoConfig

    return LsoConfig(b=args.b, iterations=args.iterations, r2_stop=args.r2_stop, temperature=args.temperature, seed=args.seed)


def cmd_regress(args) -> None:
    from .exprtree import pretty
    from .harness import load_dataset
    from .lso import regress
    from .srgen import load_sr_model

    model = load_sr_model(args.model)
    ds = load_dataset(args.csv)
    res = regress(ds, model, use_lso=args.lso, cfg=_lso_cfg(args))
    if res.expression is None:
        print("no valid expression found")
    else:
        print(f"expression: {pretty(res.expression)}")
        print(f"r2: {res.train_r2:.6f}")
        print(f"complexity: {res.complexity}")
    if args.trace and res.lso is not None:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "best_r2"])
            for i, v in enumerate(res.lso.trace, 1):
                w.writerow([i, f"{v:.10g}"])


def cmd_evaluate(args) -> None:
    from .harness import GROUND_TRUTH, evaluate_suite, solution_rate, write_records
    from .lso import regress
    from .srgen import load_sr_model

    model = load_sr_model(args.model)
    too_wide = [g.name for g in GROUND_TRUTH if g.dim > model.enc_cfg.max_dim]
    if too_wide:
        raise SystemExit(f"evaluate: model max_dim={model.enc_cfg.max_dim} cannot take {', '.join(too_wide)}")
    lcfg = _lso_cfg(args)

    def fit(ds):
        r = regress(ds, model, use_lso=args.lso, cfg=lcfg)
        return r.expression, r.complexity

    method = "symnum-lso" if args.lso else "symnum"
    records = []
    for gamma in args.gamma:
        recs = evaluate_suite(fit, method, gamma=gamma, seed=args.seed, n_points=args.points, timed=args.timed)
        records += recs
        _log(f"gamma {gamma}: solution rate {solution_rate([r.r2 for r in recs]):.3f}")
    write_records(args.out, records, timed=args.timed)
    write_manifest(args.out, args, {"model": args.model})
    for gamma in args.gamma:
        r2s = [r.r2 for r in records if r.gamma == gamma]
        print(f"gamma={gamma} solution_rate={solution_rate(r2s):.4f} median_r2={float(np.median(r2s)):.6f}")


def cmd_export_embeddings(args) -> None:
    from .harness import export_embeddings
    from .numgen import read_corpus
    from .pretrain import load_dual_encoder

    model, _ = load_dual_encoder(args.encoder)
    n = export_embeddings(list(read_corpus(args.corpus)), model, args.out, args.modality)
    write_manifest(args.out, args, {"encoder": args.encoder})
    print(f"wrote {n} rows to {args.out}")


def cmd_interp_demo(args) -> None:
    from .encoders import encode_numeric
    from .exprtree import pretty
    from .harness import GROUND_TRUTH
    from .srgen import generate_candidates, load_sr_model, refine_constants

    model = load_sr_model(args.model)
    by_name = {g.name: g for g in GROUND_TRUTH}
    a, b = by_name[args.source], by_name[args.target]
    if a.dim != b.dim:
        raise SystemExit("interp-demo: both functions need the same dimension")
    rng = np.random.default_rng(args.seed)
    da, db = a.sample(args.points, rng), b.sample(args.points, rng)
    za, zb = encode_numeric([da, db], model.enc_v)
    for k in range(args.steps + 1):
        lam = k / args.steps
        z = (1 - lam) * za + lam * zb
        cands = generate_candidates(model, z, a.dim, b=1, temperature=0.0, rng=rng)
        text = pretty(cands[0].expression) if cands else "<none>"
        print(f"{lam:.2f}\t{text}")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="symnum", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="limit BLAS threads (1 for bitwise reproducibility)")
    p.add_argument("--config", default=None, help="key=value file overriding defaults")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp):
        sp.add_argument("--d-emb", type=int, default=32)
        sp.add_argument("--layers", type=int, default=2)
        sp.add_argument("--heads", type=int, default=4)
        sp.add_argument("--max-dim", type=int, default=3)
        sp.add_argument("--max-len", type=int, default=64)

    def sampler_flags(sp, d=3, b=3, u=2):
        sp.add_argument("--d-max", type=int, default=d)
        sp.add_argument("--b-max", type=int, default=b)
        sp.add_argument("--u-max", type=int, default=u)

    sp = sub.add_parser("gen-corpus", help="sample (expression, dataset) pairs to JSONL")
    sp.add_argument("--n", "--n-samples", dest="n", type=int, default=1000)
    sp.add_argument("--out", required=True)
    sp.add_argument("--points", "--n-points", dest="points", type=int, default=50)
    sp.add_argument("--raw-y", action="store_true", help="keep targets unnormalized (regression mode)")
    sp.add_argument("--max-tokens", type=int, default=62)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--props", action="store_true", help="attach property labels to 1-D records")
    sampler_flags(sp)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("props", help="property labels for a CSV dataset or a corpus")
    sp.add_argument("--csv")
    sp.add_argument("--corpus")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_props)

    sp = sub.add_parser("pretrain", help="contrastive pretraining of the dual encoders")
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--warmup", type=int, default=100)
    sp.add_argument("--tau", type=float, default=0.1)
    sp.add_argument("--learn-tau", action="store_true")
    sp.add_argument("--min-points", type=int, default=20)
    sp.add_argument("--max-points", type=int, default=64)
    sp.add_argument("--corpus", help="train on a fixed JSONL corpus instead of fresh pairs")
    sp.add_argument("--metrics", help="CSV of step, loss, top1, lr")
    sp.add_argument("--out", required=True)
    model_flags(sp)
    sampler_flags(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("eval-retrieval", help="top-k retrieval of a pretrained encoder pair")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--points", type=int, default=50)
    sp.add_argument("--corpus")
    sp.set_defaults(func=cmd_eval_retrieval)

    sp = sub.add_parser("train-property", help="property prediction head")
    sp.add_argument("--property", choices=["ncr", "up", "osc", "meany"], default="ncr")
    sp.add_argument("--mode", choices=["supervised", "frozen", "finetuned"], default="frozen")
    sp.add_argument("--encoder")
    sp.add_argument("--train-size", type=int, default=1000)
    sp.add_argument("--test-size", type=int, default=200)
    sp.add_argument("--hidden", type=int, default=128)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--out")
    model_flags(sp)
    sp.set_defaults(func=cmd_train_property)

    sp = sub.add_parser("train-sr", help="two-stage training of the expression decoder")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--stage1-steps", type=int, default=1000)
    sp.add_argument("--stage2-steps", type=int, default=1000)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--dec-layers", type=int, default=4)
    sp.add_argument("--prefix-len", type=int, default=8)
    sp.add_argument("--out", required=True)
    sampler_flags(sp)
    sp.set_defaults(func=cmd_train_sr)

    def search_flags(sp):
        sp.add_argument("--lso", action="store_true", help="search the latent space instead of one decoding pass")
        sp.add_argument("--b", type=int, default=2)
        sp.add_argument("--iterations", type=int, default=80)
        sp.add_argument("--r2-stop", type=float, default=0.99)
        sp.add_argument("--temperature", type=float, default=0.7)

    sp = sub.add_parser("regress", help="fit an expression to a CSV dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--csv", required=True)
    sp.add_argument("--trace", help="CSV of best R^2 per LSO iteration")
    search_flags(sp)
    sp.set_defaults(func=cmd_regress)

    sp = sub.add_parser("evaluate", help="run the bundled ground-truth suite")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gamma", type=float, nargs="+", default=[0.0])
    sp.add_argument("--points", type=int, default=100)
    sp.add_argument("--timed", action="store_true", help="add a wall-time column (not reproducible)")
    search_flags(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("export-embeddings", help="latent vectors plus property labels as CSV")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--modality", choices=["numeric", "symbolic"], default="numeric")
    sp.set_defaults(func=cmd_export_embeddings)

    sp = sub.add_parser("interp-demo", help="decode convex combinations of two dataset latents")
    sp.add_argument("--model", required=True)
    sp.add_argument("--source", default="gt02_quadratic")
    sp.add_argument("--target", default="gt06_exp")
    sp.add_argument("--steps", type=int, default=4)
    sp.add_argument("--points", type=int, default=50)
    sp.set_defaults(func=cmd_interp_demo)

    # --seed is accepted after the command name as well
    for choice in sub.choices.values():
        choice.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config(known.config)
    parsers = [parser] + [a for act in parser._subparsers._group_actions for a in act.choices.values()]
    used = set()
    for sp in parsers:
        for action in sp._actions:
            if action.default is argparse.SUPPRESS:  # help/version and the per-command --seed
                continue
            if action.dest in values:
                raw = values[action.dest]
                if action.nargs in ("+", "*"):
                    val = [action.type(v) if action.type else v for v in raw.split(",")]
                elif action.const is True:  # store_true
                    val = raw.lower() in ("1", "true", "yes", "on")
                else:
                    val = action.type(raw) if action.type else raw
                sp.set_defaults(**{action.dest: val})
                used.add(action.dest)
    unknown = set(values) - used
    if unknown:
        raise SystemExit(f"{known.config}: unknown keys {sorted(unknown)}")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    _apply_config(parser, argv)
    args = parser.parse_args(argv)
    with _threads(args.threads):
        args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
