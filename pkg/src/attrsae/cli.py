"""Command-line entry point: ``attrsae <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

import numpy as np

from . import formats
from .core import decode_batch, encode_batch, codes_from_dense
from .domain import AttrSaeError, DimensionMismatch, TrainConfig
from .steering import SteerRequest, extract_direction_rows, manipulate_rows
from .synth import disentanglement_score, gen_corpus, gen_dictionary, match_atoms
from .trainer import NonFiniteGradient, NonFiniteLoss, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_DEFAULTS = TrainConfig()


def _emit(**pairs) -> None:
    for key, value in pairs.items():
        print(f"{key}={value}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated reals, got {text!r}") from e


def _check_d(model_d: int, data: np.ndarray, what: str) -> None:
    if data.shape[1] != model_d:
        raise DimensionMismatch(f"model has d={model_d}, {what} has d={data.shape[1]}")


def cmd_gen_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dictionary = gen_dictionary(args.d, args.p, args.skew, args.seed, orthogonal=args.orthogonal)
    corpus_seed = args.seed + 1 if args.corpus_seed is None else args.corpus_seed
    X, codes = gen_corpus(
        dictionary, args.s, args.n, args.noise, (args.coeff_min, args.coeff_max), corpus_seed
    )
    formats.write_dictionary(out / "dictionary.atsd", dictionary)
    formats.write_embeddings(out / "corpus.atse", X)
    formats.write_codes(out / "codes.atsc", codes, dictionary.p)
    _emit(n=args.n, d=args.d, p=args.p, s=args.s,
          max_abs_cosine=f"{dictionary.max_abs_cosine():.6f}", out_dir=out)
    return EXIT_OK


def cmd_train(args) -> int:
    data = formats.read_embeddings(args.data)
    if args.d is not None and args.d != data.shape[1]:
        raise DimensionMismatch(f"--d {args.d} but {args.data} has d={data.shape[1]}")
    cfg = TrainConfig(
        k=args.k, k_aux=args.k_aux, alpha=args.alpha, learning_rate=args.lr,
        batch_size=args.batch, total_steps=args.steps, dead_window=args.dead_window,
        seed=args.seed, normalize_decoder=args.normalize_decoder,
        masked_aux=not args.unmasked_aux, m=args.m,
    )

    def on_step(rec, model):
        done = rec.step + 1
        if args.log_every and (done % args.log_every == 0 or done == cfg.total_steps):
            print(rec.log_line(), flush=True)
        if args.checkpoint_every and done % args.checkpoint_every == 0:
            formats.save_checkpoint(args.out, model, cfg)

    report = train(data, cfg, callback=on_step)
    formats.save_checkpoint(args.out, report.model, cfg)
    _emit(steps=len(report.records), d=report.model.d, m=report.model.m,
          dead_fraction=f"{report.dead_fraction:.6f}", out=args.out)
    return EXIT_OK


def cmd_encode(args) -> int:
    model, cfg = formats.load_checkpoint(args.model)
    data = formats.read_embeddings(args.data)
    _check_d(model.d, data, args.data)
    k = args.k or cfg.k
    codes = codes_from_dense(encode_batch(model, data, k))
    formats.write_codes(args.out, codes, model.m)
    _emit(n=len(codes), k=k, mean_nnz=f"{np.mean([c.nnz for c in codes]):.4f}", out=args.out)
    return EXIT_OK


def cmd_decode(args) -> int:
    model, _ = formats.load_checkpoint(args.model)
    codes, m = formats.read_codes(args.codes)
    if m != model.m:
        raise DimensionMismatch(f"model has m={model.m}, codes have m={m}")
    Z = np.zeros((len(codes), m), dtype=model.dtype)
    for i, c in enumerate(codes):
        Z[i, c.indices] = c.coefficients
    X = decode_batch(model, Z)
    formats.write_embeddings(args.out, X)
    _emit(n=len(codes), out=args.out)
    return EXIT_OK


def _load_direction(model, cfg, path, per_row):
    rows = formats.read_embeddings(path)
    _check_d(model.d, rows, path)
    return extract_direction_rows(model, rows, cfg.k, label=Path(path).stem, per_row=per_row)


def cmd_steer(args, parser) -> int:
    if len(args.attr) != len(args.lam):
        parser.error("every --attr needs exactly one matching --lambda")
    model, cfg = formats.load_checkpoint(args.model)
    data = formats.read_embeddings(args.data)
    _check_d(model.d, data, args.data)
    entries = [
        (_load_direction(model, cfg, path, args.per_row), lam)
        for path, lam in zip(args.attr, args.lam)
    ]
    req = SteerRequest(tuple(entries))
    formats.write_embeddings(args.out, manipulate_rows(model, data, req))
    for direction, lam in req.directions:
        _emit(attr=direction.label, **{"lambda": lam}, nnz=direction.code.nnz)
    _emit(n=data.shape[0], out=args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, cfg = formats.load_checkpoint(args.model)
    data = formats.read_embeddings(args.data)
    _check_d(model.d, data, args.data)
    direction = _load_direction(model, cfg, args.attr, args.per_row)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, lam in enumerate(args.lambdas):
        steered = manipulate_rows(model, data, SteerRequest.single(direction, lam))
        path = out / f"sweep_{i:03d}.atse"
        formats.write_embeddings(path, steered)
        _emit(index=i, **{"lambda": lam}, out=path)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = formats.load_checkpoint(args.model)
    dictionary = formats.read_dictionary(args.dict)
    corpus = formats.read_embeddings(args.corpus) if args.corpus else None
    if corpus is not None:
        _check_d(model.d, corpus, args.corpus)
    report = match_atoms(model, dictionary, args.threshold, data=corpus, k=cfg.k)
    score = disentanglement_score(model, dictionary, args.probes, cfg.k, args.seed, args.threshold)
    for line in report.lines():
        print(line)
    _emit(disentanglement_score=f"{score:.6f}")
    return EXIT_OK


def cmd_import_npy(args) -> int:
    arr = formats.import_npy(args.npy, args.out)
    _emit(n=arr.shape[0], d=arr.shape[1], out=args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrsae", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a planted-dictionary corpus")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--p", type=int, required=True)
    g.add_argument("--s", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--skew", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corpus-seed", type=int, default=None)
    g.add_argument("--coeff-min", type=float, default=0.5)
    g.add_argument("--coeff-max", type=float, default=2.0)
    g.add_argument("--orthogonal", action="store_true")
    g.add_argument("--out-dir", required=True)

    t = sub.add_parser("train", help="train a top-k SAE on an embedding file")
    t.add_argument("--data", required=True)
    t.add_argument("--d", type=int, default=None, help="expected embedding width")
    t.add_argument("--m", type=int, default=None, help="latent width (default 16*d)")
    t.add_argument("--k", type=int, default=_DEFAULTS.k)
    t.add_argument("--k-aux", type=int, default=_DEFAULTS.k_aux)
    t.add_argument("--alpha", type=float, default=_DEFAULTS.alpha)
    t.add_argument("--lr", type=float, default=_DEFAULTS.learning_rate)
    t.add_argument("--batch", type=int, default=_DEFAULTS.batch_size)
    t.add_argument("--steps", type=int, default=_DEFAULTS.total_steps)
    t.add_argument("--seed", type=int, default=_DEFAULTS.seed)
    t.add_argument("--dead-window", type=int, default=_DEFAULTS.dead_window)
    t.add_argument("--normalize-decoder", action="store_true")
    t.add_argument("--unmasked-aux", action="store_true")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--out", required=True)

    e = sub.add_parser("encode", help="encode embeddings to sparse codes")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=int, default=None, help="override the checkpoint's k")
    e.add_argument("--out", required=True)

    dcd = sub.add_parser("decode", help="decode sparse codes to embeddings")
    dcd.add_argument("--model", required=True)
    dcd.add_argument("--codes", required=True)
    dcd.add_argument("--out", required=True)

    s = sub.add_parser("steer", help="add scaled attribute directions to embeddings")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--attr", action="append", required=True)
    s.add_argument("--lambda", dest="lam", action="append", type=float, required=True)
    s.add_argument("--per-row", action="store_true", help="average per-row codes of --attr")
    s.add_argument("--out", required=True)

    w = sub.add_parser("sweep", help="steer one direction at several strengths")
    w.add_argument("--model", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--attr", required=True)
    w.add_argument("--lambdas", type=_floats, required=True)
    w.add_argument("--per-row", action="store_true")
    w.add_argument("--out-dir", required=True)

    v = sub.add_parser("eval", help="score a model against a planted dictionary")
    v.add_argument("--model", required=True)
    v.add_argument("--dict", required=True)
    v.add_argument("--corpus", default=None)
    v.add_argument("--threshold", type=float, default=0.9)
    v.add_argument("--probes", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("import-npy", help="convert a .npy array to an embedding file")
    i.add_argument("--npy", required=True)
    i.add_argument("--out", required=True)
    return p


def _thread_limit():
    raw = os.environ.get("ATTRSAE_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "gen-synth": cmd_gen_synth,
        "train": cmd_train,
        "encode": cmd_encode,
        "decode": cmd_decode,
        "steer": lambda a: cmd_steer(a, parser),
        "sweep": cmd_sweep,
        "eval": cmd_eval,
        "import-npy": cmd_import_npy,
    }
    try:
        with _thread_limit():
            return handlers[args.command](args)
    except SystemExit as e:
        return int(e.code or 0)
    except (NonFiniteLoss, NonFiniteGradient) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AttrSaeError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
