"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig
from .corpus import (
    CorpusError,
    PairBatch,
    Vocab,
    build_vocab,
    decode_batch,
    encode_batch,
    parse_pairs,
    read_lines,
)
from .diagnostics import ProbeError, Tracker
from .metrics import EstimatorError, EvalReport, corpus_bleu, distinct_n, mi_estimate, nll_and_kl, perplexity, recon_bleu
from .posterior import NumericalError
from .synthetic import dialogue_splits, lm_splits
from .training import build_model, forward_for, train

log = logging.getLogger("coupledvae")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
PATH_KEYS = ("train_path", "valid_path", "test_path", "vocab_path")


# -- config, data and model loading ------------------------------------------


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    cfg = RunConfig.load(path)
    changes = {}
    for key in PATH_KEYS:
        value = getattr(cfg, key)
        if value and not Path(value).is_absolute():
            changes[key] = str(path.parent / value)
    if seed is not None:
        changes["seed"] = seed
    return cfg.replace(**changes).validate(check_paths=True)


def split_lines(text_lines: list[str], task: str) -> list[str]:
    """Every text in a split, posts and responses alike for dialogue data."""
    if task == "dialogue":
        return [s for pair in parse_pairs(text_lines) for s in pair]
    return text_lines


def make_vocab(cfg: RunConfig) -> Vocab:
    if cfg.vocab_path:
        return Vocab.load(cfg.vocab_path)
    if not cfg.train_path:
        raise ConfigError("need train_path or vocab_path to build a vocabulary")
    return build_vocab(split_lines(read_lines(cfg.train_path), cfg.task), cfg.vocab_cap, cfg.lowercase)


def encode_split(lines: list[str], cfg: RunConfig, vocab: Vocab):
    if cfg.task == "dialogue":
        pairs = parse_pairs(lines)
        return PairBatch(
            encode_batch([p for p, _ in pairs], vocab, cfg.max_len, cfg.lowercase),
            encode_batch([r for _, r in pairs], vocab, cfg.max_len, cfg.lowercase),
        )
    return encode_batch(lines, vocab, cfg.max_len, cfg.lowercase)


def load_split(path, cfg: RunConfig, vocab: Vocab):
    lines = read_lines(path)
    if not lines:
        raise CorpusError(f"{path} contains no texts")
    return encode_split(lines, cfg, vocab)


def restore(path):
    """(checkpoint, model) with parameters upconverted from the f32 payload."""
    ck = ckpt_io.load(path)
    model = build_model(ck.config, len(ck.vocab), np.random.default_rng(0))
    model.load_state_dict(ck.state)
    return ck, model


def n_tokens(data) -> int:
    target = data.response if isinstance(data, PairBatch) else data
    return int(target.lengths.sum())


def write_lines(path: Path, lines) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{line}\n" for line in lines)


def distinct_text(texts: list[list[str]]) -> str:
    return f"dist1={distinct_n(texts, 1)!r}\ndist2={distinct_n(texts, 2)!r}\n"


# -- commands -----------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    out = Path(args.out)
    if args.synthetic:
        splits = lm_splits(args.seed) if args.synthetic == "lm" else dialogue_splits(args.seed)
        task = "dialogue" if args.synthetic == "dialogue" else "lm"
    else:
        if not args.train:
            raise ConfigError("prepare-data needs --train or --synthetic")
        splits = {"train": read_lines(args.train)}
        for name in ("valid", "test"):
            if getattr(args, name):
                splits[name] = read_lines(getattr(args, name))
        task = args.task
    for name, lines in splits.items():
        write_lines(out / f"{name}.txt", lines)
    vocab = build_vocab(split_lines(splits["train"], task), args.vocab_cap)
    vocab.save(out / "vocab.txt")
    cfg = RunConfig(
        task=task,
        vocab_cap=args.vocab_cap,
        max_len=args.max_len,
        train_path="train.txt",
        valid_path="valid.txt" if "valid" in splits else "",
        test_path="test.txt" if "test" in splits else "",
        vocab_path="vocab.txt",
        seed=args.seed,
    )
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    print(f"wrote {len(splits)} splits, vocab of {len(vocab)} and config.txt to {out}")
    return EXIT_OK


def _tracking_batch(cfg: RunConfig, vocab: Vocab, fallback):
    source = load_split(cfg.valid_path, cfg, vocab) if cfg.valid_path else fallback
    return source.take(np.arange(min(cfg.track_rows, len(source))))


def _train_one(cfg: RunConfig, out: Path, vocab: Vocab, track_path: Path | None = None):
    train_data = load_split(cfg.train_path, cfg, vocab)
    valid_data = load_split(cfg.valid_path, cfg, vocab) if cfg.valid_path else None
    tracker = None
    if track_path is not None and cfg.track_every > 0:
        tracker = Tracker(track_path, _tracking_batch(cfg, vocab, train_data), cfg.track_every, cfg.seed, forward_for(cfg))
    out.mkdir(parents=True, exist_ok=True)
    fields = ["step", "rec", "reg_raw", "reg_weighted", "rec_c", "match", "total", "kl_weight"]
    log_fh = open(out / "train_log.csv", "w", encoding="utf-8", newline="")
    writer = csv.writer(log_fh, lineterminator="\n")
    writer.writerow(fields)

    def on_step(step, losses):
        d = losses.to_dict()
        writer.writerow([step] + [repr(float(d[k])) for k in fields[1:]])

    def on_crash(model, step):
        ckpt_io.save(out / "crash.ckpt", Checkpoint(cfg, model.state_dict(), vocab.itos, step, extra={"crash": True}))

    try:
        result = train(cfg, train_data, valid_data, len(vocab), tracker=tracker, on_step=on_step, on_crash=on_crash)
    finally:
        log_fh.close()
    ckpt_io.save(out / "final.ckpt", Checkpoint(cfg, result.model.state_dict(), vocab.itos, result.steps_done))
    if result.best_state is not None:
        ckpt_io.save(out / "best.ckpt", Checkpoint(cfg, result.best_state, vocab.itos, result.best_step))
        write_lines(out / "valid.csv", ["step,nll"] + [f"{s},{v!r}" for s, v in result.valid_trace])
    return result


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    if not cfg.train_path:
        raise ConfigError("train_path is required for training")
    out = Path(args.out)
    vocab = make_vocab(cfg)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    result = _train_one(cfg, out, vocab, out / "dynamics.csv")
    last = result.history[-1]
    print(f"trained {result.steps_done} steps; final total={last.total:.4f} rec={last.rec:.4f} reg={last.reg_raw:.4f}")
    if result.best_step is not None:
        print(f"best validation nll {min(v for _, v in result.valid_trace):.4f} at step {result.best_step}")
    return EXIT_OK


def cmd_dynamics(args) -> int:
    base = load_config(args.config, args.seed)
    if base.track_every <= 0:
        base = base.replace(track_every=100)
    out = Path(args.out)
    vocab = make_vocab(base)
    for mode in ("dae", "vae", "coupled"):
        cfg = base.replace(mode=mode)
        _train_one(cfg, out / mode, vocab, out / f"{mode}.csv")
        print(f"{mode}: curve written to {out / (mode + '.csv')}")
    return EXIT_OK


def _check_family(ck: Checkpoint, args) -> RunConfig:
    cfg = ck.config
    if args.config:
        other = load_config(args.config)
        if other.family != cfg.family or other.task != cfg.task:
            raise ConfigError(
                f"checkpoint holds a {cfg.family}/{cfg.task} model but the config asks for {other.family}/{other.task}"
            )
        cfg = cfg.replace(test_path=other.test_path or cfg.test_path)
    return cfg


def cmd_eval(args) -> int:
    ck, model = restore(args.checkpoint)
    cfg = _check_family(ck, args)
    vocab = Vocab(ck.vocab)
    test_path = args.test or cfg.test_path
    if not test_path:
        raise ConfigError("no test data: pass --test or set test_path")
    data = load_split(test_path, cfg, vocab)
    n_is = args.n if args.n is not None else cfg.eval_samples
    m_agg = args.m if args.m is not None else cfg.mi_contrast
    if m_agg > len(data) - 1:
        log.warning("MI contrast size %d exceeds the %d other test texts; using %d", m_agg, len(data) - 1, len(data) - 1)
        m_agg = len(data) - 1
    seed = cfg.seed if args.seed is None else args.seed
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]

    nll, kl = nll_and_kl(model, data, n_is, rngs[0])
    tokens = n_tokens(data)
    params = model.encode_params(data)
    mi = mi_estimate(model.posterior, params, cfg.mi_samples, m_agg, rngs[1]) if m_agg >= 2 else float("nan")
    if cfg.task == "dialogue":
        out_ids = model.respond(data.post, "sample", rngs[2], cfg.gen_len)
        hyps = [vocab.decode(r) for r in out_ids]
        bleu1, bleu2 = corpus_bleu(hyps, [vocab.decode(r) for r in data.response.ids], 2)
        gen = hyps
        bleu_k = 1
    else:
        bleu1, bleu2 = recon_bleu(model, data, vocab, cfg.bleu_samples, rngs[2], cfg.gen_len)
        z = model.posterior.prior_sample(cfg.sample_count, rngs[3])
        gen = [vocab.decode(r) for r in model.decode_codes(z, cfg.gen_len)]
        bleu_k = cfg.bleu_samples
    report = EvalReport(
        nll=float(np.mean(nll)),
        kl=float(np.mean(kl)),
        ppl=perplexity(nll, tokens),
        mi=float(mi),
        bleu1=bleu1,
        bleu2=bleu2,
        dist1=distinct_n(gen, 1),
        dist2=distinct_n(gen, 2),
        n_is=n_is,
        m_agg=m_agg,
        n_texts=len(data),
        n_tokens=tokens,
        n_mi=cfg.mi_samples,
        bleu_k=bleu_k,
        n_gen=len(gen),
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return EXIT_OK


def _require_lm(ck: Checkpoint, command: str) -> None:
    if ck.config.task != "lm":
        raise ConfigError(f"{command} needs a language-model checkpoint; use respond for dialogue models")


def cmd_sample(args) -> int:
    ck, model = restore(args.checkpoint)
    _require_lm(ck, "sample")
    cfg = ck.config
    count = args.count if args.count is not None else cfg.sample_count
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng(cfg.seed if args.seed is None else args.seed)
    vocab = Vocab(ck.vocab)
    z = model.posterior.prior_sample(count, rng)
    texts = [vocab.decode(r) for r in model.decode_codes(z, cfg.gen_len)]
    out = Path(args.out)
    write_lines(out / "samples.txt", (" ".join(t) for t in texts))
    report = distinct_text(texts)
    (out / "distinct.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    ck, model = restore(args.checkpoint)
    _require_lm(ck, "reconstruct")
    cfg = ck.config
    vocab = Vocab(ck.vocab)
    data = load_split(args.input, cfg, vocab)
    codes = model.posterior.code_np(model.encode_params(data))
    recon = decode_batch(model.decode_codes(codes, cfg.gen_len), vocab)
    rng = np.random.default_rng(cfg.seed if args.seed is None else args.seed)
    b1, b2 = recon_bleu(model, data, vocab, args.k, rng, cfg.gen_len)
    out = Path(args.out)
    write_lines(out / "reconstructions.txt", recon)
    report = f"bleu1={b1!r}\nbleu2={b2!r}\nk={args.k}\n"
    (out / "bleu.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_OK


def interpolate_codes(a: np.ndarray, b: np.ndarray, steps: int, spherical: bool) -> np.ndarray:
    """``steps`` codes from a to b inclusive; great-circle path when ``spherical``."""
    if steps < 2:
        raise ConfigError("steps must be >= 2")
    ts = np.linspace(0.0, 1.0, steps)
    if not spherical:
        return np.stack([(1 - t) * a + t * b for t in ts])
    omega = math.acos(float(np.clip(np.dot(a, b), -1.0, 1.0)))
    if omega < 1e-12:
        return np.stack([a for _ in ts])
    return np.stack([(math.sin((1 - t) * omega) * a + math.sin(t * omega) * b) / math.sin(omega) for t in ts])


def interpolate(model, vocab: Vocab, cfg: RunConfig, text_a: str, text_b: str, steps: int) -> list[str]:
    data = encode_batch([text_a, text_b], vocab, cfg.max_len, cfg.lowercase)
    codes = model.posterior.code_np(model.encode_params(data))
    path = interpolate_codes(codes[0], codes[1], steps, cfg.family == "vmf")
    return decode_batch(model.decode_codes(path, cfg.gen_len), vocab)


def cmd_interpolate(args) -> int:
    ck, model = restore(args.checkpoint)
    _require_lm(ck, "interpolate")
    texts = interpolate(model, Vocab(ck.vocab), ck.config, args.a, args.b, args.steps)
    if args.out:
        write_lines(Path(args.out) / "interpolation.txt", texts)
    print("\n".join(texts))
    return EXIT_OK


def cmd_respond(args) -> int:
    ck, model = restore(args.checkpoint)
    cfg = ck.config
    if cfg.task != "dialogue":
        raise ConfigError("respond needs a dialogue checkpoint")
    vocab = Vocab(ck.vocab)
    lines = read_lines(args.input)
    posts = [line.split("\t", 1)[0] for line in lines]
    batch = encode_batch(posts, vocab, cfg.max_len, cfg.lowercase)
    rng = np.random.default_rng(cfg.seed if args.seed is None else args.seed)
    texts = [vocab.decode(r) for r in model.respond(batch, args.mode, rng, cfg.gen_len)]
    out = Path(args.out)
    write_lines(out / "responses.txt", (" ".join(t) for t in texts))
    report = distinct_text(texts)
    (out / "distinct.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coupledvae", description="Coupled VAE text models on numpy.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=False, checkpoint=False, out_required=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if config:
            p.add_argument("--config", required=True, help="flat key = value config file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", required=out_required, default=None, help="output directory")
        return p

    p = add("prepare-data", cmd_prepare_data, "write splits, vocabulary and a starter config")
    p.add_argument("--synthetic", choices=("lm", "dialogue"))
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--task", choices=("lm", "dialogue"), default="lm")
    p.add_argument("--vocab-cap", type=int, default=10000)
    p.add_argument("--max-len", type=int, default=16)
    p.set_defaults(seed=0)

    add("train", cmd_train, "train one model", config=True)
    add("dynamics", cmd_dynamics, "train DAE, VAE and coupled runs with gradient tracking", config=True)

    p = add("eval", cmd_eval, "NLL, KL, PPL, MI, BLEU and Distinct-n report", checkpoint=True, out_required=False)
    p.add_argument("--config", help="optional config; its family must match the checkpoint")
    p.add_argument("--test", help="test file (defaults to the config test_path)")
    p.add_argument("--n", type=int, help="importance samples per text")
    p.add_argument("--m", type=int, help="MI contrast texts")

    p = add("sample", cmd_sample, "decode texts from prior samples", checkpoint=True)
    p.add_argument("--count", type=int)

    p = add("reconstruct", cmd_reconstruct, "decode posterior codes of input texts", checkpoint=True)
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, default=10, help="posterior samples per text for BLEU")

    p = add("interpolate", cmd_interpolate, "decode along the path between two texts' codes", checkpoint=True, out_required=False)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--steps", type=int, default=5)

    p = add("respond", cmd_respond, "generate one response per post", checkpoint=True)
    p.add_argument("--input", required=True, help="posts, one per line (TSV pairs are accepted)")
    p.add_argument("--mode", choices=("sample", "greedy"), default="sample")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CorpusError, CheckpointError, EstimatorError, ProbeError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
