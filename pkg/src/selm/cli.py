"""Command-line surface: keygen, pretrain, encrypt, decrypt, gen-corpus,
attack and calibrate subcommands over a flat key=value config file with
flag overrides (flags win).

Exit codes: 0 success, 1 I/O or internal error, 2 usage/config error,
3 encryption budget exhausted, 4 model checkpoint mismatch.  Errors print
one machine-parsable line `error=<Class>: <message>` on stderr.  Output
files are written atomically (temp file + rename).  Randomness flows from
--seed (or SELM_SEED) where reproducibility is wanted; keygen and nonce
sampling use OS entropy unless --insecure-seed is given.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from random import Random

import numpy as np

from . import attack, cipher, corpus, lm, training

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_BUDGET = 3
EXIT_MODEL_MISMATCH = 4


class ConfigError(ValueError):
    """Bad key=value config contents."""


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment; later keys win."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def atomic_write(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".selm-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _seed_from(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SELM_SEED")
    return int(env) if env else None


def _load_key(path) -> cipher.SecretKey:
    with open(path, "rb") as fh:
        return cipher.SecretKey(fh.read())


def _train_config_from(args, overrides: dict | None = None) -> training.TrainConfig:
    cfg = dict(overrides or {})
    reg_kind = getattr(args, "reg", None) or cfg.get("reg", "none")
    reg = training.RegularizerConfig(
        kind=reg_kind,
        alpha=float(cfg.get("reg.alpha", 0.0)),
        sigma=float(cfg.get("reg.sigma", 0.0)),
        lambda_max=float(cfg.get("reg.lambda_max", 0.0)),
        warmup_epochs=int(cfg.get("reg.warmup_epochs", 1)),
    )
    return training.TrainConfig(
        d=int(getattr(args, "d", None) or cfg.get("d", 1024)),
        lr0=float(cfg.get("lr0", 3e-5)),
        lr_decay_epochs=int(cfg.get("lr_decay_epochs", 2000)),
        grad_clip_l2=float(cfg.get("grad_clip_l2", 1e5)),
        max_epochs=int(getattr(args, "max_epochs", None) or cfg.get("max_epochs", 10000)),
        verify_every=int(cfg.get("verify_every", 1)),
        regularizer=reg,
        seed=int(cfg.get("train_seed", 0)),
    )


def cmd_keygen(args) -> int:
    if args.insecure_seed is not None:
        key = cipher.SecretKey(Random(args.insecure_seed).randbytes(32))
    else:
        key = cipher.keygen()
    atomic_write(args.out, key.data)
    os.chmod(args.out, 0o600)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    with open(args.corpus, "rb") as fh:
        text = fh.read()
    config = lm.ModelConfig(
        context_len=args.context_len,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_model=args.d_model,
        d_ff=args.d_ff,
    )
    seed = _seed_from(args) or 0
    params = lm.pretrain(
        config, text, args.steps, seed, batch_size=args.batch_size
    )
    atomic_write(args.out, lm._encode_checkpoint(config, params))
    print(f"wrote {args.out} D={lm.n_params(config)}")
    return EXIT_OK


def cmd_encrypt(args) -> int:
    key = _load_key(args.key)
    model = lm.load_checkpoint(args.model)
    with open(args.infile, "rb") as fh:
        message = fh.read()
    overrides = parse_config_file(args.config) if args.config else {}
    tc = _train_config_from(args, overrides)
    rng = Random(args.insecure_seed) if args.insecure_seed is not None else None
    ct = cipher.encrypt(key, message, model, tc, rng=rng)
    atomic_write(args.out, cipher.serialize_ciphertext(ct))
    print(f"wrote {args.out} d={ct.d} chunks={len(ct.chunks)}")
    return EXIT_OK


def cmd_decrypt(args) -> int:
    key = _load_key(args.key)
    model = lm.load_checkpoint(args.model)
    with open(args.infile, "rb") as fh:
        ct = cipher.deserialize_ciphertext(fh.read())
    message = cipher.decrypt(key, ct, model)
    atomic_write(args.out, message)
    print(
        "wrote {} ({} bytes); note: a wrong key yields gibberish, "
        "not an error".format(args.out, len(message)),
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    spec = corpus.MessageSpec(
        domain=args.domain,
        token_limit=args.tokens,
        seed=_seed_from(args) or 0,
        source_path=args.source,
    )
    atomic_write(args.out, corpus.sample_message(spec))
    return EXIT_OK


def _attack_setup(args):
    cfg = parse_config_file(args.config)
    key = _load_key(cfg["key"])
    model = lm.load_checkpoint(cfg["model"])
    seed = _seed_from(args)
    if seed is None:
        seed = int(cfg.get("seed", 0))

    def message_for(prefix):
        return corpus.sample_message(
            corpus.MessageSpec(
                domain=cfg[f"{prefix}.domain"],
                token_limit=int(cfg[f"{prefix}.tokens"]),
                seed=int(cfg.get(f"{prefix}.seed", seed)),
                source_path=cfg.get(f"{prefix}.source"),
            )
        )

    return cfg, key, model, seed, message_for


def cmd_attack(args) -> int:
    cfg, key, model, seed, message_for = _attack_setup(args)
    m0, m1 = message_for("m0"), message_for("m1")
    tc = _train_config_from(args, cfg)
    dataset = attack.generate_corpus(
        key,
        m0,
        m1,
        n_per_class=int(cfg.get("n_per_class", 100)),
        train_frac=float(cfg.get("train_frac", 0.8)),
        model=model,
        train_config=tc,
        master_seed=seed,
        jobs=args.jobs,
        pair_name=cfg.get("pair_name", "pair"),
    )
    if "dataset_out" in cfg:
        attack.save_dataset(cfg["dataset_out"], dataset)
    classifiers = tuple(
        c.strip() for c in cfg.get("classifiers", "knn,lda,ffnn").split(",")
    )
    modes = tuple(m.strip() for m in cfg.get("modes", "full,features").split(","))
    report = attack.run_game(
        {dataset.meta["pair"]: dataset},
        classifiers=classifiers,
        modes=modes,
        master_seed=seed,
    )
    atomic_write(args.out, attack.report_to_kv(report).encode())
    print(attack.report_to_text(report))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    """Measure unregularized ciphertext norms and print suggested
    distribution-regularizer constants (target norm, per-coordinate sigma)."""
    cfg, key, model, seed, message_for = _attack_setup(args)
    tc = _train_config_from(args, cfg)
    n = int(cfg.get("calibrate_n", 5))
    norms = []
    for prefix in ("m0", "m1"):
        msg = message_for(prefix)
        for i in range(n):
            rng = Random(attack._derive_seed(seed, "calibrate", prefix, i))
            ct = cipher.encrypt(key, msg, model, tc, rng=rng)
            norms.append(float(np.linalg.norm(ct.theta_d_star.astype(np.float64))))
    alpha = float(np.median(norms))
    sigma = alpha / np.sqrt(tc.d)
    print(f"n={len(norms)} norms_min={min(norms):.4e} norms_max={max(norms):.4e}")
    print(f"alpha={alpha:.6e}")
    print(f"sigma={sigma:.6e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selm",
        description="Symmetric encryption via language-model memorization "
        "in a key-derived subspace, plus an indistinguishability test bench.",
    )
    parser.add_argument("--seed", type=int, default=None, help="master seed "
                        "(SELM_SEED env var is the fallback)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="write a fresh 32-byte key file")
    p.add_argument("--out", required=True)
    p.add_argument("--insecure-seed", type=int, default=None,
                   help="derive the key from a seed (tests only)")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("pretrain", help="train a base checkpoint on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--context-len", type=int, default=128)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("encrypt", help="encrypt a file")
    p.add_argument("--key", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--reg", choices=("none", "l2_target", "wasserstein"), default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--config", default=None, help="key=value file with "
                   "training fields (flags win)")
    p.add_argument("--insecure-seed", type=int, default=None,
                   help="seed nonce/prompt sampling (tests only)")
    p.set_defaults(func=cmd_encrypt)

    p = sub.add_parser("decrypt", help="decrypt a ciphertext file")
    p.add_argument("--key", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decrypt)

    p = sub.add_parser("gen-corpus", help="sample a message from a domain")
    p.add_argument("--domain", choices=corpus.DOMAINS, required=True)
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", default=None)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("attack", help="run the indistinguishability game")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--reg", default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("calibrate", help="suggest regularizer constants "
                       "from unregularized ciphertext norms")
    p.add_argument("--config", required=True)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--reg", default=None)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except cipher.EncryptionBudgetExceeded as exc:
        print(f"error=EncryptionBudgetExceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except cipher.ModelMismatch as exc:
        print(f"error=ModelMismatch: {exc}", file=sys.stderr)
        return EXIT_MODEL_MISMATCH
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error={type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error={type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
