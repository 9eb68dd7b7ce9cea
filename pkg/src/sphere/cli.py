"""Command-line entry point: every experiment as a subcommand.

Config files are flat ``key = value`` text with ``[section]`` headers;
command-line ``--set section.key=value`` overrides win over file values.
Every run writes three artifacts into the output directory:

  manifest.txt   resolved config, code version, seed (identity of the run)
  metrics.jsonl  one JSON record per (block, epoch) during training
  summary.json   final results; schema-versioned, no timestamps, so two
                 runs with identical manifests are byte-identical (64-bit)

Dataset location comes from ``data.dir``, falling back to the
SPHERE_DATA_DIR environment variable; when neither points at a CIFAR-10
binary layout, the synthetic generators are used instead.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import data as datamod
from . import network as net
from .linalg import frob_norm_sq, svd
from .losses import sphere_grad_linear, sphere_loss
from .oracle import principal_projection
from .plasticity import Rule, RuleState, oja_step
from .trainer import (ABLATION_GRID, TrainConfig, evaluate_config, features,
                      knn_eval, param_checksum, run_ablation, run_linearity_study,
                      run_transfer, train_greedy, train_linear_block, train_probe)

SUMMARY_SCHEMA = 1


class ConfigError(ValueError):
    """Unparseable or unknown configuration input."""


# every accepted key with its parser; unknown keys are rejected
def _int_tuple(s):
    return tuple(int(v) for v in s.replace("(", "").replace(")", "").split(",") if v.strip())


def _bool(s):
    if str(s).lower() in ("1", "true", "yes"):
        return True
    if str(s).lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


CONFIG_SCHEMA = {
    "train.channels": _int_tuple,
    "train.activation": str,
    "train.lam": float,
    "train.lr": float,
    "train.weight_decay": float,
    "train.batch_size": int,
    "train.epochs": int,
    "train.seed": int,
    "train.use_sphere": _bool,
    "train.use_oja": _bool,
    "train.use_orth": _bool,
    "train.use_phi": _bool,
    "train.phi_depth": int,
    "train.d_proj": int,
    "train.dtype": str,
    "data.dir": str,
    "data.dataset": str,          # cifar10 | synthetic | texture
    "data.n_per_class": int,
    "data.n_test_per_class": int,
    "data.noise": float,
    "data.seed": int,
    "probe.epochs": int,
}

DEFAULT_CONFIG = {
    "data.dataset": "synthetic",
    "data.n_per_class": 500,
    "data.n_test_per_class": 100,
    "data.noise": 2.2,
    "data.seed": 100,
    "probe.epochs": 20,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat key=value parser with [section] headers.

    Raises ConfigError with line/column on malformed lines and on keys
    outside CONFIG_SCHEMA.
    """
    out = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if line.strip().startswith("[") and line.strip().endswith("]"):
            section = line.strip()[1:-1].strip()
            continue
        if "=" not in line:
            col = len(raw) - len(raw.lstrip()) + 1
            raise ConfigError(f"{source}:{lineno}:{col}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        full = f"{section}.{key}" if section else key
        if full not in CONFIG_SCHEMA:
            col = raw.index(key) + 1
            raise ConfigError(f"{source}:{lineno}:{col}: unknown key {full!r}")
        try:
            out[full] = CONFIG_SCHEMA[full](val.strip())
        except ValueError as exc:
            col = raw.index("=") + 2
            raise ConfigError(f"{source}:{lineno}:{col}: bad value for {full}: {exc}") from exc
    return out


def load_config(path, overrides):
    cfg = dict(DEFAULT_CONFIG)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"{path}: config file not found")
        with open(path) as fh:
            cfg.update(parse_config_text(fh.read(), source=path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"override: unknown key {key!r}")
        try:
            cfg[key] = CONFIG_SCHEMA[key](val.strip())
        except ValueError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
    return cfg


def train_config_from(cfg: dict, seed=None) -> TrainConfig:
    kw = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("train.")}
    if seed is not None:
        kw["seed"] = seed
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# run artifacts


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(outdir: str, cfg: dict, seed: int, command: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    lines = [f"command = {command}", f"seed = {seed}", f"version = {_git_describe()}"]
    lines += [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    with open(os.path.join(outdir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_summary(outdir: str, payload: dict) -> None:
    os.makedirs(outdir, exist_ok=True)
    body = {"schema": SUMMARY_SCHEMA}
    body.update(payload)
    with open(os.path.join(outdir, "summary.json"), "w") as fh:
        json.dump(body, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_metrics(outdir: str, records) -> None:
    with open(os.path.join(outdir, "metrics.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# dataset resolution


def resolve_data_dir(cfg: dict):
    path = cfg.get("data.dir") or os.environ.get("SPHERE_DATA_DIR")
    if path and os.path.isdir(path):
        names = set(os.listdir(path))
        if names & (set(datamod.CIFAR_TRAIN_FILES) | set(datamod.CIFAR_TEST_FILES)):
            return path
    if cfg.get("data.dir"):
        raise ConfigError(
            f"data.dir={cfg['data.dir']}: expected CIFAR-10 binary layout "
            "(data_batch_1.bin .. data_batch_5.bin, test_batch.bin)")
    return None


def load_datasets(cfg: dict):
    """(train Dataset, test Dataset) from disk or a synthetic generator."""
    npc = cfg["data.n_per_class"]
    ntest = cfg["data.n_test_per_class"]
    seed = cfg["data.seed"]
    path = resolve_data_dir(cfg)
    if path and cfg["data.dataset"] == "cifar10":
        tr = datamod.subset(datamod.load_cifar10(path, "train"), npc, seed)
        te = datamod.subset(datamod.load_cifar10(path, "test"), ntest, seed)
        return tr, te
    if cfg["data.dataset"] == "texture":
        tr = datamod.make_texture_images(npc, seed=seed, noise=cfg["data.noise"], split="train")
        te = datamod.make_texture_images(ntest, seed=seed + 1, noise=cfg["data.noise"],
                                         split="test")
        return tr, te
    tr = datamod.make_synthetic_images(npc, seed=seed, noise=cfg["data.noise"], split="train")
    te = datamod.make_synthetic_images(ntest, seed=seed + 1, noise=cfg["data.noise"],
                                       split="test")
    return tr, te


def prepared_arrays(cfg: dict, dtype=np.float64):
    tr, te = load_datasets(cfg)
    mean, std = datamod.channel_stats(tr)
    return (datamod.to_float(tr, mean, std, dtype), tr.labels,
            datamod.to_float(te, mean, std, dtype), te.labels)


# ---------------------------------------------------------------------------
# subcommands


def cmd_verify_lemma(args, cfg):
    spec = datamod.SyntheticSpec(b=args.B, n=args.N,
                                 spectrum=datamod.harmonic_spectrum(args.N), seed=args.seed)
    x = datamod.synth_gaussian(spec)
    oracle = principal_projection(x, args.M)
    w, history = train_linear_block(x, args.M, steps=args.steps, seed=args.seed)
    achieved = sphere_loss(x @ w, x, normalize=False)
    ratio = achieved / oracle.min_loss if oracle.min_loss > 0 else float("inf")
    write_summary(args.out, {
        "command": "verify-lemma", "B": args.B, "N": args.N, "M": args.M,
        "achieved_loss": achieved, "oracle_loss": oracle.min_loss, "ratio": ratio,
        "converged": bool(ratio <= 1.05),
    })
    write_metrics(args.out, [{"step": i, "sphere": v}
                             for i, v in enumerate(history) if i % 100 == 0])
    print(f"achieved {achieved:.6e}  oracle {oracle.min_loss:.6e}  ratio {ratio:.4f}")
    return 0 if ratio <= 1.05 else 1


def _fd_rel_err(fun, param, grad, h=1e-5, probes=6, seed=0):
    rng = np.random.default_rng(seed)
    flat = param.reshape(-1)
    worst = 0.0
    idx = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = fun()
        flat[i] = orig - h
        fm = fun()
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        g = grad.reshape(-1)[i]
        denom = max(abs(fd), abs(g), 1e-12)
        worst = max(worst, abs(fd - g) / denom)
    return worst


def cmd_gradcheck(args, cfg):
    rng = np.random.default_rng(args.seed)
    rows = []

    x = rng.standard_normal((12, 6))
    w = rng.standard_normal((6, 3)) * 0.3
    g = sphere_grad_linear(x, w)
    err = _fd_rel_err(lambda: sphere_loss(x @ w, x, normalize=False), w, g, seed=args.seed)
    rows.append({"op": "sphere_grad_linear", "max_rel_err": err})

    f = net.init_main_block(3, 8, rng, activation="leaky_relu")
    phi = net.init_aux_block(8, d_proj=16, depth=1, rng=rng)
    xin = rng.standard_normal((6, 3, 8, 8))
    grads, _ = net.block_backward(f, phi, xin, lam=0.8)
    params = net.block_params(f, phi)
    for name in sorted(params):
        def loss():
            _, bundle = net.block_backward(f, phi, xin, lam=0.8)
            return bundle.total
        err = _fd_rel_err(loss, params[name], grads[name], h=1e-5, probes=4, seed=args.seed)
        rows.append({"op": f"block_backward/{name}", "max_rel_err": err})

    worst = max(r["max_rel_err"] for r in rows)
    for r in rows:
        print(f"{r['op']:<32s} {r['max_rel_err']:.3e}")
    write_summary(args.out, {"command": "gradcheck", "ops": rows,
                             "worst": worst, "pass": bool(worst <= 1e-4)})
    return 0 if worst <= 1e-4 else 1


def cmd_train(args, cfg):
    config = train_config_from(cfg, seed=args.seed)
    xtr, ytr, xte, yte = prepared_arrays(cfg, dtype=config.np_dtype)
    t0 = time.time()
    blocks, records = train_greedy(config, xtr)
    checksum = param_checksum({f"b{i}.{k}": v for i, (f, phi) in enumerate(blocks)
                               for k, v in net.block_params(f, phi).items()})
    write_metrics(args.out, records)
    payload = {"command": "train", "param_checksum": checksum,
               "final_total": records[-1]["total"], "n_train": len(ytr)}
    if args.probe:
        ftr = features(blocks, xtr)
        fte = features(blocks, xte)
        tr_acc, te_acc = train_probe(ftr, ytr, fte, yte, epochs=cfg["probe.epochs"],
                                     seed=args.seed)
        payload.update(train_acc=tr_acc, test_acc=te_acc)
        print(f"probe train {tr_acc:.3f}  test {te_acc:.3f}")
    write_summary(args.out, payload)
    print(f"trained {len(blocks)} blocks in {time.time() - t0:.1f}s  checksum {checksum[:12]}")
    return 0


def cmd_probe(args, cfg):
    config = train_config_from(cfg, seed=args.seed)
    xtr, ytr, xte, yte = prepared_arrays(cfg, dtype=config.np_dtype)
    res = evaluate_config(config, xtr, ytr, xte, yte, probe_epochs=cfg["probe.epochs"])
    write_summary(args.out, {"command": "probe", **res})
    print(f"train {res['train_acc']:.3f}  test {res['test_acc']:.3f}")
    return 0


def cmd_knn(args, cfg):
    config = train_config_from(cfg, seed=args.seed)
    xtr, ytr, xte, yte = prepared_arrays(cfg, dtype=config.np_dtype)
    blocks, _ = train_greedy(config, xtr)
    acc = knn_eval(features(blocks, xtr), ytr, features(blocks, xte), yte, k=args.k)
    write_summary(args.out, {"command": "knn", "k": args.k, "test_acc": acc})
    print(f"knn@{args.k} {acc:.3f}")
    return 0


def cmd_ablate(args, cfg):
    config = train_config_from(cfg, seed=args.seed)
    xtr, ytr, xte, yte = prepared_arrays(cfg, dtype=config.np_dtype)
    rows = run_ablation(config, xtr, ytr, xte, yte, grid=ABLATION_GRID)
    for r in rows:
        acc = "refused" if r["test_acc"] is None else f"{r['test_acc']:.3f}"
        print(f"{r['combo']:<24s} {acc}")
    write_summary(args.out, {"command": "ablate", "rows": rows})
    return 0


def cmd_transfer(args, cfg):
    config = train_config_from(cfg, seed=args.seed)
    # source: texture statistics; target: the configured dataset
    src = datamod.make_texture_images(cfg["data.n_per_class"], seed=cfg["data.seed"] + 7)
    mean, std = datamod.channel_stats(src)
    xsrc = datamod.to_float(src, mean, std, config.np_dtype)
    xtr, ytr, xte, yte = prepared_arrays(cfg, dtype=config.np_dtype)
    res = run_transfer(xsrc, src.labels, xtr, ytr, xte, yte, config)
    write_summary(args.out, {"command": "transfer", **res})
    print(f"transfer {res['transfer_acc']:.3f}  direct {res['direct_acc']:.3f}  "
          f"gap {res['gap']:.3f}")
    return 0


def cmd_linearity(args, cfg):
    curve, align = run_linearity_study(seed=args.seed, epochs=args.epochs)
    diag = float(np.mean(np.diag(align)[:20]))
    off = float((align.sum() - np.trace(align)) / (align.size - align.shape[0]))
    write_summary(args.out, {"command": "linearity", "cka_curve": [float(c) for c in curve],
                             "diag20_mean": diag, "offdiag_mean": off})
    print(f"final cka {curve[-1]:.4f}  diag20 {diag:.3f}  offdiag {off:.3f}")
    return 0


def cmd_oja_demo(args, cfg):
    spec = datamod.SyntheticSpec(b=64, n=16, spectrum=np.array([3.0, 1.0, 0.3] + [0.0] * 13),
                                 seed=args.seed)
    x = datamod.synth_gaussian(spec)
    v1 = svd(x).v[:, 0]
    rng = np.random.default_rng(args.seed)
    state = RuleState(w=rng.standard_normal((16, 1)) * 0.1, eta=1e-3, rule=Rule.OJA)
    cos = 0.0
    for step in range(2000):
        state = oja_step(state, x)
        cos = abs(float(v1 @ state.w[:, 0]) / (np.linalg.norm(state.w) + 1e-12))
        if cos >= 0.99:
            break
    write_summary(args.out, {"command": "oja-demo", "steps": step + 1, "abs_cos": cos})
    print(f"|cos(w, v1)| = {cos:.4f} after {step + 1} steps")
    return 0 if cos >= 0.99 else 1


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="sphere",
                                description="structural-matching representation learning")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VAL", dest="overrides",
                   help="override a config value (repeatable)")
    p.add_argument("--out", default="runs/last", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("verify-lemma", help="single linear block vs closed-form optimum")
    sp.add_argument("--B", type=int, default=64)
    sp.add_argument("--N", type=int, default=32)
    sp.add_argument("--M", type=int, default=8)
    sp.add_argument("--steps", type=int, default=30000)
    sp.set_defaults(fn=cmd_verify_lemma)

    sp = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("train", help="greedy block-wise unsupervised training")
    sp.add_argument("--probe", action="store_true", help="also fit a linear probe")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("probe", help="train blocks then evaluate a linear probe")
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("knn", help="train blocks then KNN-evaluate features")
    sp.add_argument("--k", type=int, default=5)
    sp.set_defaults(fn=cmd_knn)

    sp = sub.add_parser("ablate", help="loss/architecture combination table")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("transfer", help="train on one dataset, probe on another")
    sp.set_defaults(fn=cmd_transfer)

    sp = sub.add_parser("linearity", help="linear vs nonlinear branch comparison")
    sp.add_argument("--epochs", type=int, default=30)
    sp.set_defaults(fn=cmd_linearity)

    sp = sub.add_parser("oja-demo", help="Oja rule converging to the top component")
    sp.set_defaults(fn=cmd_oja_demo)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        write_manifest(args.out, cfg, args.seed, args.command)
        return args.fn(args, cfg)
    except (ConfigError, datamod.FormatError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
