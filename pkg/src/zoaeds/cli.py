"""Command-line runner: ``zoaeds <subcommand> [flags]``.

Subcommands share one output directory::

    train-base     -> base.ckpt
    pretrain-ae    -> encoder.ckpt, decoder.ckpt
    train-defense  -> <method>-<scheme>/{denoiser,encoder,decoder}.ckpt, train_log.csv
    certify        -> <method>-<scheme>/{certify.jsonl, ca_curve.csv}   (classification)
    attack-eval    -> <method>-<scheme>/attack.csv                       (reconstruction)

Each run also writes ``manifest-<subcommand>.json`` with the config
snapshot, seed, sha256 of every artifact it read or wrote, oracle query
totals and wall-clock time. Exit status: 0 ok, 2 config error, 3 runtime
or numerical error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

from zoaeds.certify import certified_accuracy_curve, certify_dataset, standard_accuracy, write_curve_csv, write_records_jsonl
from zoaeds.config import RunConfig, build_config, parse_config
from zoaeds.data import Dataset, load_dataset, toy_splits
from zoaeds.errors import ConfigError, MissingArtifactError, ZODSError
from zoaeds.models import (
    DefenseStack,
    accuracy,
    build_base_classifier,
    build_base_reconstructor,
    classifier_arch,
    decoder_arch,
    denoiser_arch,
    encoder_arch,
    load_network,
    pretrain_autoencoder,
    reconstructor_arch,
    save_network,
)
from zoaeds.numerics.graph import Network
from zoaeds.numerics.rng import RngStream
from zoaeds.optim import OptimizerConfig
from zoaeds.oracle import BlackBoxOracle
from zoaeds.robusteval import MeasurementModel, ReconstructionPipeline, attack_table, write_attack_csv
from zoaeds.training import train

log = logging.getLogger("zoaeds")

SUBCOMMANDS = ("pretrain-ae", "train-base", "train-defense", "certify", "attack-eval")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """State of one subcommand invocation: config, paths and the manifest being built."""

    def __init__(self, subcommand: str, cfg: RunConfig, out: str):
        self.subcommand, self.cfg, self.out = subcommand, cfg, out
        self.checksums, self.queries, self.metrics = {}, {}, {}
        self.t0 = time.perf_counter()
        os.makedirs(out, exist_ok=True)

    @property
    def defense_dir(self) -> str:
        return os.path.join(self.out, f"{self.cfg.method}-{self.cfg.scheme}")

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    def record(self, path):
        self.checksums[os.path.relpath(path, self.out)] = sha256_file(path)

    def save(self, net: Network, path):
        save_network(net, path)
        self.record(path)

    def load(self, path) -> Network:
        if not os.path.exists(path):
            raise MissingArtifactError(f"{os.path.relpath(path, self.out)} not found in {self.out}; "
                                       "run the subcommand that produces it first")
        self.record(path)
        return load_network(path)

    def load_base(self) -> Network:
        net = self.load(self.path("base.ckpt"))
        net.freeze()
        return net

    def datasets(self) -> tuple[Dataset, Dataset]:
        cfg = self.cfg
        if not cfg.data:
            tr, te = toy_splits(cfg.n_train, cfg.n_test)
        else:
            if not cfg.test_data:
                raise ConfigError("test_data is required when data is set")
            tr, te = load_dataset(cfg.data, "train"), load_dataset(cfg.test_data, "test")
        for ds in (tr, te):
            c = ds.checksum()
            self.checksums[f"dataset:{ds.split}"] = c
            log.info("dataset %s: %d examples, sha256 %s", ds.split, len(ds), c)
        if cfg.task == "classification" and tr.labels is None:
            raise ConfigError("classification needs a labelled training set")
        return tr, te

    def measurement(self, shape) -> MeasurementModel:
        return MeasurementModel.gaussian_rows(shape, self.cfg.measurement_m, self.cfg.seed)

    def finish(self) -> dict:
        manifest = {
            "subcommand": self.subcommand,
            "config": self.cfg.to_dict(),
            "seeds": {"seed": self.cfg.seed},
            "checksums": dict(sorted(self.checksums.items())),
            "queries": self.queries,
            "queries_total": int(sum(self.queries.values())),
            "metrics": self.metrics,
            "wall_clock_seconds": time.perf_counter() - self.t0,
        }
        with open(self.path(f"manifest-{self.subcommand}.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return manifest


# -- subcommands -------------------------------------------------------------

def cmd_train_base(run: Run):
    cfg = run.cfg
    tr, te = run.datasets()
    if cfg.task == "classification":
        base = build_base_classifier(classifier_arch(tr.image_shape, max(tr.num_classes, te.num_classes)), tr, te,
                                     epochs=cfg.base_epochs, seed=cfg.seed)
        run.metrics["test_accuracy"] = base.test_metric
    else:
        meas = run.measurement(tr.image_shape)
        base = build_base_reconstructor(reconstructor_arch(tr.image_shape), tr, meas, te,
                                        epochs=cfg.base_epochs, seed=cfg.seed)
        run.metrics["test_rmse"] = base.test_metric
    run.save(base.network, run.path("base.ckpt"))


def _ae_inputs(run: Run, ds: Dataset):
    if run.cfg.task == "reconstruction":
        return run.measurement(ds.image_shape).measure(ds.images)
    return ds.images


def cmd_pretrain_ae(run: Run):
    cfg = run.cfg
    tr, _ = run.datasets()
    shape = tr.image_shape
    squash = cfg.task == "classification"
    enc = Network(encoder_arch(shape, d_z=cfg.d_z), rng=RngStream(cfg.seed, ("enc",)))
    dec = Network(decoder_arch(cfg.d_z, shape, squash=squash), rng=RngStream(cfg.seed, ("dec",)))
    rep = pretrain_autoencoder(enc, dec, _ae_inputs(run, tr), cfg.ae_epochs, OptimizerConfig("adam", cfg.ae_lr),
                               RngStream(cfg.seed, ("ae",)), cfg.batch_size)
    run.metrics.update(initial_loss=rep.initial_loss, final_loss=rep.final_loss)
    run.save(enc, run.path("encoder.ckpt"))
    run.save(dec, run.path("decoder.ckpt"))


def _oracle_kind(cfg):
    return "logits" if cfg.task == "classification" else "image"


def _defense_stack(run: Run, base: Network, trained: bool) -> DefenseStack:
    cfg = run.cfg
    uses_ae = cfg.method.endswith("ae_ds")
    if trained:
        den = run.load(os.path.join(run.defense_dir, "denoiser.ckpt"))
        enc = run.load(os.path.join(run.defense_dir, "encoder.ckpt")) if uses_ae else None
        dec = run.load(os.path.join(run.defense_dir, "decoder.ckpt")) if uses_ae else None
    else:
        den = Network(denoiser_arch(base.input_shape, width=cfg.width), rng=RngStream(cfg.seed, ("den",)))
        enc = run.load(run.path("encoder.ckpt")) if uses_ae else None
        dec = run.load(run.path("decoder.ckpt")) if uses_ae else None
    return DefenseStack(den, BlackBoxOracle.from_network(base, _oracle_kind(cfg)), enc, dec, base_model=base)


def cmd_train_defense(run: Run):
    cfg = run.cfg
    tr, _ = run.datasets()
    base = run.load_base()
    stack = _defense_stack(run, base, trained=False)
    noise_map = None
    inputs = tr
    if cfg.task == "reconstruction":
        meas = run.measurement(tr.image_shape)
        inputs, noise_map = meas.measure(tr.images), meas.measure
    report = train(cfg.train_config(), stack, inputs, noise_transform=noise_map)
    run.queries["train"] = report.queries_used
    os.makedirs(run.defense_dir, exist_ok=True)
    run.save(stack.denoiser, os.path.join(run.defense_dir, "denoiser.ckpt"))
    if stack.uses_ae:
        run.save(stack.encoder, os.path.join(run.defense_dir, "encoder.ckpt"))
        run.save(stack.decoder, os.path.join(run.defense_dir, "decoder.ckpt"))
    log_path = os.path.join(run.defense_dir, "train_log.csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "phase", "denoise_loss", "stab_loss", "total_loss", "queries", "sigma"])
        for e in report.epochs:
            w.writerow([e.epoch, e.phase, repr(e.denoise_loss), repr(e.stab_loss), repr(e.total_loss), e.queries,
                        repr(cfg.sigma)])
    run.record(log_path)
    if report.epochs:
        run.metrics.update(final_denoise_loss=report.epochs[-1].denoise_loss,
                           final_stab_loss=report.epochs[-1].stab_loss)


def cmd_certify(run: Run):
    cfg = run.cfg
    if cfg.task != "classification":
        raise ConfigError("certify applies to task = classification")
    base = run.load_base()
    stack = _defense_stack(run, base, trained=True)
    _, te = run.datasets()
    before = stack.base.queries_used
    recs = certify_dataset(stack, te.images, cfg.certify_config())
    run.queries["certify"] = stack.base.queries_used - before
    os.makedirs(run.defense_dir, exist_ok=True)
    rec_path = os.path.join(run.defense_dir, "certify.jsonl")
    curve_path = os.path.join(run.defense_dir, "ca_curve.csv")
    write_records_jsonl(recs, rec_path)
    curve = certified_accuracy_curve(recs, te.labels, cfg.radii)
    write_curve_csv(curve, curve_path)
    run.record(rec_path)
    run.record(curve_path)
    run.metrics.update(standard_accuracy=standard_accuracy(recs, te.labels),
                       base_clean_accuracy=accuracy(base, te),
                       certified_accuracy={repr(r): ca for r, ca in curve})


def cmd_attack_eval(run: Run):
    cfg = run.cfg
    if cfg.task != "reconstruction":
        raise ConfigError("attack-eval applies to task = reconstruction")
    base = run.load_base()
    stack = _defense_stack(run, base, trained=True)
    _, te = run.datasets()
    meas = run.measurement(te.image_shape)
    pipes = [ReconstructionPipeline("standard", meas, base), ReconstructionPipeline(cfg.method, meas, base, stack)]
    rows = attack_table(pipes, te, cfg.epsilons, steps=cfg.attack_steps)
    os.makedirs(run.defense_dir, exist_ok=True)
    path = os.path.join(run.defense_dir, "attack.csv")
    write_attack_csv(rows, path)
    run.record(path)
    run.metrics["rows"] = [{"method": r.method, "epsilon": r.epsilon, "rmse": r.rmse, "ssim": r.ssim} for r in rows]


COMMANDS = {
    "train-base": cmd_train_base,
    "pretrain-ae": cmd_pretrain_ae,
    "train-defense": cmd_train_defense,
    "certify": cmd_certify,
    "attack-eval": cmd_attack_eval,
}


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zoaeds", description="Black-box denoised smoothing with ZO-AE-DS.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=["fo-ds", "zo-ds", "fo-ae-ds", "zo-ae-ds"])
    p.add_argument("--estimator", choices=["rge", "cge"])
    p.add_argument("--q", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--scheme", choices=["scratch", "pretrain-finetune"])
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _read_config(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} not found")
    with open(path) as fh:
        return parse_config(fh.read())


def run(subcommand: str, config_path=None, out: str = "runs", **overrides) -> dict:
    """Run one subcommand and return its manifest; ``overrides`` beat the config file."""
    if subcommand not in COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}; expected one of {SUBCOMMANDS}")
    values = _read_config(config_path) if config_path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    r = Run(subcommand, build_config(values), out)
    COMMANDS[subcommand](r)
    return r.finish()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in ("seed", "method", "estimator", "q", "mu", "sigma", "gamma", "scheme")}
    try:
        manifest = run(args.subcommand, args.config, args.out, **overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ZODSError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"subcommand": manifest["subcommand"], "out": args.out,
                      "queries_total": manifest["queries_total"], "metrics": manifest["metrics"]},
                     sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
