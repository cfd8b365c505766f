"""Command-line entry point: ``crsfuse {gen-synthetic,simulate,pretrain,finetune,evaluate}``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, apply_arrays, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, read_config_file, resolve
from .data import (DataError, Dataset, leave_one_out_split, load_dataset, pretraining_sequences,
                   save_dataset, generate_synthetic, write_id_maps, write_records)
from .finetune import (FinetuneConfig, OracleScorer, evaluate, finetune, write_ranks,
                       write_report)
from .model import DualEncoder, Generator, ModelConfig
from .negsampler import NegativePolicy, train_generator
from .pretrain import pretrain
from .simulator import simulate_dataset

log = logging.getLogger("crsfuse")

PRETRAIN_CKPT = "pretrain.ckpt"
FINETUNE_CKPT = "finetune.ckpt"
GENERATOR_CKPT = "generator.ckpt"
PATH_FIELDS = ("data_dir", "records", "out_dir", "generator", "checkpoint")


class CliError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

@contextlib.contextmanager
def output_lock(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    lock = Path(out_dir) / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"output directory {out_dir} is locked by another run ({lock})") from None
    os.close(fd)
    try:
        yield Path(out_dir)
    finally:
        lock.unlink(missing_ok=True)


def _load(cfg: RunConfig) -> Dataset:
    if not (Path(cfg.data_dir) / "items.tsv").exists():
        raise CliError(f"no items.tsv in {cfg.data_dir}")
    return load_dataset(cfg.data_dir, cfg.records)


def model_meta(model, cfg: RunConfig, **extra) -> dict:
    # file locations are left out so reruns elsewhere stay byte-identical
    run = {k: v for k, v in cfg.to_dict().items() if k not in PATH_FIELDS}
    meta = {"model": model.cfg.to_dict(), "n_items": model.n_items,
            "run": run, "rng": {"seed": cfg.seed}}
    if hasattr(model, "n_attrs"):
        meta["n_attrs"] = model.n_attrs
    meta.update(extra)
    return meta


def save_model(model, path, cfg: RunConfig, **extra) -> None:
    save_checkpoint(path, model.params, model.component, model_meta(model, cfg, **extra))


def load_dual_encoder(path, cfg: RunConfig, n_items: int, n_attrs: int):
    """Build a dual encoder from the run config and fill it from ``path``."""
    ckpt = load_checkpoint(path, component=DualEncoder.component)
    model = DualEncoder(cfg.model_config(), n_items, n_attrs, seed=cfg.seed)
    apply_arrays(model.params, ckpt.arrays)
    return model, ckpt


def load_generator(path, n_items: int) -> Generator:
    ckpt = load_checkpoint(path, component=Generator.component)
    conf = dict(ckpt.metadata["config"]["model"])
    gen = Generator(ModelConfig(**conf), n_items)
    apply_arrays(gen.params, ckpt.arrays)
    for p in gen.parameters():
        p.requires_grad = False
    return gen


# ------------------------------------------------------------------ commands

def cmd_gen_synthetic(cfg: RunConfig) -> None:
    ds = generate_synthetic(cfg.seed, cfg.num_users, cfg.num_items, cfg.num_attrs,
                            cfg.attrs_per_item, cfg.sessions_per_user, cfg.history_per_user)
    with output_lock(cfg.out_dir) as out:
        save_dataset(ds, out)
    print(f"wrote {len(ds.records)} records for {ds.log.n_users} users to {cfg.out_dir}")


def cmd_simulate(cfg: RunConfig) -> None:
    ds = _load(cfg)
    records = simulate_dataset(ds.log, ds.catalog, cfg.seed, cfg.reject_filters, cfg.max_asks)
    mean_len = float(np.mean([len(r.attributes) for r in records])) if records else 0.0
    with output_lock(cfg.out_dir) as out:
        write_records(records, ds.catalog, ds.log, out / "records.tsv")
        write_id_maps(ds.catalog, ds.log, out)
        with open(out / "summary.tsv", "w", encoding="utf-8") as fh:
            fh.write(f"records\t{len(records)}\nmean_attributes\t{mean_len:.6f}\n")
    print(f"simulated {len(records)} conversations, mean |P(A)| {mean_len:.3f}")


def cmd_pretrain(cfg: RunConfig) -> None:
    ds = _load(cfg)
    split = leave_one_out_split(ds.records)
    seqs = pretraining_sequences(ds.log, split)
    epochs = 30 if cfg.epochs is None else cfg.epochs
    lr = 1e-3 if cfg.lr is None else cfg.lr
    pcfg = cfg.pretrain_config()
    if pcfg.lambda_mip <= 0 and pcfg.lambda_sad <= 0:
        raise CliError("--no-mip and --no-sad together leave nothing to pre-train")
    with output_lock(cfg.out_dir) as out:
        policy = NegativePolicy("uniform", cfg.top_k)
        if cfg.neg_policy == "generator" and pcfg.lambda_mip > 0:
            if cfg.generator:
                gen = load_generator(cfg.generator, ds.catalog.n_items)
            elif cfg.train_generator:
                gen, _ = train_generator(seqs, ds.catalog.n_items, cfg.model_config(),
                                         cfg.gen_epochs, cfg.gen_lr, cfg.batch_size, cfg.seed)
                save_model(gen, out / GENERATOR_CKPT, cfg)
            else:
                raise CliError("generator negatives need --generator or generator training")
            policy = NegativePolicy("generator", cfg.top_k, gen)
        model = DualEncoder(cfg.model_config(), ds.catalog.n_items, ds.catalog.n_attrs,
                            seed=cfg.seed)
        hist = pretrain(model, ds.catalog, seqs, policy, pcfg, epochs, lr, cfg.seed,
                        log_path=out / "pretrain_log.tsv")
        save_model(model, out / PRETRAIN_CKPT, cfg, stage="pretrain", history=hist)
    last = hist[-1] if hist else {"mip": float("nan"), "sad": float("nan")}
    print(f"pre-trained {epochs} epochs: mip {last['mip']:.4f} sad {last['sad']:.4f}")


def cmd_finetune(cfg: RunConfig) -> None:
    ds = _load(cfg)
    split = leave_one_out_split(ds.records)
    epochs = 50 if cfg.epochs is None else cfg.epochs
    lr = 1e-4 if cfg.lr is None else cfg.lr
    cat = ds.catalog
    if cfg.checkpoint:
        model, _ = load_dual_encoder(cfg.checkpoint, cfg, cat.n_items, cat.n_attrs)
    else:
        model = DualEncoder(cfg.model_config(), cat.n_items, cat.n_attrs, seed=cfg.seed)
    policy = NegativePolicy("uniform", cfg.top_k)
    with output_lock(cfg.out_dir) as out:
        if cfg.finetune_neg_policy == "generator":
            if not cfg.generator:
                raise CliError("--finetune-neg-policy generator needs --generator")
            policy = NegativePolicy("generator", cfg.top_k, load_generator(cfg.generator,
                                                                          cat.n_items))
        fcfg = FinetuneConfig(cfg.batch_size, cfg.clip, cfg.patience)
        rows = finetune(model, ds.log, split, policy, fcfg, epochs, lr, seed=cfg.seed,
                        eval_seed=cfg.seed if cfg.eval_seed is None else cfg.eval_seed)
        kept = max(rows, key=lambda r: r.get("valid_ndcg10", r["epoch"]))
        with open(out / "finetune_log.tsv", "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(f"{r['epoch']}\t{r['loss']:.6f}\t{r.get('valid_ndcg10', float('nan')):.6f}\n")
        save_model(model, out / FINETUNE_CKPT, cfg, stage="finetune",
                   history=rows, final_loss=kept["loss"])
    print(f"fine-tuned {len(rows)} epochs, kept epoch {kept['epoch']} (loss {kept['loss']:.4f})")


def cmd_evaluate(cfg: RunConfig) -> None:
    ds = _load(cfg)
    split = leave_one_out_split(ds.records)
    if not split.test:
        raise CliError("test split is empty")
    cat = ds.catalog
    if cfg.oracle:
        scorer, name = OracleScorer(split.test), cfg.model_name or "oracle"
    elif cfg.checkpoint:
        scorer, _ = load_dual_encoder(cfg.checkpoint, cfg, cat.n_items, cat.n_attrs)
        name = cfg.model_name or Path(cfg.checkpoint).stem
    else:
        raise CliError("evaluate needs --checkpoint (or --oracle)")
    seed = cfg.seed if cfg.eval_seed is None else cfg.eval_seed
    result = evaluate(scorer, split.test, ds.log, cat.n_items, seed=seed)
    with output_lock(cfg.out_dir) as out:
        write_report(out / "report.tsv", name, result)
        write_ranks(out / "ranks.tsv", result, ds.log.user_raw)
    print(f"{name}\tMRR {result.mrr:.4f}\tNDCG@10 {result.ndcg10:.4f}\t{result.num_records}")


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
}


# ------------------------------------------------------------------ argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    a = common.add_argument
    a("--config", help="key = value configuration file")
    a("--data-dir", dest="data_dir")
    a("--records", help="conversation record file (default: <data-dir>/records.tsv)")
    a("--out-dir", dest="out_dir")
    a("--seed", type=int)
    a("--epochs", type=int)
    a("--batch-size", dest="batch_size", type=int)
    a("--dim", type=int)
    a("--layers", type=int)
    a("--heads", type=int)
    a("--max-items", dest="max_items", type=int)
    a("--max-attrs", dest="max_attrs", type=int)
    a("--dropout", type=float)
    a("--lr", type=float)
    a("--mask-prob", dest="mask_prob", type=float)
    a("--sub-prob", dest="sub_prob", type=float)
    a("--sad-prob", dest="sad_prob", type=float)
    a("--lambda-mip", dest="lambda_mip", type=float)
    a("--lambda-sad", dest="lambda_sad", type=float)
    a("--no-sad", dest="lambda_sad", action="store_const", const=0.0)
    a("--no-mip", dest="lambda_mip", action="store_const", const=0.0)
    a("--sad-raw-attributes", dest="sad_raw_attributes", action="store_const", const=True,
      help="discriminate against attribute embeddings instead of encoder output")
    a("--neg-policy", dest="neg_policy", choices=["uniform", "generator"])
    a("--finetune-neg-policy", dest="finetune_neg_policy", choices=["uniform", "generator"])
    a("--top-k", dest="top_k", type=int)
    a("--gen-epochs", dest="gen_epochs", type=int)
    a("--gen-lr", dest="gen_lr", type=float)
    a("--no-train-generator", dest="train_generator", action="store_const", const=False)
    a("--generator", help="trained generator checkpoint")
    a("--checkpoint")
    a("--patience", type=int)
    a("--clip", type=float)
    a("--eval-seed", dest="eval_seed", type=int)
    a("--model-name", dest="model_name")
    a("--oracle", action="store_const", const=True, help="score with the ground truth")
    a("--reject-filters", dest="reject_filters", action="store_const", const=True)
    a("--max-asks", dest="max_asks", type=int)
    a("--num-users", dest="num_users", type=int)
    a("--num-items", dest="num_items", type=int)
    a("--num-attrs", dest="num_attrs", type=int)
    a("--attrs-per-item", dest="attrs_per_item", type=int)
    a("--sessions-per-user", dest="sessions_per_user", type=int)
    a("--history-per-user", dest="history_per_user", type=int)
    a("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crsfuse", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def config_from_args(argv) -> tuple[str, RunConfig, bool]:
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    verbose = ns.pop("verbose", False)
    path = ns.pop("config", None)
    return command, resolve(read_config_file(path) if path else None, ns), verbose


def main(argv=None) -> int:
    try:
        command, cfg, verbose = config_from_args(argv)
    except ConfigError as e:
        print(f"crsfuse: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"crsfuse: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[command](cfg)
    except (CliError, CheckpointError, DataError, ConfigError, ValueError, OSError) as e:
        print(f"crsfuse {command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
