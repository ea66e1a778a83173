"""Command-line entry point: gen-data, train, eval, sweep, serve.

Exit codes: 0 success, 2 config or data error, 3 missing upstream artifact,
4 corrupt artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from . import datasets as ds
from .catalog import Catalog, generate_catalog
from .config import ConfigError, RunConfig, dump_config, load_config
from .dpo import build_dpo_pairs, train_dpo
from .evaluation import EvalConfig, evaluate, format_table, rewrite_number_sweep, run_sweep
from .grpo import DIAGNOSTICS_HEADER, train_grpo
from .policy import CheckpointError, RewritePolicy, Vocab, checkpoint
from .search import OfflineSearchEngine
from .serving import RewriteCache, RewriteServer
from .sft import train_sft

log = logging.getLogger("qrewrite")

CONFIG_ENV = "QREWRITE_CONFIG"
STAGES = ("sft", "grpo", "dpo")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class Run:
    """Paths of one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.run_dir)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def data(self) -> Path:
        return self.path("data")

    def checkpoint(self, stage: str) -> Path:
        return self.path("checkpoints", f"{stage}.ckpt")


# -- helpers -----------------------------------------------------------------


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {path}: {exc}", 2) from exc
    if not os.access(path, os.W_OK):
        raise CliError(f"directory not writable: {path}", 2)


@contextmanager
def run_lock(root: Path):
    _ensure_dir(root)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise CliError(f"run directory is in use (remove {lock} if stale)", 2) from exc
    except OSError as exc:
        raise CliError(f"cannot lock {root}: {exc}", 2) from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(run: Run, name: str, files, extra=None) -> Path:
    """Deterministic manifest (hashes, seed, config); wall-clock times go to a sidecar."""
    cfg = run.cfg.to_dict()
    cfg.pop("run_dir")
    body = {
        "command": name,
        "seed": run.cfg.seed,
        "config": cfg,
        "files": {str(Path(f).relative_to(run.root)): sha256_file(Path(f)) for f in sorted(map(str, files))},
    }
    if extra:
        body.update(extra)
    out = run.path("manifests", f"{name}.json")
    _ensure_dir(out.parent)
    out.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    stamp = {"command": name, "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    out.with_suffix(".times.json").write_text(json.dumps(stamp) + "\n", encoding="utf-8")
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {what}: {path} (run the upstream step first)", 3)
    return path


def load_catalog(run: Run) -> Catalog:
    cat, syn = _require(run.data / "catalog.tsv", "catalog"), _require(run.data / "synonyms.tsv", "synonyms")
    try:
        return Catalog.load(cat, syn, run.cfg.catalog_config().seed)
    except (ValueError, KeyError, IndexError) as exc:
        raise CliError(f"corrupt catalog files: {exc}", 4) from exc


def make_engine(run: Run, catalog: Catalog, rl_records=()) -> OfflineSearchEngine:
    e = run.cfg.engine
    engine = OfflineSearchEngine(catalog, k=e.k, k1=e.k1, b=e.b)
    for r in rl_records:
        engine.click_log[r.query] = r.click_set
    return engine


def _read(reader, path: Path, what: str):
    _require(path, what)
    try:
        return reader(path)
    except (ValueError, KeyError, IndexError) as exc:
        raise CliError(f"corrupt {what} file {path}: {exc}", 4) from exc


def load_policy(path: Path) -> tuple[RewritePolicy, dict]:
    _require(path, "checkpoint")
    try:
        return checkpoint.load(path)
    except CheckpointError as exc:
        raise CliError(f"corrupt checkpoint {path}: {exc}", 4) from exc


# -- commands ----------------------------------------------------------------


def cmd_gen_data(run: Run, args) -> int:
    cfg = run.cfg
    catalog = generate_catalog(cfg.catalog_config())
    engine = make_engine(run, catalog)
    bundle = ds.build_datasets(engine, cfg.data, cfg.stream("data"))
    d = run.data
    _ensure_dir(d)
    files = [d / "catalog.tsv", d / "synonyms.tsv"]
    catalog.save(*files)
    out = {
        "sft.txt": (ds.write_sft, bundle.sft),
        "rl.tsv": (ds.write_rl, bundle.rl),
        "tagging_eval.tsv": (ds.write_tagging_eval, bundle.tagging_eval),
        "recall_eval.tsv": (ds.write_recall_eval, bundle.recall_eval),
    }
    for name, (writer, records) in out.items():
        writer(d / name, records)
        files.append(d / name)
    write_manifest(run, "gen-data", files, {"stats": bundle.stats})
    print(json.dumps(bundle.stats, sort_keys=True))
    return 0


def cmd_train(run: Run, args) -> int:
    return {"sft": _train_sft, "grpo": _train_grpo, "dpo": _train_dpo}[args.stage](run, args)


def _train_sft(run: Run, args) -> int:
    cfg = run.cfg
    catalog = load_catalog(run)
    examples = _read(ds.read_sft, run.data / "sft.txt", "SFT dataset")
    if not cfg.sft.multitask:
        examples = [ds.QueryRewritePair(e.query, e.rewrite) for e in examples]
    vocab = Vocab.build(catalog.vocabulary())
    init = RewritePolicy.create(vocab, cfg.sft.hidden_size, cfg.stream("init"), cfg.sft.multitask, cfg.sft.init_scale)
    ck_dir = run.path("checkpoints")
    _ensure_dir(ck_dir)
    files = []

    def on_epoch(epoch, policy):
        every = cfg.sft.checkpoint_every
        if every and epoch % every == 0 and epoch < cfg.sft.epochs:
            p = ck_dir / f"sft-epoch{epoch:03d}.ckpt"
            checkpoint.save(policy, p, {"stage": "sft", "epoch": epoch})
            files.append(p)

    policy, curve = train_sft(cfg.sft_config(), examples, init, cfg.sft.multitask, on_epoch)
    final = run.checkpoint("sft")
    checkpoint.save(policy, final, {"stage": "sft", "epoch": cfg.sft.epochs})
    log_path = run.path("logs", "sft.tsv")
    _ensure_dir(log_path.parent)
    lines = ["epoch\tloss\tbce\tnll"] + [f"{e}\t{l:.6f}\t{b:.6f}\t{n:.6f}" for e, l, b, n in curve]
    log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        log.info(line)
    write_manifest(run, "train-sft", [*files, final, log_path])
    print(final)
    return 0


def _train_grpo(run: Run, args) -> int:
    cfg = run.cfg
    sft_path = _require(run.checkpoint("sft"), "SFT checkpoint")
    sft, _ = load_policy(sft_path)
    catalog = load_catalog(run)
    records = _read(ds.read_rl, run.data / "rl.tsv", "RL dataset")
    engine = make_engine(run, catalog, records)
    ck_dir = run.path("checkpoints")
    files, diag_lines = [], [DIAGNOSTICS_HEADER]
    ref_hash = sha256_file(sft_path)

    def on_step(step, policy, diag):
        diag_lines.append(diag.line())
        log.info(diag.line())
        every = cfg.rl.checkpoint_every
        if every and step % every == 0 and step < cfg.rl.steps:
            p = ck_dir / f"grpo-step{step:04d}.ckpt"
            checkpoint.save(policy, p, {"stage": "grpo", "step": step, "reference": ref_hash})
            files.append(p)

    policy, _ = train_grpo(cfg.rl_config(), records, sft, engine, cfg.reward, on_step)
    final = run.checkpoint("grpo")
    checkpoint.save(policy, final, {"stage": "grpo", "step": cfg.rl.steps, "reference": ref_hash})
    log_path = run.path("logs", "grpo.tsv")
    _ensure_dir(log_path.parent)
    log_path.write_text("\n".join(diag_lines) + "\n", encoding="utf-8")
    write_manifest(run, "train-grpo", [*files, final, log_path], {"reference_checkpoint_sha256": ref_hash})
    print(final)
    return 0


def _train_dpo(run: Run, args) -> int:
    cfg = run.cfg
    sft_path = _require(run.checkpoint("sft"), "SFT checkpoint")
    sft, _ = load_policy(sft_path)
    catalog = load_catalog(run)
    records = _read(ds.read_rl, run.data / "rl.tsv", "RL dataset")
    engine = make_engine(run, catalog, records)
    d = cfg.dpo
    pairs, skipped = build_dpo_pairs(sft, records, engine, cfg.reward, cfg.stream("dpo-negatives"),
                                     d.n_candidates, d.n_negatives, d.bottom, cfg.rl.max_len)
    if not pairs:
        raise CliError("no DPO preference pairs could be built", 2)
    policy, curve = train_dpo(pairs, sft, d.beta, d.learning_rate, d.epochs, d.batch_size, cfg.stream("dpo"))
    ref_hash = sha256_file(sft_path)
    final = run.checkpoint("dpo")
    checkpoint.save(policy, final, {"stage": "dpo", "reference": ref_hash})
    log_path = run.path("logs", "dpo.tsv")
    _ensure_dir(log_path.parent)
    log_path.write_text("epoch\tloss\n" + "".join(f"{e}\t{l:.6f}\n" for e, l in curve), encoding="utf-8")
    write_manifest(run, "train-dpo", [final, log_path],
                   {"reference_checkpoint_sha256": ref_hash, "pairs": len(pairs), "skipped_queries": skipped})
    print(final)
    return 0


def _checkpoint_arg(run: Run, args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else run.checkpoint(args.stage)


def _eval_inputs(run: Run):
    catalog = load_catalog(run)
    tagging = _read(ds.read_tagging_eval, run.data / "tagging_eval.tsv", "tagging eval")
    recall = _read(ds.read_recall_eval, run.data / "recall_eval.tsv", "recall eval")
    return make_engine(run, catalog), tagging, recall


def cmd_eval(run: Run, args) -> int:
    path = _checkpoint_arg(run, args)
    policy, _ = load_policy(path)
    engine, tagging, recall = _eval_inputs(run)
    report = evaluate(policy, tagging, recall, engine, run.cfg.eval)
    name = f"eval-{args.stage if not args.checkpoint else path.stem}"
    out_dir = run.path("reports")
    _ensure_dir(out_dir)
    js, tsv = out_dir / f"{name}.json", out_dir / f"{name}.tsv"
    js.write_text(report.to_json(), encoding="utf-8")
    table = format_table("checkpoint", [(path.stem, report)])
    tsv.write_text(table, encoding="utf-8")
    write_manifest(run, name, [js, tsv], {"checkpoint_sha256": sha256_file(path)})
    sys.stdout.write(table)
    return 0


def cmd_sweep(run: Run, args) -> int:
    cfg = run.cfg
    values = [int(v) for v in args.values]
    engine, tagging, recall = _eval_inputs(run)
    if args.axis == "rewrite_number":
        policy, _ = load_policy(_checkpoint_arg(run, args))
        rows = rewrite_number_sweep(policy, tagging, recall, engine, values, cfg.eval)
    else:
        sft, _ = load_policy(_require(run.checkpoint("sft"), "SFT checkpoint"))
        records = _read(ds.read_rl, run.data / "rl.tsv", "RL dataset")
        rl_engine = make_engine(run, engine.catalog, records)

        def report(beam):
            policy, _ = train_grpo(cfg.rl_config(beam_size=beam), records, sft, rl_engine, cfg.reward)
            ev = EvalConfig(beam, cfg.eval.rewrite_count, cfg.eval.max_len, cfg.eval.m)
            return evaluate(policy, tagging, recall, engine, ev)

        rows = run_sweep("beam_size", values, report)
    out_dir = run.path("reports")
    _ensure_dir(out_dir)
    table = format_table(args.axis, rows)
    tsv, js = out_dir / f"sweep-{args.axis}.tsv", out_dir / f"sweep-{args.axis}.json"
    tsv.write_text(table, encoding="utf-8")
    js.write_text(json.dumps([{"value": v, **dataclasses.asdict(r)} for v, r in rows], sort_keys=True, indent=2) + "\n",
                  encoding="utf-8")
    write_manifest(run, f"sweep-{args.axis}", [tsv, js])
    sys.stdout.write(table)
    return 0


def cmd_serve(run: Run, args) -> int:
    path = _checkpoint_arg(run, args)
    policy, _ = load_policy(path)
    if not policy.tagged:
        raise CliError("serving needs a multi-task (tagged) checkpoint", 2)
    cache_path = run.path("cache", "rewrites.cache")
    _ensure_dir(cache_path.parent)
    clock = (lambda: args.now) if args.now is not None else time.time
    try:
        cache = RewriteCache(run.cfg.serve.ttl_seconds, clock, sha256_file(path), cache_path)
    except ValueError as exc:
        raise CliError(f"corrupt cache file {cache_path}: {exc}", 4) from exc
    server = RewriteServer(policy, cache, run.cfg.eval.beam_size, run.cfg.eval.max_len, run.cfg.serve.top_k)
    for query in args.queries:
        for rewrite in server.serve(query):
            print(rewrite)
    cache.save()
    log.info("decodes=%d hits=%d", server.decodes, server.hits)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "serve": cmd_serve}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"YAML config (default: ${CONFIG_ENV})")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--seed", type=int)
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="qrewrite", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="build catalog and datasets")
    p = sub.add_parser("train", parents=[common], help="train a policy stage")
    p.add_argument("stage", choices=STAGES)
    for name, helptext in (("eval", "offline metrics"), ("sweep", "parameter sweep"), ("serve", "serve rewrites")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint")
        p.add_argument("--stage", choices=STAGES, default="sft")
        if name == "sweep":
            p.add_argument("axis", choices=("beam_size", "rewrite_number"))
            p.add_argument("values", nargs="+")
        if name == "serve":
            p.add_argument("queries", nargs="+")
            p.add_argument("--now", type=float, help="clock override in epoch seconds")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config or os.environ.get(CONFIG_ENV), args.overrides, args.seed)
        if args.command == "sweep":
            try:
                [int(v) for v in args.values]
            except ValueError as exc:
                raise ConfigError(f"sweep values must be integers: {args.values}") from exc
        run = Run(cfg)
        with run_lock(run.root):
            log.debug("config:\n%s", dump_config(cfg))
            return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
