"""Command-line entry point: ``qcrec <verb> [options]``.

Every verb accepts ``--config run.json``; explicit flags override values
from the file. Each run writes its resolved configuration to
``<output_dir>/run_config.json``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qcrec.errors import DataError, NumericalError
from qcrec.evaluate import EvalReport, evaluate_model, format_table, write_ranks_csv, write_report
from qcrec.model import ModelConfig, Variant, init_params, load_checkpoint, save_checkpoint
from qcrec.oracle import forward_cost, incremental_forward_oracle, runtime_ratio, synth_gen
from qcrec.pipeline import PreparedData, prepare
from qcrec.seqdata import WindowArrays, item_frequency_ranking, load_instances, parse_events, save_instances
from qcrec.train import AdamState, JsonlLog, LogUniformSampler, TrainConfig, finite_difference_check, fit

logger = logging.getLogger("qcrec")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CHECK_FAILED = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "QCREC_OUTPUT_ROOT"


@dataclass
class RunConfig:
    # data
    format: str = "taobao_csv"
    events: str | None = None
    item_properties: list[str] = field(default_factory=list)
    user_fraction: float = 1.0
    min_count: int = 10
    t_split: float | None = None
    split_quantile: float = 0.8
    N: int = 50
    bos: bool = True
    data_dir: str | None = None
    # synthetic generator
    n_users: int = 2000
    n_items: int = 200
    n_contexts: int = 10
    alpha: float = 0.9
    mean_length: float = 8.0
    # model
    D: int = 64
    H: int = 2
    n_heads: int = 2
    d_ff: int | None = None
    dropout_rate: float = 0.0
    positional: bool = True
    mode: str = "C"
    visibility: str = "current"
    context_mask_prob: float = 0.0
    # training
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 10
    seed: int = 0
    neg_sample_ratio: float = 0.0
    grad_clip: float | None = None
    checkpoint_dtype: str = "float32"
    # evaluation
    ks: list[int] = field(default_factory=lambda: [5, 50])
    exclude_consumed: bool = False
    checkpoint: str | None = None
    resume: str | None = None
    p_list: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    n_configs: int = 20
    output_dir: str | None = None

    def model_config(self, n_items: int, n_contexts: int) -> ModelConfig:
        return ModelConfig(
            N=self.N, D=self.D, H=self.H, n_heads=self.n_heads, d_ff=self.d_ff,
            vocab_items=n_items + 2, vocab_contexts=n_contexts + 1,
            dropout_rate=self.dropout_rate, positional=self.positional,
            context_mask_prob=self.context_mask_prob,
        ).with_mode(self.mode, "full")

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, seed=self.seed,
                           neg_sample_ratio=self.neg_sample_ratio, grad_clip=self.grad_clip)


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("-v", "--verbose", action="store_true")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = str(f.type)
        if kind.startswith("list"):
            elem = int if "int" in kind else float if "float" in kind else str
            parser.add_argument(flag, dest=f.name, type=elem, nargs="+", default=None)
        elif kind == "bool":
            parser.add_argument(flag, dest=f.name, type=_parse_bool, default=None)
        elif "int" in kind:
            parser.add_argument(flag, dest=f.name, type=int, default=None)
        elif "float" in kind:
            parser.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            parser.add_argument(flag, dest=f.name, default=None)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        with open(args.config) as fh:
            values.update(json.load(fh))
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - names
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = RunConfig(**values)
    if cfg.output_dir is None:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        cfg.output_dir = str(Path(root) / args.command)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_config.json", "w") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=2, sort_keys=True)
    return out


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


# ----------------------------------------------------------------- data io


def save_prepared(data: PreparedData, out: Path) -> None:
    data.windows.save(out / "windows.npz")
    save_instances(data.instances, out / "test_instances.jsonl")
    _write_json(out / "manifest.json", data.manifest)


def load_prepared(path: str | Path) -> PreparedData:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise DataError(f"{path} is not a prepared data directory")
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    return PreparedData(WindowArrays.load(path / "windows.npz"), load_instances(path / "test_instances.jsonl"),
                        manifest["n_items"], manifest["n_contexts"], manifest)


def write_synth_csv(log, path: Path) -> None:
    """Write a synthetic log in the Taobao column layout."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for it in log.interactions:
            w.writerow([it.user_id, log.item_vocab.raw(it.item_id), log.context_vocab.raw(it.context_id),
                        "pv", f"{it.timestamp:.6f}"])


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    log = synth_gen(cfg.n_users, cfg.n_items, cfg.n_contexts, cfg.alpha, cfg.seed, mean_length=cfg.mean_length)
    write_synth_csv(log, out / "events.csv")
    print(f"wrote {len(log.interactions)} interactions for {len(log.users())} users to {out / 'events.csv'}")
    return EXIT_OK


def cmd_prepare(cfg: RunConfig) -> int:
    if not cfg.events:
        raise DataError("--events is required")
    out = _out_dir(cfg)
    log = parse_events(cfg.events, cfg.format, item_properties=cfg.item_properties, user_fraction=cfg.user_fraction)
    data = prepare(log, cfg.N, t_split=cfg.t_split, split_quantile=cfg.split_quantile,
                   min_count=cfg.min_count or None, bos=cfg.bos)
    save_prepared(data, out)
    c = data.manifest["counts"]
    raw = data.manifest["raw"]
    print(f"users={c['users']} items={data.n_items} contexts={data.n_contexts} windows={c['windows']} "
          f"test_instances={c['test_instances']} skipped_rows={c['skipped_rows']}")
    print(f"raw items={raw.get('raw_items')} raw categories={raw.get('raw_contexts')} "
          f"single-interaction users={raw.get('unfiltered_single_interaction_fraction', float('nan')):.3f}")
    return EXIT_OK


def _train(cfg: RunConfig, data: PreparedData, out: Path, *, quiet: bool = False):
    config = cfg.model_config(data.n_items, data.n_contexts)
    tc = cfg.train_config()
    rng = np.random.default_rng(tc.seed)
    params = init_params(config, rng)
    state = None
    start_epoch = 0
    if cfg.resume:
        config_r, params, meta, arrays = load_checkpoint(cfg.resume)
        if config_r.to_json() != config.to_json():
            raise DataError("checkpoint config does not match the run config")
        state = AdamState.from_arrays(arrays)
        rng.bit_generator.state = meta["rng_state"]
        start_epoch = meta["epoch"] + 1
    sampler = None
    if tc.neg_sample_ratio not in (0.0, 1.0):
        sampler = LogUniformSampler(item_frequency_ranking(data.windows, data.n_items))
    log = JsonlLog(out / "train_log.jsonl")
    state = state if state is not None else AdamState.zeros(params)

    def on_epoch(epoch, res):
        meta = {"epoch": epoch, "loss": res.loss, "rng_state": rng.bit_generator.state}
        save_checkpoint(out / "checkpoint.npz", config, params, meta=meta, state=state.to_arrays(),
                        storage_dtype=cfg.checkpoint_dtype)
        if not quiet:
            extra = f" masked={res.masked_fraction:.4f}" if res.masked_fraction is not None else ""
            print(f"epoch {epoch} loss {res.loss:.5f}{extra}")

    try:
        history = fit(data.windows, params, config, tc, sampler=sampler, state=state, start_epoch=start_epoch,
                      rng=rng, log=log, on_epoch=on_epoch)
    finally:
        log.close()
    return config, params, history


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.data_dir:
        raise DataError("--data-dir is required")
    data = load_prepared(cfg.data_dir)
    out = _out_dir(cfg)
    _train(cfg, data, out)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.data_dir or not cfg.checkpoint:
        raise DataError("--data-dir and --checkpoint are required")
    data = load_prepared(cfg.data_dir)
    out = _out_dir(cfg)
    config, params, _, _ = load_checkpoint(cfg.checkpoint)
    report = evaluate_model(params, config, data.instances, cfg.ks, cfg.visibility, use_bos=cfg.bos,
                            exclude_consumed=cfg.exclude_consumed)
    write_report(report, out / "report.json", config)
    write_ranks_csv(report, data.instances, out / "ranks.csv")
    print(format_table([(f"{report.mode}/{report.visibility}", report)]))
    return EXIT_OK


def concave_trend(values: list[float]) -> bool:
    """True when the sequence rises to an interior maximum and then falls."""
    if len(values) < 3:
        return False
    best = int(np.argmax(values))
    return 0 < best < len(values) - 1


def cmd_gridsearch(cfg: RunConfig) -> int:
    if not cfg.data_dir:
        raise DataError("--data-dir is required")
    data = load_prepared(cfg.data_dir)
    out = _out_dir(cfg)
    rows: list[tuple[str, EvalReport]] = []
    results = []
    for p in cfg.p_list:
        run = dataclasses.replace(cfg, mode=Variant.INPUT_B.value, context_mask_prob=p,
                                  output_dir=str(out / f"p{p:g}"))
        config, params, history = _train(run, data, _out_dir(run), quiet=True)
        report = evaluate_model(params, config, data.instances, cfg.ks, cfg.visibility, use_bos=cfg.bos,
                                exclude_consumed=cfg.exclude_consumed)
        write_report(report, Path(run.output_dir) / "report.json", config)
        rows.append((f"p={p:g}", report))
        results.append({"p": p, "final_loss": history[-1].loss if history else None, "metrics": report.metrics})
    metrics = list(rows[0][1].metrics)
    best = {m: cfg.p_list[int(np.argmax([r.metrics[m] for _, r in rows]))] for m in metrics}
    trend = {m: concave_trend([r.metrics[m] for _, r in rows]) for m in metrics}
    _write_json(out / "gridsearch.json", {"visibility": cfg.visibility, "rows": results, "argmax": best,
                                          "concave_trend_observed": trend})
    table = format_table(rows)
    (out / "gridsearch.txt").write_text(table + "\n")
    print(table)
    print("argmax: " + ", ".join(f"{m}: p={p:g}" for m, p in best.items()))
    print("concave trend: " + ", ".join(f"{m}: {'observed' if t else 'not observed'}" for m, t in trend.items()))
    return EXIT_OK


def _tiny_batch(config: ModelConfig, rng: np.random.Generator, B: int = 3) -> WindowArrays:
    N = config.N
    items = rng.integers(1, config.n_items + 1, size=(B, N))
    contexts = rng.integers(1, config.vocab_contexts, size=(B, N))
    targets = rng.integers(1, config.n_items + 1, size=(B, N))
    for b in range(B):
        pad = int(rng.integers(0, N - 1))
        items[b, :pad] = contexts[b, :pad] = targets[b, :pad] = 0
    return WindowArrays(items, contexts, targets, targets != 0)


def perturbed_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Random parameters with non-trivial layer-norm and bias values."""
    params = init_params(config, rng)
    for k, v in params.items():
        if k.split(".")[-1] in ("bo", "b1", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            params[k] = v + rng.normal(0.0, 0.3, size=v.shape)
    return params


def cmd_gradcheck(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    rng = np.random.default_rng(cfg.seed)
    report = {}
    ok = True
    for variant in Variant:
        config = ModelConfig(N=5, D=4, H=2, n_heads=2, vocab_items=9, vocab_contexts=4).with_mode(variant)
        params = perturbed_params(config, rng)
        checks = finite_difference_check(params, _tiny_batch(config, rng), config, epsilon=1e-5, tolerance=1e-4)
        report[variant.value] = {c.name: {"max_rel_err": c.max_rel_err, "passed": c.passed} for c in checks}
        worst = max(c.max_rel_err for c in checks)
        passed = all(c.passed for c in checks)
        ok &= passed
        print(f"mode {variant.value:>4}: max rel err {worst:.2e} {'PASS' if passed else 'FAIL'}")
    _write_json(out / "gradcheck.json", report)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def oracle_equivalence(seed: int, n_configs: int) -> list[dict]:
    from qcrec.model import model_forward, score_positions

    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_configs):
        N = int(rng.choice([4, 8, 16]))
        D = int(rng.choice([4, 8]))
        H = int(rng.choice([1, 2, 3]))
        heads = int(rng.choice([1, 2]))
        base = ModelConfig(N=N, D=D, H=H, n_heads=heads, vocab_items=12, vocab_contexts=5)
        batch = _tiny_batch(base, rng, B=1)
        for variant in Variant:
            config = base.with_mode(variant, "full")
            params = perturbed_params(config, rng)
            trace = model_forward(batch.items, batch.contexts, params, config)
            mask = batch.items != 0
            single = score_positions(trace, params, config, mask)
            ref = incremental_forward_oracle(batch.items[0], batch.contexts[0], params, config)[mask[0]]
            rows.append({"N": N, "D": D, "H": H, "heads": heads, "mode": variant.value,
                         "max_abs_diff": float(np.abs(single - ref).max())})
    return rows


def cmd_oracle_check(cfg: RunConfig) -> int:
    from qcrec.model import model_forward

    out = _out_dir(cfg)
    rows = oracle_equivalence(cfg.seed, cfg.n_configs)
    worst = max(r["max_abs_diff"] for r in rows)
    timing = []
    rng = np.random.default_rng(cfg.seed)
    for N in (8, 16, 32):
        config = ModelConfig(N=N, D=8, H=2, n_heads=2, vocab_items=12, vocab_contexts=5)
        params = init_params(config, rng)
        batch = _tiny_batch(config, rng, B=1)
        t0 = time.perf_counter()
        model_forward(batch.items, batch.contexts, params, config)
        vectorised = time.perf_counter() - t0
        measured = runtime_ratio(N, seed=cfg.seed)
        cost = forward_cost(N, 8, 2)
        timing.append({**measured, "vectorised_single_s": vectorised,
                       "flop_ratio": cost["oracle"] / cost["single"]})
    _write_json(out / "oracle_check.json", {"max_abs_diff": worst, "cases": rows, "timing": timing})
    passed = worst < 1e-9
    print(f"{len(rows)} comparisons, max |single - oracle| = {worst:.3e} {'PASS' if passed else 'FAIL'}")
    for t in timing:
        print(f"N={t['N']:>3}: oracle/single pass {t['ratio']:.1f} (multiply-add ratio {t['flop_ratio']:.1f}), "
              f"vectorised pass {t['vectorised_single_s'] * 1e3:.2f} ms")
    return EXIT_OK if passed else EXIT_CHECK_FAILED


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "gridsearch": cmd_gridsearch,
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qcrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_run_flags(sub.add_parser(name))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
