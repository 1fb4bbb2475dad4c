"""Command-line entry point: ``djscc-hbf <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import Config, ConfigError, preset

log = logging.getLogger("djscc_hbf")

SCHEMA_VERSION = 1
COLUMNS = ["scheme", "K", "m", "snr_ul_db", "snr_dl_db", "seed", "sum_rate_bps_hz", "stddev"]
OUT_ENV = "DJSCC_HBF_OUT"


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# result tables

def write_table(path: Path, rows: list[dict], digest: str, seed) -> Path:
    buf = io.StringIO()
    buf.write(f"# schema={SCHEMA_VERSION}\n# config_digest={digest}\n# seed={seed}\n")
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in COLUMNS})
    path.write_text(buf.getvalue())
    return path


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def read_table(path: Path) -> tuple[dict, list[dict]]:
    """Parse a result CSV into (metadata, rows) with numeric columns typed."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        elif line:
            body.append(line)
    if meta.get("schema") != str(SCHEMA_VERSION):
        raise CliError(f"{path}: unsupported result schema {meta.get('schema')!r}")
    rows = list(csv.DictReader(body))
    if rows and list(rows[0]) != COLUMNS:
        raise CliError(f"{path}: unexpected columns {list(rows[0])}")
    for r in rows:
        for k in ("K", "m", "seed"):
            r[k] = int(r[k])
        for k in ("snr_ul_db", "snr_dl_db", "sum_rate_bps_hz", "stddev"):
            r[k] = float(r[k])
    return meta, rows


def eval_rows(scheme: str, cfg: Config, seed: int, table) -> list[dict]:
    return [{"scheme": scheme, "K": cfg.system.K, "m": cfg.system.m, "snr_ul_db": float(cfg.uplink.snr_ul_db),
             "snr_dl_db": r.snr_dl_db, "seed": seed, "sum_rate_bps_hz": r.mean, "stddev": r.std}
            for r in table]


# ---------------------------------------------------------------------------
# config / paths

def resolve_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else preset(args.preset)
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return cfg.with_overrides(overrides) if overrides else cfg


def out_dir(args) -> Path:
    root = args.out or os.environ.get(OUT_ENV) or "runs"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Dotted keys whose values differ between two config dicts."""
    keys = sorted(set(a) | set(b))
    out = []
    for k in keys:
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(config_diff(va, vb, f"{prefix}{k}."))
        elif va != vb:
            out.append(f"{prefix}{k}")
    return out


def _save_config(cfg: Config, out: Path) -> None:
    cfg.save(out / "config.json")


def _datasets(cfg: Config, out: Path):
    from .channel import DatasetError, read_dataset

    paths = [out / "data" / "train.csid", out / "data" / "eval.csid"]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise CliError(f"dataset not found ({', '.join(missing)}); run "
                       f"'djscc-hbf gen-data --out {out}' with the same config first")
    try:
        train_set, eval_set = (read_dataset(p) for p in paths)
    except DatasetError as exc:
        raise CliError(str(exc)) from exc
    s = cfg.system
    for ds in (train_set, eval_set):
        if ds.H_d.shape[1:] != (s.K, s.N_c, s.N_r, s.N_t):
            raise CliError(f"dataset dimensions {ds.H_d.shape[1:]} do not match the config; regenerate it")
    return train_set, eval_set


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: Config, out: Path, args) -> int:
    from .channel import file_digest, generate_dataset

    data = out / "data"
    data.mkdir(exist_ok=True)
    manifest = {"config_digest": cfg.digest(), "files": {}}
    for name, count, seed in (("train", cfg.data.train_size, cfg.data.train_seed),
                              ("eval", cfg.data.eval_size, cfg.data.eval_seed)):
        path = data / f"{name}.csid"
        generate_dataset(cfg, count, seed, path, workers=args.workers)
        manifest["files"][name] = {"seed": seed, "count": count, "sha256": file_digest(path)}
    (data / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _save_config(cfg, out)
    print(f"wrote {data}")
    return 0


def _train_one(cfg: Config, train_set, out: Path, tag: str = ""):
    from . import training as T

    state = T.train(cfg, train_set)
    T.save_checkpoint(state, out / f"model{tag}.ckpt")
    lines = [f"# schema={SCHEMA_VERSION}", f"# config_digest={cfg.digest()}", f"# seed={cfg.train.seed}",
             "step,loss"]
    lines += [f"{i + 1},{v!r}" for i, v in enumerate(state.losses)]
    (out / f"loss{tag}.csv").write_text("\n".join(lines) + "\n")
    return state


def cmd_train(cfg: Config, out: Path, args) -> int:
    train_set, _ = _datasets(cfg, out)
    state = _train_one(cfg, train_set, out)
    _save_config(cfg, out)
    print(f"trained {state.step} steps, final loss {state.losses[-1]:.4f}" if state.losses
          else "trained 0 steps")
    return 0


def _proposed_table(cfg: Config, out: Path, eval_set, train_set, args):
    from . import training as T

    ckpt = out / "model.ckpt"
    if ckpt.exists():
        model = T.load_model(ckpt, cfg)
    elif args.untrained:
        model = T.build_model(cfg)
    else:
        raise CliError(f"no checkpoint at {ckpt}; run 'train' first or pass --untrained")
    link = T.train_link(cfg)
    if cfg.uplink.feedback == "sscc":
        link.quantizer = T.calibrate_quantizer(model, train_set)
        link.ber = cfg.uplink.sscc.ber
    return T.evaluate(model, eval_set, cfg.eval.snr_dl_grid_db, link, cfg.eval.noise_seed)


def _baseline_job(job):
    from . import training as T

    scheme, cfg_dict, eval_path = job
    from .channel import read_dataset

    cfg = Config.from_dict(cfg_dict)
    ds = read_dataset(eval_path)
    grid = cfg.eval.snr_dl_grid_db
    if scheme == "pca_hb_perfect":
        return T.evaluate_pca(ds, grid, cfg.system.N_RF)
    if scheme == "random":
        return T.evaluate_random(ds, grid, cfg, cfg.eval.noise_seed, cfg.eval.random_draws)
    raise CliError(f"unknown baseline scheme '{scheme}'")


def _baselines(cfg: Config, out: Path, schemes, workers: int) -> dict:
    jobs = [(s, cfg.to_dict(), str(out / "data" / "eval.csid")) for s in schemes]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            tables = list(pool.map(_baseline_job, jobs))
    else:
        tables = [_baseline_job(j) for j in jobs]
    return dict(zip(schemes, tables))


def cmd_eval(cfg: Config, out: Path, args) -> int:
    train_set, eval_set = _datasets(cfg, out)
    table = _proposed_table(cfg, out, eval_set, train_set, args)
    write_table(out / "eval.csv", eval_rows("proposed", cfg, cfg.train.seed, table), cfg.digest(), cfg.train.seed)
    _save_config(cfg, out)
    for r in table:
        print(f"snr_dl={r.snr_dl_db:6.1f} dB  sum_rate={r.mean:.4f} +- {r.std:.4f}")
    return 0


def cmd_baseline(cfg: Config, out: Path, args) -> int:
    _datasets(cfg, out)
    tables = _baselines(cfg, out, ["pca_hb_perfect", "random"], args.workers)
    rows = [row for s, t in tables.items() for row in eval_rows(s, cfg, cfg.train.seed, t)]
    write_table(out / "baseline.csv", rows, cfg.digest(), cfg.train.seed)
    _save_config(cfg, out)
    print(f"wrote {out / 'baseline.csv'}")
    return 0


def cmd_sweep(cfg: Config, out: Path, args) -> int:
    train_set, eval_set = _datasets(cfg, out)
    rows = []
    base = [s for s in cfg.eval.schemes if s != "proposed"]
    tables = _baselines(cfg, out, base, args.workers) if base else {}
    for scheme in cfg.eval.schemes:
        table = (_proposed_table(cfg, out, eval_set, train_set, args) if scheme == "proposed"
                 else tables[scheme])
        rows.extend(eval_rows(scheme, cfg, cfg.train.seed, table))
    write_table(out / "sweep.csv", rows, cfg.digest(), cfg.train.seed)
    _save_config(cfg, out)
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    return 0


def ablation_pair(cfg: Config, seed: int) -> tuple[Config, Config]:
    on = cfg.with_overrides({"model.cpi_enabled": True, "train.seed": seed})
    off = cfg.with_overrides({"model.cpi_enabled": False, "train.seed": seed})
    diff = config_diff(on.to_dict(), off.to_dict())
    if diff != ["model.cpi_enabled"]:
        raise CliError(f"ablation pair differs in more than the CPI toggle: {diff}")
    return on, off


def cmd_ablate_cpi(cfg: Config, out: Path, args) -> int:
    from . import training as T

    train_set, eval_set = _datasets(cfg, out)
    rows = []
    for seed in cfg.eval.ablation_seeds:
        for scheme, run_cfg in zip(("proposed_cpi", "proposed_no_cpi"), ablation_pair(cfg, seed)):
            state = T.train(run_cfg, train_set)
            table = T.evaluate(state.model, eval_set, cfg.eval.snr_dl_grid_db, T.train_link(run_cfg),
                               cfg.eval.noise_seed)
            rows.extend(eval_rows(scheme, run_cfg, seed, table))
            print(f"seed {seed} {scheme}: " + ", ".join(f"{r.mean:.3f}" for r in table), flush=True)
    write_table(out / "ablation.csv", rows, cfg.digest(), list(cfg.eval.ablation_seeds))
    _save_config(cfg, out)
    for snr, on, off in paired_means(rows):
        print(f"snr_dl={snr:6.1f} dB  mean w/ CPI={on:.4f}  w/o CPI={off:.4f}")
    return 0


def paired_means(rows: list[dict]) -> list[tuple[float, float, float]]:
    """(snr_dl, mean with CPI, mean without CPI) over seeds present in both arms."""
    by = {}
    for r in rows:
        by.setdefault((r["scheme"], r["snr_dl_db"]), {})[r["seed"]] = r["sum_rate_bps_hz"]
    out = []
    for snr in sorted({k[1] for k in by}):
        on, off = by.get(("proposed_cpi", snr), {}), by.get(("proposed_no_cpi", snr), {})
        seeds = sorted(set(on) & set(off))
        if seeds:
            out.append((snr, sum(on[s] for s in seeds) / len(seeds), sum(off[s] for s in seeds) / len(seeds)))
    return out


def cmd_grad_check(cfg: Config, out: Path, args) -> int:
    from .training import pipeline_grad_check

    reports = pipeline_grad_check(cfg, seed=cfg.train.seed)
    lines = [f"# schema={SCHEMA_VERSION}", f"# config_digest={cfg.digest()}", f"# seed={cfg.train.seed}",
             "block,analytic_norm,max_rel_deviation,coords_checked,passed"]
    lines += [f"{r.name},{r.analytic_norm!r},{r.max_rel_deviation!r},{r.coords_checked},{int(r.passed)}"
              for r in reports]
    (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    failed = [r for r in reports if not r.passed]
    worst = max(reports, key=lambda r: r.max_rel_deviation)
    print(f"{len(reports) - len(failed)}/{len(reports)} blocks pass; worst {worst.name} "
          f"{worst.max_rel_deviation:.2e}")
    return 1 if failed else 0


RESULT_FILES = ("eval.csv", "sweep.csv", "baseline.csv", "ablation.csv")
COMPARABLE = ("system", "channel", "data", "eval")


def cmd_report(run_dirs, out: Path) -> int:
    if not run_dirs:
        raise CliError("report needs at least one run directory")
    configs = []
    for d in run_dirs:
        path = Path(d) / "config.json"
        if not path.exists():
            raise CliError(f"{d}: no config.json; is this a completed run directory?")
        configs.append((d, json.loads(path.read_text())))
    ref_dir, ref = configs[0]
    problems = []
    for d, c in configs[1:]:
        diff = [k for k in config_diff(ref, c) if k.split(".")[0] in COMPARABLE]
        if diff:
            problems.append(f"{d} vs {ref_dir}: " + ", ".join(diff))
    if problems:
        raise CliError("refusing to merge runs with inconsistent configs:\n  " + "\n  ".join(problems))

    merged, seen, digests = [], set(), []
    for d, _ in configs:
        for name in RESULT_FILES:
            path = Path(d) / name
            if not path.exists():
                continue
            meta, rows = read_table(path)
            digests.append(meta.get("config_digest", ""))
            for r in rows:
                key = tuple(r[k] for k in COLUMNS)
                if key not in seen:
                    seen.add(key)
                    merged.append(r)
    if not merged:
        raise CliError("no result tables found in the given run directories")
    merged.sort(key=lambda r: (r["scheme"], r["seed"], r["snr_ul_db"], r["snr_dl_db"]))
    write_table(out / "report.csv", merged, ",".join(sorted(set(digests))),
                ",".join(str(s) for s in sorted({r["seed"] for r in merged})))
    _plot_data(out / "plot_sum_rate_vs_snr_dl.csv", merged)
    ablation = paired_means(merged)
    if ablation:
        lines = ["x,y,series"]
        for snr, on, off in ablation:
            lines += [f"{snr!r},{on!r},w/ CPI", f"{snr!r},{off!r},w/o CPI"]
        (out / "plot_cpi_ablation.csv").write_text("\n".join(lines) + "\n")
    print(f"merged {len(merged)} rows into {out / 'report.csv'}")
    return 0


def _plot_data(path: Path, rows: list[dict]) -> None:
    acc = {}
    for r in rows:
        acc.setdefault((r["scheme"], r["snr_dl_db"]), []).append(r["sum_rate_bps_hz"])
    lines = ["x,y,series"]
    for (scheme, snr), vals in sorted(acc.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        lines.append(f"{snr!r},{sum(vals) / len(vals)!r},{scheme}")
    path.write_text("\n".join(lines) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate-cpi": cmd_ablate_cpi,
    "baseline": cmd_baseline,
    "grad-check": cmd_grad_check,
}


HELP = {
    "gen-data": "generate train/eval channel datasets",
    "train": "train the joint encoder/decoder",
    "eval": "evaluate the trained model over the SNR_dl grid",
    "sweep": "evaluate every configured scheme over the SNR_dl grid",
    "ablate-cpi": "paired trainings with CPI on and off",
    "baseline": "evaluate PCA-HB and random beamforming",
    "grad-check": "finite-difference check of every parameter block",
    "report": "merge run directories into report tables and plot data",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="djscc-hbf", description="DJSCC CSI feedback and hybrid "
                                     "beamforming experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "report"]:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("run_dirs", nargs="+")
            continue
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", default="desk", choices=["desk", "smoke", "full"])
        p.add_argument("--seed", type=int, help="overrides train.seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--override", action="append", metavar="KEY=VALUE")
        if name in ("eval", "sweep"):
            p.add_argument("--untrained", action="store_true",
                           help="evaluate the initialization when no checkpoint exists")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        out = out_dir(args)
        if args.command == "report":
            return cmd_report(args.run_dirs, out)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print("config error:\n  " + "\n  ".join(exc.problems), file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
