"""Command-line entry point: ``hwtrigger <command> [options]``.

Output layout under ``--out``::

    model.manifest.json / model.params.f32   clean checkpoint (train)
    train.json
    attack/results.csv, attack/summary.json, attack/run_NNNN.*   (attack)
    patch/traces.csv, patch/aggregate.csv, patch/summary.json    (patch)
    defense/<kind>.csv, defense/summary.json                     (defend)
    report.json                                                  (report)
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, attack, defense, engine, experiments
from . import numerics as nx
from .config import ConfigError, ExperimentConfig, load

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_OUTPUT = 4
EXIT_RUNS_FAILED = 5


class MissingArtifact(RuntimeError):
    pass


class OutputError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path):
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run the prerequisite command first")
    with open(path) as fh:
        return json.load(fh)


def _outdir(cfg: ExperimentConfig, sub: str = "") -> Path:
    p = Path(cfg.out) / sub if sub else Path(cfg.out)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-test"
        probe.touch()
        probe.unlink()
    except OSError as e:
        raise OutputError(f"output directory {p} is not writable: {e}") from e
    return p


def _prov(cfg: ExperimentConfig) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.hash()}


def _setup(cfg: ExperimentConfig) -> experiments.Setup:
    stem = Path(cfg.out) / "model"
    if not Path(str(stem) + engine.MANIFEST_SUFFIX).exists():
        raise MissingArtifact(f"no trained model at {stem}; run `train` first")
    model = engine.load_checkpoint(stem)
    dataset = experiments.make_dataset(cfg)
    info = _read_json(Path(cfg.out) / "train.json")
    return experiments.Setup(cfg, dataset, model, info["test_accuracy"])


def _run_stem(out: Path, run: int) -> Path:
    return out / f"run_{run:04d}"


def load_backdoors(cfg: ExperimentConfig, setup: experiments.Setup | None = None) -> list:
    """Successful attack results recorded by ``attack``, as BackdoorResult objects."""
    setup = _setup(cfg) if setup is None else setup
    adir = Path(cfg.out) / "attack"
    summary = _read_json(adir / "summary.json")
    out = []
    for run in summary["successful_runs"]:
        stem = _run_stem(adir, run)
        rec = _read_json(Path(str(stem) + ".json"))
        model = engine.load_checkpoint(stem)
        idx = rec["targets"]
        out.append(attack.BackdoorResult(
            model=model, target_indices=idx, targets=setup.dataset.train.inputs[idx], sources=rec["sources"],
            predictions=rec["predictions"], success=True, target_success=[True] * len(idx),
            accuracy=rec["accuracy"], baseline_accuracy=rec["baseline_accuracy"], iterations=rec["iterations"],
            mechanism=rec["mechanism"], h1=rec["h1"], h2=tuple(rec["h2"]), mode=rec["mode"],
            detail={"run": run}))
    return out


# --------------------------------------------------------------------------
# commands


def cmd_demo_frobenius(cfg: ExperimentConfig, args) -> int:
    names = args.profiles.split(",") if args.profiles else cfg.demo.profiles
    try:
        profiles = [nx.get_profile(n) for n in names]
    except KeyError as e:
        raise ConfigError(str(e)) from e
    values = nx.frobenius_demo(cfg.demo.n, cfg.demo.fill, profiles)
    for p in profiles:
        v = np.float32(values[p.name])
        print(f"{p.name:14s} {float(v)!r:24s} 0x{v.view(np.uint32):08x}  error {float(v) - 1.0:+.3e}")
    print(f"distinct values: {len({np.float32(v).tobytes() for v in values.values()})}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg)
    setup = experiments.train(cfg)
    engine.save_checkpoint(setup.model, out / "model")
    _write_json(out / "train.json", {
        "arch": cfg.model.arch,
        "test_accuracy": setup.test_accuracy,
        "train_size": len(setup.dataset.train),
        "test_size": len(setup.dataset.test),
        "model_fingerprint": setup.model.fingerprint(),
        **_prov(cfg),
    })
    print(f"trained {cfg.model.arch}: test accuracy {setup.test_accuracy:.4f}")
    return EXIT_OK


def _attack_one(setup, run):
    try:
        return run, experiments.attack_run(setup, run), None
    except Exception as e:  # reported per run, the campaign goes on
        return run, None, f"{type(e).__name__}: {e}"


RESULT_COLUMNS = ("run", "success", "target_success_rate", "targets", "sources", "mechanism", "iterations",
                  "accuracy", "baseline_accuracy", "retained", "h1", "h2", "mode", "variant")


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    setup = _setup(cfg)
    out = _outdir(cfg, "attack")
    for old in list(out.glob("run_*")):
        old.unlink()
    runs = list(range(cfg.attack.runs))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            outcomes = list(pool.map(_attack_one, [setup] * len(runs), runs))
    else:
        outcomes = [_attack_one(setup, r) for r in runs]
    prov = _prov(cfg)
    failures, successes = [], []
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*RESULT_COLUMNS, *prov])
        for run, res, err in outcomes:
            if err is not None:
                failures.append((run, err))
                continue
            s = res.summary()
            w.writerow([run, int(res.success), repr(s["target_success_rate"]), " ".join(map(str, s["targets"])),
                        " ".join(map(str, s["sources"])), res.mechanism or "-", res.iterations,
                        repr(res.accuracy), repr(res.baseline_accuracy), repr(res.retained), res.h1,
                        " ".join(res.h2), res.mode, cfg.attack.params.variant, *prov.values()])
            if res.success:
                successes.append(run)
                stem = _run_stem(out, run)
                engine.save_checkpoint(res.model, stem)
                _write_json(Path(str(stem) + ".json"), {**s, "run": run, **prov})
    done = len(runs) - len(failures)
    summary = {
        "runs": len(runs), "completed": done, "failed_runs": [r for r, _ in failures],
        "successful_runs": successes, "success_rate": len(successes) / done if done else 0.0,
        "attack": cfg.attack.params.to_dict(), "num_targets": cfg.attack.num_targets, **prov,
    }
    _write_json(out / "summary.json", summary)
    print(f"attack: {len(successes)}/{done} successful")
    for run, err in failures:
        print(f"run {run} failed: {err}", file=sys.stderr)
    return EXIT_OK if not failures else EXIT_RUNS_FAILED


def cmd_patch(cfg: ExperimentConfig, args) -> int:
    setup = _setup(cfg)
    corpus = load_backdoors(cfg, setup)
    out = _outdir(cfg, "patch")
    prov = _prov(cfg)
    traces = []
    for r in corpus:
        for t_idx, x in zip(r.target_indices, r.targets):
            traces.append(analysis.trace(r.model, x, r.h1, r.h2[0], f"run_{r.detail['run']:04d}", t_idx))
    analysis.write_traces_csv(traces, out / "traces.csv", prov)
    agg = analysis.aggregate_profile(traces) if traces else np.zeros(0)
    agg_n = analysis.aggregate_profile(traces, normalized=True) if traces else np.zeros(0)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "layer_kind", "aggregate", "aggregate_normalized", *prov])
        kinds = [layer.kind for layer in setup.model.layers]
        for i, (a, an) in enumerate(zip(agg, agg_n), start=1):
            w.writerow([i, kinds[i - 1], repr(float(a)), repr(float(an)), *prov.values()])
    sign_ok = [bool(t.deltas[0] < 0 < t.deltas[-1]) for t in traces]
    _write_json(out / "summary.json", {
        "traces": len(traces), "sign_property_holds": sum(sign_ok),
        "aggregate": [float(a) for a in agg], "aggregate_normalized": [float(a) for a in agg_n], **prov,
    })
    print(f"patch: {len(traces)} traces, sign property holds for {sum(sign_ok)}")
    return EXIT_OK


def cmd_defend(cfg: ExperimentConfig, args) -> int:
    setup = _setup(cfg)
    corpus = load_backdoors(cfg, setup)
    out = _outdir(cfg, "defense")
    prov = _prov(cfg)
    d = cfg.defense
    ids = [r.detail["run"] for r in corpus]
    reports = [
        defense.defend_input_perturbation(corpus, d.ulps, d.trials, cfg.derive_seed("defense", "ulp"), ids),
        defense.defend_batch_size(corpus, d.batch_sizes, ids),
        defense.defend_downcast(corpus, d.formats, ids),
        defense.defend_finetune(corpus, setup.dataset, d.finetune_steps, d.finetune_lr, d.finetune_momentum,
                                d.finetune_batch, cfg.derive_seed("defense", "finetune"), ids),
    ]
    for rep in reports:
        rep.write_csv(out / f"{rep.kind}.csv", prov)
    _write_json(out / "summary.json", {"corpus_size": len(corpus),
                                       "undefended": defense.undefended(corpus),
                                       "defenses": [rep.summary() for rep in reports], **prov})
    for rep in reports:
        print(f"{rep.kind:20s} " + "  ".join(f"{v}:{r:.3f}" for v, r in zip(rep.sweep, rep.rates)))
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    root = Path(cfg.out)
    parts = {}
    for key, rel in (("train", "train.json"), ("attack", "attack/summary.json"),
                     ("patch", "patch/summary.json"), ("defense", "defense/summary.json")):
        if (root / rel).exists():
            parts[key] = _read_json(root / rel)
    if not parts:
        raise MissingArtifact(f"nothing to report under {root}")
    _write_json(_outdir(cfg) / "report.json", {**parts, **_prov(cfg)})
    if "train" in parts:
        print(f"baseline accuracy   {parts['train']['test_accuracy']:.4f}")
    if "attack" in parts:
        a = parts["attack"]
        print(f"attack success      {a['success_rate']:.3f} ({len(a['successful_runs'])}/{a['completed']})")
    if "patch" in parts:
        print("aggregate per layer " + " ".join(f"{v:.3g}" for v in parts["patch"]["aggregate"]))
    if "defense" in parts:
        for rep in parts["defense"]["defenses"]:
            print(f"{rep['defense']:20s}" + " ".join(f"{v}:{r:.3f}" for v, r in
                                                    zip(rep["sweep"], rep["remaining_success"])))
    return EXIT_OK


COMMANDS = {
    "demo-frobenius": cmd_demo_frobenius,
    "train": cmd_train,
    "attack": cmd_attack,
    "patch": cmd_patch,
    "defend": cmd_defend,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hwtrigger", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--runs", type=int, help="number of attack runs")
    p.add_argument("--mode", choices=attack.MODES)
    p.add_argument("--variant", choices=attack.VARIANTS)
    p.add_argument("--layer-mask", help="comma-separated layer indices the attack may modify")
    p.add_argument("--profiles", help="comma-separated profile names (demo-frobenius)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for attack runs")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.runs is not None:
        cfg.attack.runs = args.runs
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.layer_mask is not None:
        try:
            overrides["layer_mask"] = tuple(int(v) for v in args.layer_mask.split(",") if v.strip())
        except ValueError as e:
            raise ConfigError(f"bad --layer-mask: {e}") from e
    if overrides:
        try:
            cfg.attack.params = replace(cfg.attack.params, **overrides)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return cfg.resolve()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except OutputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OUTPUT


if __name__ == "__main__":
    sys.exit(main())
