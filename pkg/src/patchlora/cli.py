"""Command-line entry point: ``synth``, ``train``, ``eval``, ``ablate``, ``pretrain``.

Configuration precedence is fixed: command-line flag, then spec file, then
built-in default. The fully resolved spec is written to the output directory
before any computation.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

from . import data
from .checkpoint import load_backbone, load_checkpoint, save_checkpoint
from .evaluation import (REFERENCE_FEW_SHOT_ALL_AVG, evaluate, fingerprint, horizon_table, persistence_report,
                         rank_sweep)
from .exceptions import ContractError, FormatError, PatchLoraError
from .model import ModelConfig, build
from .pretrain import PretrainConfig, check_disjoint_seeds, pretrain_backbone
from .train import TrainRun, train_protocol, zero_shot_eval

logger = logging.getLogger("patchlora")

RESOLVED_SPEC = "spec.resolved.json"
ERROR_FILE = "error.json"


def default_spec() -> dict:
    model = ModelConfig().to_dict()
    model.pop("seed")
    return {
        "seed": 0,
        "out": "runs",
        "data": {"csv": None, "synth": None},
        "stations": None,
        "horizons": [24],
        "ranks": [4, 8, 16, 32, 64],
        "backbone": None,
        "model": model,
        "split": {"test_hours": None, "test_fraction": 0.25, "val_fraction": 0.1, "few_shot_fraction": 0.1},
        "train": {"protocol": "long_term", "epochs": 10, "batch_size": 16, "lr": 1e-4, "patience": 3,
                  "max_grad_norm": None, "max_steps": None, "source_station": None, "target_station": None},
        "pretrain": {k: v for k, v in PretrainConfig().to_dict().items()},
    }


SYNTH_DEFAULTS = {"stations": 3, "hours": 4000, "seed": 7, "shift_step": 0.5, "noise_std": 1.0}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise ContractError(f"unknown spec field {path + key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ContractError(f"expected comma-separated integers, got {text!r}") from exc


def _flag_overrides(args) -> dict:
    """Spec fragment holding only the flags that were given."""
    o: dict = {}

    def put(path, value):
        if value is None:
            return
        node = o
        *parents, leaf = path.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value

    put("seed", getattr(args, "seed", None))
    put("out", getattr(args, "out", None))
    put("horizons", _csv_ints(args.horizons) if getattr(args, "horizons", None) else None)
    put("ranks", _csv_ints(args.ranks) if getattr(args, "ranks", None) else None)
    put("stations", args.stations_list.split(",") if getattr(args, "stations_list", None) else None)
    put("backbone", getattr(args, "backbone", None))
    if getattr(args, "command", None) != "ablate":
        put("train.protocol", getattr(args, "protocol", None))
    put("train.epochs", getattr(args, "epochs", None))
    put("train.lr", getattr(args, "lr", None))
    put("train.source_station", getattr(args, "source", None))
    put("train.target_station", getattr(args, "target", None))
    put("split.few_shot_fraction", getattr(args, "fraction", None))
    put("model.rank", getattr(args, "rank", None))
    if getattr(args, "csv", None):
        put("data.csv", [str(p) for p in args.csv])
    for key in SYNTH_DEFAULTS:
        put(f"data.synth.{key}", getattr(args, f"synth_{key}", None))
    put("pretrain.epochs", getattr(args, "pretrain_epochs", None))
    put("pretrain.corpus_hours", getattr(args, "corpus_hours", None))
    put("pretrain.seed", getattr(args, "pretrain_seed", None))
    return o


def resolve_spec(args) -> dict:
    spec = default_spec()
    if getattr(args, "spec", None):
        try:
            from_file = json.loads(Path(args.spec).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"spec file {args.spec} is not valid JSON: {exc}") from exc
        spec = _merge(spec, from_file)
    flags = _flag_overrides(args)
    synth_flags = flags.get("data", {}).pop("synth", None)
    spec = _merge(spec, flags)
    if synth_flags:
        spec["data"]["synth"] = {**SYNTH_DEFAULTS, **(spec["data"]["synth"] or {}), **synth_flags}
    elif isinstance(spec["data"]["synth"], dict):
        spec["data"]["synth"] = {**SYNTH_DEFAULTS, **spec["data"]["synth"]}
    return spec


def echo_spec(spec: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(spec, indent=2, sort_keys=True)
    (out / RESOLVED_SPEC).write_text(text + "\n")
    logger.info("resolved spec:\n%s", text)


# -- data and configs ---------------------------------------------------------
def load_stations(spec: dict) -> list[data.StationSeries]:
    src = spec["data"]
    if src.get("csv"):
        series = [data.load_csv(p, station_id=Path(p).stem) for p in src["csv"]]
        for s in series:
            for w in (s.report.warnings if s.report else []):
                logger.warning("%s: %s", s.station_id, w)
    elif src.get("synth"):
        sy = src["synth"]
        m = spec["model"]
        series = data.synthetic_stations(sy["stations"], sy["hours"], sy["seed"], sy["shift_step"],
                                         sy["noise_std"], m["lookback"], max(spec["horizons"]))
    else:
        raise ContractError("spec has no data source; set data.csv or data.synth (or pass --csv/--synth-*)")
    wanted = spec.get("stations")
    if wanted:
        by_id = {s.station_id: s for s in series}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise ContractError(f"unknown stations {missing}; available {sorted(by_id)}")
        series = [by_id[w] for w in wanted]
    return series


def data_seeds(spec: dict) -> list[int]:
    sy = spec["data"].get("synth")
    return [sy["seed"] + k for k in range(sy["stations"])] if sy else []


def model_config(spec: dict, horizon: int) -> ModelConfig:
    return ModelConfig.from_dict({**spec["model"], "horizon": horizon, "seed": spec["seed"]})


def train_run(spec: dict, protocol: str | None = None) -> TrainRun:
    t = spec["train"]
    return TrainRun(protocol=protocol or t["protocol"], epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                    patience=t["patience"], seed=spec["seed"], few_shot_fraction=spec["split"]["few_shot_fraction"],
                    source_station=t["source_station"], target_station=t["target_station"],
                    max_grad_norm=t["max_grad_norm"], max_steps=t["max_steps"])


def split_plan(spec: dict, n_hours: int) -> data.SplitPlan:
    s = spec["split"]
    return data.SplitPlan.chronological(n_hours, s["test_hours"], s["test_fraction"], s["val_fraction"],
                                        s["few_shot_fraction"])


def station_splits(spec: dict, series: data.StationSeries, horizon: int, protocol: str):
    samples = data.make_samples(series, spec["model"]["lookback"], horizon)
    return data.split(samples, split_plan(spec, len(series)), protocol, len(series))


def backbone_weights(spec: dict):
    if not spec.get("backbone"):
        return None
    weights, block = load_backbone(spec["backbone"])
    corpus = block.get("metadata", {}).get("pretrain")
    if corpus is not None:
        check_disjoint_seeds(corpus["seed"], data_seeds(spec))
    return weights


def spec_fingerprint(spec: dict) -> str:
    keep = {k: spec[k] for k in ("seed", "data", "stations", "horizons", "model", "split", "train", "backbone")}
    return fingerprint(keep)


RESULT_FIELDS = ["station", "horizon", "rank", "protocol", "mse", "mae", "raw_mse", "raw_mae", "n_samples",
                 "persistence_mse"]


def write_rows(path: Path, rows: list[dict], fields=RESULT_FIELDS) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def report_row(rep, persistence=None) -> dict:
    row = {k: getattr(rep, k) for k in RESULT_FIELDS if hasattr(rep, k)}
    if persistence is not None:
        row["persistence_mse"] = persistence.mse
    return row


def write_table(out: Path, stem: str, reports: dict, protocol: str) -> None:
    table = horizon_table(reports)
    (out / f"{stem}_table.csv").write_text(table.to_csv())
    ref = REFERENCE_FEW_SHOT_ALL_AVG if protocol == "few_shot" else None
    text = table.to_text(ref)
    (out / f"{stem}_table.txt").write_text(text)
    print(text, end="")


# -- commands -----------------------------------------------------------------
def cmd_synth(args, spec: dict) -> int:
    out = Path(spec["out"])
    sy = spec["data"]["synth"] or dict(SYNTH_DEFAULTS)
    spec["data"]["synth"] = sy
    echo_spec(spec, out)
    stations = data.synthetic_stations(sy["stations"], sy["hours"], sy["seed"], sy["shift_step"], sy["noise_std"],
                                       spec["model"]["lookback"], max(spec["horizons"]))
    for s in stations:
        path = data.write_csv(s, out / f"{s.station_id}.csv")
        logger.info("wrote %s (%d rows)", path, len(s))
    return 0


def cmd_train(args, spec: dict) -> int:
    out = Path(spec["out"])
    echo_spec(spec, out)
    protocol = spec["train"]["protocol"]
    stations = load_stations(spec)
    backbone = backbone_weights(spec)
    fp = spec_fingerprint(spec)
    by_id = {s.station_id: s for s in stations}
    if protocol == "zero_shot":
        src = spec["train"]["source_station"] or stations[0].station_id
        if src not in by_id:
            raise ContractError(f"source station {src!r} not in data")
        sources = [by_id[src]]
    else:
        sources = stations
    rows, reports = [], {}
    for series in sources:
        for h in spec["horizons"]:
            split_kind = "zero_shot_source" if protocol == "zero_shot" else protocol
            tr, va, te = station_splits(spec, series, h, split_kind)
            logger.info("%s h=%d: %s uses %d training samples", series.station_id, h, protocol, len(tr))
            run = train_run(spec)
            bundle, run = train_protocol(run, (tr, va, te), build(model_config(spec, h), backbone=backbone))
            bundle.metadata["station"] = series.station_id
            save_checkpoint(bundle, out / f"model_{series.station_id}_h{h}.g4ap")
            (out / f"history_{series.station_id}_h{h}.json").write_text(
                json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
            if protocol == "zero_shot":
                tgt = spec["train"]["target_station"]
                if not tgt:
                    continue
                if tgt not in by_id:
                    raise ContractError(f"target station {tgt!r} not in data")
                test = station_splits(spec, by_id[tgt], h, "long_term")[2]
                rep = zero_shot_eval(bundle, test, fingerprint=fp)
                rep.station = f"{series.station_id}->{tgt}"
            else:
                rep = evaluate(bundle, te, station=series.station_id, protocol=protocol, fingerprint=fp)
                test = te
            reports[(rep.station, h)] = rep
            rows.append(report_row(rep, persistence_report(test)))
    if rows:
        write_rows(out / f"results_{protocol}_{fp}.csv", rows)
        write_table(out, f"results_{protocol}_{fp}", reports, protocol)
    return 0


def cmd_eval(args, spec: dict) -> int:
    out = Path(spec["out"])
    echo_spec(spec, out)
    stations = {s.station_id: s for s in load_stations(spec)}
    if args.checkpoint:
        paths = [Path(p) for p in args.checkpoint]
    elif args.models:
        paths = sorted(Path(args.models).glob("model_*.g4ap"))
    else:
        raise ContractError("eval needs --checkpoint or --models")
    if not paths:
        raise ContractError("no checkpoints found")
    rows, reports = [], {}
    fp = spec_fingerprint(spec)
    horizons = set(spec["horizons"]) if args.horizons else None
    protocol = "zero_shot" if args.zero_shot else "eval"
    for path in paths:
        bundle = load_checkpoint(path)
        h = bundle.config.horizon
        if horizons is not None and h not in horizons:
            continue
        src = bundle.metadata.get("station")
        if args.zero_shot:
            if not args.target:
                raise ContractError("--zero-shot needs --target")
            if args.target not in stations:
                raise ContractError(f"target station {args.target!r} not in data")
            test = station_splits(spec, stations[args.target], h, "long_term")[2]
            if not test:
                raise ContractError(f"test split of {args.target} is empty")
            rep = zero_shot_eval(bundle, test, fingerprint=fp)
            rep.station = f"{src}->{args.target}"
        else:
            name = args.target or src
            if name not in stations:
                raise ContractError(f"station {name!r} not in data")
            test = station_splits(spec, stations[name], h, "long_term")[2]
            rep = evaluate(bundle, test, station=name, protocol=protocol, fingerprint=fp)
        reports[(rep.station, h)] = rep
        rows.append(report_row(rep, persistence_report(test)))
    if not rows:
        raise ContractError("no checkpoint matched the requested horizons")
    write_rows(out / f"results_{protocol}_{fp}.csv", rows)
    write_table(out, f"results_{protocol}_{fp}", reports, protocol)
    return 0


def cmd_ablate(args, spec: dict) -> int:
    out = Path(spec["out"])
    spec["train"]["protocol"] = args.protocol or "few_shot"
    echo_spec(spec, out)
    protocol = spec["train"]["protocol"]
    if protocol == "zero_shot":
        raise ContractError("rank ablation runs under long_term or few_shot")
    stations = load_stations(spec)
    backbone = backbone_weights(spec)
    fp = spec_fingerprint(spec)
    rows, grids = [], {}
    for series in stations:
        for h in spec["horizons"]:
            splits = station_splits(spec, series, h, protocol)
            grid = rank_sweep(model_config(spec, h), spec["ranks"], train_run(spec), splits,
                              station=series.station_id, backbone=backbone)
            grids[(series.station_id, h)] = grid
            for c in grid.cells:
                rows.append({**report_row(c.report), "adapter_fraction": c.adapter_fraction,
                             "trainable_fraction": c.trainable_fraction})
    fields = RESULT_FIELDS[:-1] + ["adapter_fraction", "trainable_fraction"]
    write_rows(out / f"results_ablate_{fp}.csv", rows, fields)
    ranks = sorted({c.rank for g in grids.values() for c in g.cells})
    mean_mse = {r: sum(g.mse_by_rank()[r] for g in grids.values()) / len(grids) for r in ranks}
    first = next(iter(grids.values()))
    (out / "ablation_mse.csv").write_text("rank,mse\n" + "".join(f"{r},{mean_mse[r]!r}\n" for r in ranks))
    (out / "ablation_fraction.csv").write_text(first.fraction_csv())
    norms = {f"{s}_h{h}": {c.rank: {"grad_norm": c.grad_norms, "adapter_grad_norm": c.adapter_grad_norms}
                           for c in g.cells} for (s, h), g in grids.items()}
    (out / "ablation_grad_norms.json").write_text(json.dumps(norms, indent=2, sort_keys=True) + "\n")
    for r in ranks:
        print(f"rank {r:>3}  mse {mean_mse[r]:.4f}")
    return 0


def cmd_pretrain(args, spec: dict) -> int:
    out = Path(spec["out"])
    echo_spec(spec, out)
    pc = PretrainConfig(**spec["pretrain"])
    check_disjoint_seeds(pc.seed, data_seeds(spec))
    cfg = model_config(spec, max(spec["horizons"]))
    _, history, path = pretrain_backbone(pc, cfg, out / "backbone.g4ap")
    (out / "pretrain_history.json").write_text(json.dumps({"loss": history}, indent=2) + "\n")
    logger.info("wrote %s", path)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "pretrain": cmd_pretrain}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="JSON run specification")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="top-level seed for model and training")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    datag = argparse.ArgumentParser(add_help=False)
    datag.add_argument("--csv", nargs="+", help="station CSV files")
    datag.add_argument("--synth-stations", type=int)
    datag.add_argument("--synth-hours", type=int)
    datag.add_argument("--synth-seed", type=int)
    datag.add_argument("--synth-shift-step", dest="synth_shift_step", type=float)
    datag.add_argument("--synth-noise-std", dest="synth_noise_std", type=float)
    datag.add_argument("--stations", dest="stations_list", help="comma-separated station ids to use")
    datag.add_argument("--horizons", help="comma-separated horizons, e.g. 24,36,48,60")
    datag.add_argument("--backbone", help="backbone checkpoint to load and freeze")

    parser = argparse.ArgumentParser(prog="patchlora", description="Patch-token PM2.5 forecasting experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic station CSVs")
    p.add_argument("--stations", dest="synth_stations", type=int)
    p.add_argument("--hours", dest="synth_hours", type=int)
    p.add_argument("--shift-step", dest="synth_shift_step", type=float)
    p.add_argument("--noise-std", dest="synth_noise_std", type=float)

    for name, helptext in (("train", "train per station and horizon"), ("ablate", "rank ablation sweep")):
        p = sub.add_parser(name, parents=[common, datag], help=helptext)
        p.add_argument("--protocol", choices=["long_term", "few_shot", "zero_shot"])
        p.add_argument("--fraction", type=float, help="few-shot fraction of training samples")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--rank", type=int)
        if name == "train":
            p.add_argument("--source", help="zero-shot source station")
            p.add_argument("--target", help="zero-shot target station")
        else:
            p.add_argument("--ranks", help="comma-separated ranks (default 4,8,16,32,64)")

    p = sub.add_parser("eval", parents=[common, datag], help="evaluate checkpoints")
    p.add_argument("--checkpoint", nargs="+")
    p.add_argument("--models", help="directory of model_<station>_h<horizon>.g4ap files")
    p.add_argument("--zero-shot", action="store_true")
    p.add_argument("--target", help="station to evaluate on")

    p = sub.add_parser("pretrain", parents=[common, datag], help="pretrain and save a backbone")
    p.add_argument("--epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--corpus-hours", type=int)
    p.add_argument("--pretrain-seed", type=int)
    return parser


def _write_error(out: Path | None, exc: BaseException, code: int) -> None:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / ERROR_FILE).write_text(json.dumps(record, indent=2) + "\n")
        except OSError:
            pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(args.log_level)
    out = Path(args.out) if args.out else None
    try:
        spec = resolve_spec(args)
        out = Path(spec["out"])
        if args.command == "synth":
            spec["data"]["csv"] = None
        return COMMANDS[args.command](args, spec)
    except PatchLoraError as exc:
        _write_error(out, exc, exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        _write_error(out, exc, 3)
        return 3


if __name__ == "__main__":
    sys.exit(main())
