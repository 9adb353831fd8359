"""Command-line front end.

Each pipeline stage reads and writes files, so stages can be inspected and
rerun separately::

    msq characterize --device XC7Z045 --out frag.json
    msq train --config frag.json --seed 0 --out ckpt
    msq emulate --checkpoint ckpt --acts acts.bin --out emu
    msq report --metrics ckpt/metrics.csv --stats emu/stats.json --design frag.json

Exit codes: 0 success, 2 input error, 3 config error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import shutil
import sys
import tempfile
from collections import Counter
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import fpga
from .kernel import GemmStats, GemmTile, dequantize_output, hetero_gemm, output_denominator
from .partition import RowPartition, partition_layer
from .quantizers import (
    SP2,
    ActQuant,
    FixedPoint,
    QuantizedLayer,
    SchemeError,
    choose_alpha,
    project_matrix,
    quantize_activations,
)
from .tensor import MatrixFormatError, Rng, atomic_write_bytes, make_synthetic, read_matrix, write_matrix
from .train import MlpModel, TrainConfig, TrainingError, train

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _input_error(msg):
    return CliError(EXIT_INPUT, msg)


def _config_error(msg):
    return CliError(EXIT_CONFIG, msg)


# --- file helpers -----------------------------------------------------------------


@contextmanager
def atomic_dir(out: Path):
    """Yield a temp directory that replaces ``out`` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = None
    if out.exists():
        old = out.parent / f".{out.name}.old.{os.getpid()}"
        os.replace(out, old)
    os.replace(tmp, out)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _read_matrix(path) -> np.ndarray:
    try:
        return read_matrix(path)
    except FileNotFoundError:
        raise _input_error(f"{path}: no such file") from None
    except MatrixFormatError as exc:
        raise _input_error(f"{path}: {exc}") from None


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise _input_error(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise _input_error(f"{path}: invalid JSON ({exc})") from None


def _load_config(args) -> dict:
    return _read_json(args.config) if args.config else {}


def _opt(args, cfg: dict, name: str, default=None):
    """Command-line flag, else config key, else default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


def _schemes(args, cfg) -> tuple[FixedPoint, SP2]:
    try:
        return (FixedPoint(int(_opt(args, cfg, "fixed_bits", 4))),
                SP2(int(_opt(args, cfg, "sp2_m1", 2)), int(_opt(args, cfg, "sp2_m2", 1))))
    except SchemeError as exc:
        raise _config_error(str(exc)) from None


def _pr_sp2(args, cfg, default=0.0) -> float:
    pr = float(_opt(args, cfg, "pr_sp2", default))
    if not 0.0 <= pr <= 1.0:
        raise _config_error(f"pr_sp2 must be in [0, 1], got {pr}")
    return pr


# --- checkpoints ---------------------------------------------------------------------


def write_checkpoint(dirpath: Path, layers, biases=None, extra=None) -> None:
    manifest = {"layers": [], **(extra or {})}
    for i, ql in enumerate(layers):
        entry = {"name": ql.name, "weights": f"{ql.name}.bin", "quantized": f"{ql.name}.json"}
        write_matrix(dirpath / entry["weights"], ql.values())
        atomic_write_bytes(dirpath / entry["quantized"], _dump_json(ql.to_dict()))
        if biases is not None:
            entry["bias"] = f"{ql.name}.bias.bin"
            write_matrix(dirpath / entry["bias"], np.asarray(biases[i])[None, :])
        manifest["layers"].append(entry)
    atomic_write_bytes(dirpath / "manifest.json", _dump_json(manifest))


def read_checkpoint_layer(dirpath, index: int = 0) -> QuantizedLayer:
    dirpath = Path(dirpath)
    manifest = _read_json(dirpath / "manifest.json")
    try:
        entry = manifest["layers"][index]
    except (KeyError, IndexError):
        raise _input_error(f"{dirpath}: no layer {index}") from None
    try:
        return QuantizedLayer.from_dict(_read_json(dirpath / entry["quantized"]))
    except (KeyError, ValueError) as exc:
        raise _input_error(f"{dirpath}: bad layer file ({exc})") from None


# --- subcommands ---------------------------------------------------------------------


def cmd_quantize(args) -> int:
    cfg = _load_config(args)
    w = _read_matrix(args.input)
    fixed, sp2 = _schemes(args, cfg)
    pr = _pr_sp2(args, cfg)
    try:
        part = partition_layer(w, pr) if w.shape[1] >= 2 else RowPartition.uniform(w.shape[0])
    except ValueError as exc:
        raise _input_error(str(exc)) from None
    alpha = _opt(args, cfg, "alpha")
    if alpha is None:
        alpha = choose_alpha(w, part.row_schemes(fixed, sp2))
    elif not float(alpha) > 0:
        raise _config_error("alpha must be positive")
    name = _opt(args, cfg, "layer", "layer0")
    _, ql = project_matrix(w, part, float(alpha), fixed, sp2,
                           act_bits=int(_opt(args, cfg, "act_bits", 4)), name=name)
    values = ql.values()
    hist = Counter(repr(float(v)) for v in values.ravel())
    summary = {
        "layer": name,
        "alpha": ql.alpha,
        "pr_sp2": pr,
        "theta": part.to_dict()["theta"],
        "rows": part.to_dict()["assignments"],
        "distinct_levels": len(hist),
        "level_histogram": dict(sorted(hist.items(), key=lambda kv: float(kv[0]))),
        "mse": float(np.mean((values - w) ** 2)),
    }
    with atomic_dir(Path(args.out)) as tmp:
        write_checkpoint(tmp, [ql])
        atomic_write_bytes(tmp / "summary.json", _dump_json(summary))
    print(json.dumps({k: summary[k] for k in ("layer", "alpha", "distinct_levels", "mse")}))
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _load_config(args)
    w = _read_matrix(args.input)
    try:
        part = partition_layer(w, _pr_sp2(args, cfg))
    except ValueError as exc:
        raise _input_error(str(exc)) from None
    payload = _dump_json(part.to_dict(_opt(args, cfg, "layer", "layer0")))
    if args.out:
        atomic_write_bytes(args.out, payload)
    else:
        sys.stdout.write(payload.decode())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.seed is None and "seed" not in cfg:
        raise _config_error("train requires --seed (or a seed in --config)")
    seed = int(args.seed if args.seed is not None else cfg["seed"])
    try:
        tcfg = TrainConfig.from_dict({**cfg, "seed": seed, "pr_sp2": _pr_sp2(args, cfg, 2 / 3)})
    except (TypeError, ValueError) as exc:
        raise _config_error(str(exc)) from None
    num_classes = int(cfg.get("num_classes", 2))
    n_train, n_test = int(cfg.get("n_train", 1000)), int(cfg.get("n_test", 500))
    n_features = int(cfg.get("n_features", 8))
    hidden = list(cfg.get("hidden", [16]))
    rng = Rng(seed)
    data = make_synthetic(num_classes, n_train + n_test, rng.spawn(0), n_features=n_features,
                          separation=float(cfg.get("separation", 4.0)))
    train_set, test_set = data.split(n_train)
    model = MlpModel.init([n_features, *hidden, num_classes], rng.spawn(1))
    try:
        result = train(model, train_set, tcfg, eval_data=test_set)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "float_acc", "quant_acc"])
    for m in result.history:
        writer.writerow([m.epoch, repr(m.loss), repr(m.float_acc), repr(m.quant_acc)])
    extra = {
        "config": tcfg.to_dict(),
        "float_accuracy": result.float_accuracy,
        "quant_accuracy": result.quant_accuracy,
        "activation_alpha": [aq.alpha if aq else None for aq in result.act_quants],
    }
    with atomic_dir(Path(args.out)) as tmp:
        write_checkpoint(tmp, result.layers, [l.b for l in result.model.layers], extra)
        atomic_write_bytes(tmp / "metrics.csv", buf.getvalue().encode())
    print(json.dumps({"float_accuracy": result.float_accuracy, "quant_accuracy": result.quant_accuracy}))
    return EXIT_OK


def _tile(args, cfg) -> GemmTile:
    d = _read_json(args.design) if args.design else cfg
    keys = ("bat", "blk_in", "blk_out_fixed", "blk_out_sp2")
    defaults = {"bat": 1, "blk_in": 16, "blk_out_fixed": 16, "blk_out_sp2": 24}
    try:
        return GemmTile(*(int(_opt(args, d, k, defaults[k])) for k in keys))
    except ValueError as exc:
        raise _config_error(str(exc)) from None


def cmd_emulate(args) -> int:
    cfg = _load_config(args)
    layer = read_checkpoint_layer(args.checkpoint, args.layer)
    acts = _read_matrix(args.acts)
    if acts.shape[1] != layer.shape[1]:
        raise _input_error(f"activations have {acts.shape[1]} columns, layer expects {layer.shape[1]}")
    alpha_a = _opt(args, cfg, "act_alpha", layer.act_alpha)
    if alpha_a is None:
        alpha_a = float(acts.max()) if acts.size and acts.max() > 0 else 1.0
    try:
        aq = ActQuant(layer.act_bits, float(alpha_a))
    except SchemeError as exc:
        raise _config_error(str(exc)) from None
    codes, scale = quantize_activations(acts, aq)
    tile = _tile(args, cfg)
    try:
        out, index_map, stats = hetero_gemm(codes, layer, tile)
    except OverflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise _config_error(str(exc)) from None
    real = dequantize_output(out, layer, scale)
    stats_json = {
        **stats.to_dict(),
        "layer": layer.name,
        "rows": layer.shape[0],
        "cols": layer.shape[1],
        "batch": codes.shape[0],
        "denominator": output_denominator(layer),
        "act_alpha": aq.alpha,
        "act_bits": aq.bits,
        "tile": {"bat": tile.bat, "blk_in": tile.blk_in,
                 "blk_out_fixed": tile.blk_out_fixed, "blk_out_sp2": tile.blk_out_sp2},
        "filter_index": {"fixed": list(index_map.fixed), "sp2": list(index_map.sp2)},
    }
    with atomic_dir(Path(args.out)) as tmp:
        write_matrix(tmp / "outputs.bin", real)
        write_matrix(tmp / "outputs_int.bin", out, dtype="i64")
        atomic_write_bytes(tmp / "stats.json", _dump_json(stats_json))
    print(json.dumps(stats.to_dict()))
    return EXIT_OK


def cmd_characterize(args) -> int:
    cfg = _load_config(args)
    name = _opt(args, cfg, "device")
    if not name:
        raise _config_error("characterize needs --device")
    try:
        device = fpga.get_device(name, args.devices)
    except fpga.UnknownDevice:
        raise _config_error(f"unknown device {name!r}") from None
    lut_cap = float(_opt(args, cfg, "lut_cap", 0.7))
    try:
        chosen, table = fpga.characterize(device, lut_cap)
    except (fpga.InfeasibleDesign, fpga.CalibrationError, KeyError) as exc:
        raise _config_error(str(exc)) from None

    fmt = args.format or "csv"
    if fmt == "json":
        sys.stdout.write(json.dumps(table, indent=2) + "\n")
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=list(table[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(table)
    fragment = {
        "device": device.name,
        "pr_sp2": chosen.pr_sp2,
        "ratio": chosen.ratio_label,
        "bat": chosen.bat,
        "blk_in": chosen.blk_in,
        "blk_out_fixed": chosen.blk_out_fixed,
        "blk_out_sp2": chosen.blk_out_sp2,
        "freq_mhz": chosen.freq_mhz,
        "peak_gops": fpga.peak_throughput(chosen),
        "lut_cap": lut_cap,
    }
    if args.out:
        atomic_write_bytes(args.out, _dump_json(fragment))
    return EXIT_OK


REPORT_FIELDS = ["source", "layer", "macs_fixed", "macs_sp2", "idle_slots", "cycles_ideal",
                 "utilization", "est_gops", "float_acc", "quant_acc"]


def _final_metrics(path) -> dict:
    try:
        rows = list(csv.DictReader(Path(path).read_text().splitlines()))
    except FileNotFoundError:
        raise _input_error(f"{path}: no such file") from None
    if not rows:
        return {}
    return {"float_acc": float(rows[-1]["float_acc"]), "quant_acc": float(rows[-1]["quant_acc"])}


def build_report(stats_paths, metrics_path=None, design_path=None) -> list[dict]:
    metrics = _final_metrics(metrics_path) if metrics_path else {}
    dp = None
    if design_path:
        d = _read_json(design_path)
        try:
            dp = fpga.DesignPoint(d.get("device", ""), int(d["bat"]), int(d["blk_in"]),
                                  int(d["blk_out_fixed"]), int(d["blk_out_sp2"]),
                                  float(d.get("freq_mhz", 100.0)))
        except (KeyError, ValueError) as exc:
            raise _config_error(f"{design_path}: {exc}") from None
    rows = []
    for path in stats_paths:
        s = _read_json(path)
        try:
            stats = GemmStats(**{k: int(s[k]) for k in
                                 ("macs_fixed", "macs_sp2", "idle_slots", "stall_slots", "cycles_ideal")
                                 if k in s})
        except (TypeError, ValueError) as exc:
            raise _input_error(f"{path}: {exc}") from None
        est = fpga.estimate_layer_throughput(dp, stats) if dp else None
        rows.append({
            "source": str(path),
            "layer": s.get("layer", ""),
            "macs_fixed": stats.macs_fixed,
            "macs_sp2": stats.macs_sp2,
            "idle_slots": stats.idle_slots,
            "cycles_ideal": stats.cycles_ideal,
            "utilization": stats.utilization,
            "est_gops": est.gops if est else None,
            "float_acc": metrics.get("float_acc"),
            "quant_acc": metrics.get("quant_acc"),
        })
    return rows


def cmd_report(args) -> int:
    rows = build_report(args.stats or [], args.metrics, args.design)
    fmt = args.format or "csv"
    if fmt == "json":
        payload = _dump_json(rows)
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                             for k, v in r.items()})
        payload = buf.getvalue().encode()
    if args.out:
        atomic_write_bytes(args.out, payload)
    else:
        sys.stdout.write(payload.decode())
    return EXIT_OK


# --- argument parsing -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--config", help="JSON file supplying defaults for flags")
    common.add_argument("--out", help="output path")
    common.add_argument("--format", choices=["csv", "json"], help="report format")

    scheme = argparse.ArgumentParser(add_help=False)
    scheme.add_argument("--fixed-bits", dest="fixed_bits", type=int)
    scheme.add_argument("--sp2-m1", dest="sp2_m1", type=int)
    scheme.add_argument("--sp2-m2", dest="sp2_m2", type=int)
    scheme.add_argument("--pr-sp2", dest="pr_sp2", type=float)

    tile = argparse.ArgumentParser(add_help=False)
    tile.add_argument("--design", help="design-point JSON, e.g. from characterize")
    for flag in ("bat", "blk-in", "blk-out-fixed", "blk-out-sp2"):
        tile.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=int)

    p = argparse.ArgumentParser(prog="msq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", parents=[common, scheme], help="quantize one weight matrix")
    q.add_argument("input")
    q.add_argument("--alpha", type=float)
    q.add_argument("--act-bits", dest="act_bits", type=int)
    q.add_argument("--layer")
    q.set_defaults(func=cmd_quantize, needs_out=True)

    pa = sub.add_parser("partition", parents=[common, scheme], help="partition rows of a layer")
    pa.add_argument("input")
    pa.add_argument("--layer")
    pa.set_defaults(func=cmd_partition, needs_out=False)

    t = sub.add_parser("train", parents=[common, scheme], help="train the toy MLP")
    t.set_defaults(func=cmd_train, needs_out=True)

    e = sub.add_parser("emulate", parents=[common, tile], help="run a layer on the GEMM emulator")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--acts", required=True)
    e.add_argument("--layer", type=int, default=0)
    e.add_argument("--act-alpha", dest="act_alpha", type=float)
    e.set_defaults(func=cmd_emulate, needs_out=True)

    c = sub.add_parser("characterize", parents=[common], help="pick the SP2/fixed ratio for a device")
    c.add_argument("--device")
    c.add_argument("--devices", help="device database JSON (default: shipped database)")
    c.add_argument("--lut-cap", dest="lut_cap", type=float)
    c.set_defaults(func=cmd_characterize, needs_out=False)

    r = sub.add_parser("report", parents=[common], help="merge metrics and stats into one table")
    r.add_argument("--metrics")
    r.add_argument("--stats", action="append")
    r.add_argument("--design")
    r.set_defaults(func=cmd_report, needs_out=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.needs_out and not args.out:
            raise _config_error(f"{args.command} requires --out")
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
