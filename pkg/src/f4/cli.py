"""Command line pipeline: train -> quantize -> compress -> simulate -> report.

Every command writes into a run directory (``--out``, or a timestamped
default under ./runs) and drops a ``metrics.json`` for the report
command to consolidate. Exit codes: 0 success, 1 usage error, 2 data
error, 3 internal fault.
"""

import argparse
import csv
import json
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .codec import (
    compression_ratio,
    deserialize_model,
    format_bit_sizes,
    serialize_model,
)
from .config import build_config
from .costmodel import EnergyCoefficients, format_cost_table, tally_trace, write_cost_csv
from .data import load_idx_dataset, synthetic_dataset
from .datapath import write_trace_csv, write_trace_jsonl
from .ecq import ecl_assign, empirical_entropy, quantize_model, sparsity
from .errors import DataFormatError, F4Error, NotRepresentable, SimulationFault
from .mlp import accuracy as model_accuracy
from .mlp import init_model, preset_model
from .pack import build_container, dequantized_accuracy, simulated_accuracy
from .train import (
    load_checkpoint,
    model_entropy,
    model_sparsity,
    pretrain,
    save_checkpoint,
    ste_finetune,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

LOG_COLUMNS = ["phase", "epoch", "loss", "accuracy", "entropy", "sparsity"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def make_run_dir(cfg, command):
    out = cfg.out or f"runs/{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def build_model(cfg):
    if cfg.preset == "custom":
        return init_model(cfg.model_dims(), batchnorm=cfg.batchnorm, seed=cfg.seed)
    return preset_model(
        cfg.preset, seed=cfg.seed, input_dim=cfg.input_dim or None
    )


def mnist_dataset(data_dir, split):
    base = Path(data_dir) / "mnist"
    if split == "train":
        return load_idx_dataset(
            base / "train-images-idx3-ubyte", base / "train-labels-idx1-ubyte"
        )
    return load_idx_dataset(
        base / "t10k-images-idx3-ubyte", base / "t10k-labels-idx1-ubyte"
    )


def load_datasets(cfg, model):
    if cfg.dataset == "mnist":
        train = mnist_dataset(cfg.data_dir, "train")
        test = mnist_dataset(cfg.data_dir, "test")
    elif cfg.dataset == "synthetic":
        dim, classes = model.in_features, model.num_classes
        train = synthetic_dataset(cfg.synth_train, dim, classes, seed=cfg.seed, split=0)
        test = synthetic_dataset(cfg.synth_test, dim, classes, seed=cfg.seed, split=1)
    else:
        raise DataFormatError(f"unknown dataset {cfg.dataset!r}")
    if model.in_features != train.dim:
        raise ValueError(
            f"model expects {model.in_features} inputs but dataset has {train.dim};"
            " set --input-dim or pick a matching preset"
        )
    if cfg.limit_train:
        train = train.subset(cfg.limit_train)
    return train, test


def write_metrics(run_dir, metrics):
    with open(run_dir / "metrics.json", "w") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_log_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def coefficients_from(cfg):
    return EnergyCoefficients(
        c_add=cfg.c_add,
        c_mul=cfg.c_mul,
        c_fifo=cfg.c_fifo,
        repeat_discount=cfg.repeat_discount,
        c_offchip=cfg.c_offchip,
        c_onchip=cfg.c_onchip,
    )


def _cfg_from_args(args, **extra):
    overrides = {
        key: getattr(args, key)
        for key in (
            "preset", "dims", "batchnorm", "input_dim", "dataset", "data_dir",
            "lam", "lr", "omega_lr", "ste_lr", "lr_decay_epoch",
            "lr_decay_factor", "epochs_pretrain", "epochs_ste",
            "batch_size", "seed", "reassign_every", "omega_update_every",
            "limit_train", "out", "c_add", "c_mul", "c_fifo",
            "repeat_discount", "c_offchip", "c_onchip",
        )
        if hasattr(args, key)
    }
    overrides.update(extra)
    return build_config(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------- commands


def cmd_train(args):
    cfg = _cfg_from_args(args)
    run_dir = make_run_dir(cfg, "train")
    (run_dir / "config.cfg").write_text(cfg.to_text())
    model = build_model(cfg)
    train_ds, test_ds = load_datasets(cfg, model)

    def show(row):
        print(
            f"[{row['phase']}] epoch {row['epoch']}: loss={row['loss']:.4f} "
            f"acc={row['accuracy']:.4f}"
            + (
                f" H={row['entropy']:.3f} sparsity={row['sparsity']:.3f}"
                if row["entropy"] != ""
                else ""
            )
        )

    fp_rows = pretrain(
        model, train_ds, test_ds, cfg.epochs_pretrain, cfg.lr,
        cfg.batch_size, cfg.seed, log=show,
        lr_decay_epoch=cfg.lr_decay_epoch, lr_decay_factor=cfg.lr_decay_factor,
    )
    write_log_csv(run_dir / "train_fp.csv", fp_rows)
    save_checkpoint(
        run_dir / "checkpoint_fp.npz", model, meta={"preset": cfg.preset, "seed": cfg.seed}
    )
    metrics = {
        "command": "train",
        "preset": cfg.preset,
        "lam": cfg.lam,
        "seed": cfg.seed,
        "acc_fp": fp_rows[-1]["accuracy"] if fp_rows else None,
    }
    if cfg.epochs_ste > 0:
        qlayers, ste_rows = ste_finetune(
            model, train_ds, test_ds, cfg.epochs_ste, cfg.lam, cfg.effective_ste_lr(),
            cfg.effective_omega_lr(), cfg.batch_size, cfg.seed,
            reassign_every=cfg.reassign_every,
            omega_update_every=cfg.omega_update_every,
            log=show,
            lr_decay_epoch=cfg.lr_decay_epoch, lr_decay_factor=cfg.lr_decay_factor,
        )
        write_log_csv(run_dir / "train_ste.csv", ste_rows)
        save_checkpoint(
            run_dir / "checkpoint_ste.npz", model, qlayers,
            meta={"preset": cfg.preset, "seed": cfg.seed, "lam": cfg.lam},
        )
        metrics.update(
            acc_ste=ste_rows[-1]["accuracy"] if ste_rows else None,
            entropy=model_entropy(qlayers),
            sparsity=model_sparsity(qlayers),
        )
    write_metrics(run_dir, metrics)
    print(f"run artifacts in {run_dir}")
    return EXIT_OK


def cmd_quantize(args):
    cfg = _cfg_from_args(args)
    run_dir = make_run_dir(cfg, "quantize")
    model, qlayers, meta = load_checkpoint(args.checkpoint)
    if qlayers is not None:
        for ql in qlayers:  # keep trained codebooks, reassign codes
            ql.codes = ecl_assign(ql.shadow_weights, ql.codebook, cfg.lam)
    else:
        qlayers = quantize_model(model, cfg.lam)
    metrics = {
        "command": "quantize",
        "lam": cfg.lam,
        "entropy": model_entropy(qlayers),
        "sparsity": model_sparsity(qlayers),
    }
    if not args.no_eval:
        _, test_ds = load_datasets(cfg, model)
        metrics["acc_fp"] = model_accuracy(model, test_ds)
        metrics["acc_quant"] = dequantized_accuracy(model, qlayers, test_ds)
    save_checkpoint(
        run_dir / "checkpoint_quant.npz", model, qlayers,
        meta={**meta, "lam": cfg.lam},
    )
    write_metrics(run_dir, metrics)
    print(json.dumps(metrics, sort_keys=True, indent=2))
    return EXIT_OK


SIDE_CAR_BITS_FIXED = 144  # omega (4x16+16) + alpha2 (32) + act_scale (32)


def _size_report_rows(qlayers_codes):
    rows = []
    for i, codes in enumerate(qlayers_codes):
        sizes = format_bit_sizes(codes)
        chosen = min(
            (f for f in ("dense4", "bitmask", "csr") if sizes[f] is not None),
            key=lambda f: sizes[f],
        )
        rows.append(
            {
                "layer": i,
                "rows": codes.shape[0],
                "cols": codes.shape[1],
                "format": chosen,
                "bits_dense4": sizes["dense4"],
                "bits_bitmask": sizes["bitmask"],
                "bits_csr": sizes["csr"] if sizes["csr"] is not None else "",
                "bits_chosen": sizes[chosen],
                "sparsity": sparsity(codes),
                "entropy": empirical_entropy(codes) if codes.size else 0.0,
            }
        )
    return rows


def cmd_compress(args):
    cfg = _cfg_from_args(args)
    run_dir = make_run_dir(cfg, "compress")
    model, qlayers, meta = load_checkpoint(args.checkpoint)
    if qlayers is None:
        raise DataFormatError(
            f"{args.checkpoint} holds no quantization state; run quantize first"
        )
    train_ds, _ = load_datasets(cfg, model)
    calib = train_ds.samples[: args.calib_samples]
    container = build_container(model, qlayers, calib)
    container_path = run_dir / "model.f4c"
    n_bytes = serialize_model(container, container_path)
    codes_list = [ql.codes for ql in qlayers]
    rows = _size_report_rows(codes_list)
    with open(run_dir / "size_report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    weight_bits_fp = sum(32 * c.size for c in codes_list)
    sidecar_bits = sum(
        SIDE_CAR_BITS_FIXED + 64 * c.shape[0] for c in codes_list
    )  # + alpha1/bias at 32 bits per output row each
    hybrid_bits = sum(r["bits_chosen"] for r in rows)
    csr_bits = sum(
        (r["bits_csr"] if r["bits_csr"] != "" else r["bits_dense4"]) for r in rows
    )
    metrics = {
        "command": "compress",
        "lam": meta.get("lam"),
        "seed": meta.get("seed"),
        "container_bytes": n_bytes,
        "cr_hybrid": compression_ratio(codes_list, "hybrid"),
        "cr_csr_only": compression_ratio(codes_list, "csr_only"),
        "cr_hybrid_with_sidecars": weight_bits_fp / (hybrid_bits + sidecar_bits),
        "cr_csr_only_with_sidecars": weight_bits_fp / (csr_bits + sidecar_bits),
        "entropy": model_entropy(qlayers),
        "sparsity": model_sparsity(qlayers),
        "formats": [r["format"] for r in rows],
    }
    write_metrics(run_dir, metrics)
    print(json.dumps(metrics, sort_keys=True, indent=2))
    print(f"container written to {container_path}")
    return EXIT_OK


def cmd_simulate(args):
    cfg = _cfg_from_args(args)
    run_dir = make_run_dir(cfg, "simulate")
    container = deserialize_model(args.container)
    if not container.layers:
        raise DataFormatError("container holds no layers")
    in_dim = container.layers[0].compressed.cols

    class _Shim:
        in_features = in_dim
        num_classes = container.layers[-1].compressed.rows

    _, test_ds = load_datasets(cfg, _Shim)
    if args.limit:
        test_ds = test_ds.subset(args.limit)
    acc, traces = simulated_accuracy(container, test_ds)
    report = tally_trace(traces, container, coefficients_from(cfg))
    formats = [l.compressed.format for l in container.layers]
    write_cost_csv(report, run_dir / "cost_report.csv")
    write_trace_csv(traces, run_dir / "trace.csv", formats)
    write_trace_jsonl(traces, run_dir / "trace.jsonl", formats)
    metrics = {
        "command": "simulate",
        "samples": len(test_ds),
        "acc_sim": acc,
        "energy_proxy": report.total.energy_proxy,
        "entropy": report.total.entropy,
        "sparsity": report.total.sparsity,
        "adds": report.total.adds,
        "skipped_adds": report.total.skipped_adds,
        "mults": report.total.mults,
        "offchip_bytes": report.total.offchip_bytes,
        "onchip_bytes": report.total.onchip_bytes,
        "overflow_events": sum(t.overflow_events for t in traces),
        "fifo_overflows": sum(t.fifo_overflows for t in traces),
        "int8_clamps": sum(t.int8_clamps for t in traces),
    }
    if args.reference:
        model, qlayers, _ = load_checkpoint(args.reference)
        if qlayers is None:
            raise DataFormatError("reference checkpoint has no quantization state")
        ref = dequantized_accuracy(model, qlayers, test_ds)
        metrics["acc_reference"] = ref
        metrics["acc_delta"] = acc - ref
    write_metrics(run_dir, metrics)
    print(format_cost_table(report))
    print(json.dumps({k: metrics[k] for k in sorted(metrics) if k != "command"},
                     indent=2))
    return EXIT_OK


REPORT_COLUMNS = [
    "run", "lam", "seed", "acc_fp", "acc_ste", "acc_quant", "acc_sim",
    "acc_reference", "cr_hybrid", "cr_csr_only", "entropy", "sparsity",
    "energy_proxy",
]


def cmd_report(args):
    root = Path(args.run_dir)
    if not root.is_dir():
        raise DataFormatError(f"run directory not found: {root}")
    rows = []
    for metrics_path in sorted(root.glob("*/metrics.json")):
        with open(metrics_path) as fh:
            metrics = json.load(fh)
        metrics["run"] = metrics_path.parent.name
        rows.append(metrics)
    if not rows:
        raise DataFormatError(f"no run metrics found under {root}")
    rows.sort(key=lambda r: (r.get("lam") or 0.0, r.get("seed") or 0, r["run"]))
    with open(root / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |",
             "|" + "---|" * len(REPORT_COLUMNS)]
    for r in rows:
        cells = []
        for c in REPORT_COLUMNS:
            v = r.get(c, "")
            cells.append(f"{v:.4g}" if isinstance(v, float) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    (root / "summary.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_config_flags(p, include_training=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="run output directory (default: timestamped)")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--dataset", choices=["mnist", "synthetic"], dest="dataset")
    p.add_argument("--lambda", type=float, dest="lam",
                   help="entropy regularization strength")
    if include_training:
        p.add_argument("--preset", dest="preset",
                       choices=["lenet-300-100", "mlp-hr", "mlp-gsc", "custom"])
        p.add_argument("--dims", dest="dims",
                       help="comma-separated sizes for --preset custom")
        p.add_argument("--batchnorm", action="store_const", const=True,
                       dest="batchnorm")
        p.add_argument("--input-dim", type=int, dest="input_dim")
        p.add_argument("--lr", type=float, dest="lr")
        p.add_argument("--omega-lr", type=float, dest="omega_lr")
        p.add_argument("--ste-lr", type=float, dest="ste_lr")
        p.add_argument("--lr-decay-epoch", type=int, dest="lr_decay_epoch")
        p.add_argument("--lr-decay-factor", type=float, dest="lr_decay_factor")
        p.add_argument("--epochs-pretrain", type=int, dest="epochs_pretrain")
        p.add_argument("--epochs-ste", type=int, dest="epochs_ste")
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--reassign-every", type=int, dest="reassign_every")
        p.add_argument("--omega-update-every", type=int, dest="omega_update_every")
        p.add_argument("--limit-train", type=int, dest="limit_train")


def _add_coefficient_flags(p):
    for name in ("c-add", "c-mul", "c-fifo", "repeat-discount",
                 "c-offchip", "c-onchip"):
        p.add_argument(f"--{name}", type=float, dest=name.replace("-", "_"))


def build_parser():
    parser = _Parser(prog="f4", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="pretrain then quantization-aware fine-tune")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="entropy-constrained assignment only")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--no-eval", action="store_true",
                   help="skip the accuracy evaluation")
    _add_config_flags(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("compress", help="pick formats, build the model container")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calib-samples", type=int, default=1024)
    _add_config_flags(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("simulate", help="run the container on the integer datapath")
    p.add_argument("--container", required=True)
    p.add_argument("--limit", type=int, default=0, help="evaluate on N samples")
    p.add_argument("--reference",
                   help="quantized checkpoint for the float reference accuracy")
    _add_config_flags(p, include_training=False)
    _add_coefficient_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="consolidate metrics across a sweep")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except (DataFormatError, NotRepresentable, FileNotFoundError) as e:
        print(f"f4: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"f4: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationFault as e:
        print(f"f4: simulation fault: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except F4Error as e:
        print(f"f4: internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
