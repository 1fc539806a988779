"""Command-line harness: train, evaluate, gradcheck, ablate, analyze, count-cost.

Run configs are single JSON files; CLI flags override their keys::

    {
      "network": "miniresnet",            # reference name, spec file, or inline spec
      "placement": "before_conv",
      "gct": {"embed_norm": "l2", "channel_norm": "l2", "adaptation": "one_plus_tanh"},
      "train": {"epochs": 20, "batch_size": 64, "base_lr": 0.05, ...},
      "data": {"kind": "cifar10", "train": ["data_batch_1.bin", ...],
               "val": ["test_batch.bin"], "augment": "flip_crop"},
      "output_dir": "runs/gct",
      "seed": 0
    }

``data.kind`` is ``cifar10``, ``mnist`` (``train_images``, ``train_labels``,
``val_images``, ``val_labels``) or ``synthetic`` (``train_size``, ``val_size``).
Relative paths resolve against the config file's directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, data, gradcheck
from .gct import Adaptation, ChannelNorm, EmbedNorm
from .network import (PLACEMENTS, NetworkSpec, SpecError, build_network, load_checkpoint,
                      read_checkpoint, resolve_spec, save_checkpoint)
from .optim import SGD, ConfigError, TrainConfig, lr_at

log = logging.getLogger("gctnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

METRIC_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"]

ABLATION_AXES = {
    "embedding": ("gct.embed_norm", [EmbedNorm.LINF.value, EmbedNorm.L1.value, EmbedNorm.L2.value]),
    "normalization": ("gct.channel_norm", [ChannelNorm.MEAN_VARIANCE.value, ChannelNorm.L1.value,
                                           ChannelNorm.L2.value]),
    "adaptation": ("gct.adaptation", [Adaptation.SIGMOID.value, Adaptation.ONE_PLUS_ELU.value,
                                      Adaptation.ONE_PLUS_TANH.value]),
    "position": ("placement", ["after_bn", "before_bn", "before_conv"]),
}


class NumericError(RuntimeError):
    pass


@dataclass
class RunConfig:
    network: object = "miniresnet"
    placement: str | None = None
    gct: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=lambda: {"kind": "synthetic"})
    output_dir: str = "runs/default"
    seed: int | None = None
    base_dir: str = "."

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if self.seed is not None:
            self.train.seed = int(self.seed)
        if self.placement is not None and self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        _check_data_section(self.data, Path(self.base_dir))

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        unknown = set(d) - {"network", "placement", "gct", "train", "data", "output_dir", "seed"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**copy.deepcopy(d), base_dir=str(base_dir))

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        for key, value in (overrides or {}).items():
            if value is not None:
                _set_path(d, key, value)
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        net = self.network.to_dict() if isinstance(self.network, NetworkSpec) else self.network
        return {"network": net, "placement": self.placement, "gct": dict(self.gct),
                "train": self.train.to_dict(), "data": copy.deepcopy(self.data),
                "output_dir": self.output_dir, "seed": self.train.seed}

    def spec(self) -> NetworkSpec:
        ref = self.network
        if isinstance(ref, str) and not Path(ref).is_absolute() and (Path(self.base_dir) / ref).is_file():
            ref = str(Path(self.base_dir) / ref)
        gct = self.gct or None
        try:
            base = resolve_spec(ref)
            if gct:
                gct = {**base.gct, **gct}
            return resolve_spec(base, placement=self.placement, gct=gct)
        except (SpecError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def _check_data_section(d: dict, base: Path):
    kind = d.get("kind")
    if kind == "synthetic":
        return
    if kind == "cifar10":
        names = list(d.get("train", [])) + list(d.get("val", []))
        if not d.get("train"):
            raise ConfigError("cifar10 data section needs a non-empty 'train' list")
    elif kind == "mnist":
        keys = ["train_images", "train_labels"]
        missing = [k for k in keys if k not in d]
        if missing:
            raise ConfigError(f"mnist data section is missing {missing}")
        names = [d[k] for k in keys + ["val_images", "val_labels"] if k in d]
    else:
        raise ConfigError(f"data.kind must be cifar10, mnist or synthetic, got {kind!r}")
    for n in names:
        p = Path(n) if Path(n).is_absolute() else base / n
        if not p.is_file():
            raise ConfigError(f"data file {p} does not exist")


def load_datasets(run: RunConfig):
    """Train and validation splits, standardized with training-split statistics."""
    d = run.data
    kind = d["kind"]
    if kind == "cifar10":
        train = data.load_cifar10([run.path(p) for p in d["train"]])
        val = data.load_cifar10([run.path(p) for p in d["val"]]) if d.get("val") else None
    elif kind == "mnist":
        train = data.load_mnist(run.path(d["train_images"]), run.path(d["train_labels"]))
        val = (data.load_mnist(run.path(d["val_images"]), run.path(d["val_labels"]))
               if "val_images" in d else None)
    else:
        seed = int(d.get("seed", 0))
        kw = {k: d[k] for k in ("channels", "size", "classes") if k in d}
        train = data.synthetic_dataset(int(d.get("train_size", 2000)), seed, **kw)
        val = data.synthetic_dataset(int(d.get("val_size", 500)), seed + 1, **kw)
    if d.get("limit_train"):
        train = train.subset(slice(0, int(d["limit_train"])))
    if val is not None and d.get("limit_val"):
        val = val.subset(slice(0, int(d["limit_val"])))
    train = data.standardize(train)
    if val is not None:
        val = data.standardize(val, train.mean, train.std)
    return train, val


def evaluate(net, ds, batch_size=256):
    """Mean loss and accuracy of ``net`` in eval mode."""
    total_loss, correct = 0.0, 0
    for i in range(0, len(ds), batch_size):
        x = ds.images[i:i + batch_size].astype(net.dtype, copy=False)
        y = ds.labels[i:i + batch_size]
        logits = net.forward(x, train=False)
        total_loss += net.loss.forward(logits, y) * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / len(ds), correct / len(ds)


def _fmt(v):
    return "" if v is None else repr(float(v))


def train(run: RunConfig, out_dir=None) -> dict:
    """Train one network; writes metrics.csv, steps.csv, timing.csv, config.json, checkpoint.bin.

    metrics.csv depends only on (config, seed); wall-clock time goes to timing.csv.
    """
    spec = run.spec()
    cfg = run.train
    augment = run.data.get("augment", "none")
    if augment not in data.AUGMENTATIONS:
        raise ConfigError(f"data.augment must be one of {data.AUGMENTATIONS}, got {augment!r}")
    train_ds, val_ds = load_datasets(run)
    net = build_network(spec, seed=cfg.seed)
    opt = SGD(net, cfg)
    out = Path(out_dir or run.path(run.output_dir))
    out.mkdir(parents=True, exist_ok=True)

    saved = run.to_dict()
    saved["network"] = spec.to_dict()
    saved["data_stats"] = {"mean": train_ds.mean.tolist(), "std": train_ds.std.tolist()}
    (out / "config.json").write_text(json.dumps(saved, indent=2))

    history = []
    with threadpool_limits(1), open(out / "metrics.csv", "w", newline="") as mf, \
            open(out / "steps.csv", "w", newline="") as sf, \
            open(out / "timing.csv", "w", newline="") as tf:
        metrics, steps, timing = csv.writer(mf), csv.writer(sf), csv.writer(tf)
        metrics.writerow(METRIC_COLUMNS)
        steps.writerow(["epoch", "step", "lr", "loss"])
        timing.writerow(["epoch", "wall_seconds"])
        mf.flush()
        step = 0
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, cfg)
            loss_sum, correct, seen = 0.0, 0, 0
            for x, y in data.batches(train_ds, cfg.batch_size, cfg.seed, epoch, augment):
                logits = net.forward(x.astype(net.dtype, copy=False), train=True)
                loss = net.loss.forward(logits, y)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
                net.backward(net.loss.backward())
                opt.step(lr)
                steps.writerow([epoch, step, repr(lr), repr(loss)])
                loss_sum += loss * len(y)
                correct += int((logits.argmax(axis=1) == y).sum())
                seen += len(y)
                step += 1
            row = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / seen,
                   "train_acc": correct / seen, "val_loss": None, "val_acc": None}
            if val_ds is not None:
                row["val_loss"], row["val_acc"] = evaluate(net, val_ds)
            history.append(row)
            metrics.writerow([epoch, repr(lr)] + [_fmt(row[k]) for k in METRIC_COLUMNS[2:]])
            timing.writerow([epoch, f"{time.perf_counter() - t0:.3f}"])
            for f in (mf, sf, tf):
                f.flush()
            log.info("epoch %d lr %.4g train_loss %.4f train_acc %.4f val_acc %s", epoch, lr,
                     row["train_loss"], row["train_acc"], row["val_acc"])
    save_checkpoint(out / "checkpoint.bin", net,
                    extra={"epochs": cfg.epochs, "seed": cfg.seed,
                           "data_stats": saved["data_stats"]})
    return {"output_dir": str(out), "history": history, "network": net}


def ablate(run: RunConfig, axis: str, out_dir=None, with_baseline=False) -> list[dict]:
    """One training run per variant on ``axis``, same seed and schedule; rows ranked by val_acc."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    key, values = ABLATION_AXES[axis]
    root = Path(out_dir or run.path(run.output_dir)) / f"ablate_{axis}"
    rows = []
    variants = (["none"] if with_baseline else []) + values
    for value in variants:
        d = run.to_dict()
        if value == "none":
            d["placement"] = "none"
        else:
            if d.get("placement") in (None, "none") and key != "placement":
                d["placement"] = "before_conv"
            _set_path(d, key, value)
        sub = RunConfig.from_dict(d, base_dir=run.base_dir)
        res = train(sub, root / value)
        last = res["history"][-1] if res["history"] else {}
        rows.append({"variant": "baseline" if value == "none" else value,
                     "val_acc": last.get("val_acc"), "val_loss": last.get("val_loss"),
                     "train_loss": last.get("train_loss"), "epochs": sub.train.epochs,
                     "seed": sub.train.seed})
    order = sorted(range(len(rows)), key=lambda i: (-(rows[i]["val_acc"] or 0.0), i))
    ranked = [dict(rank=r + 1, **rows[i]) for r, i in enumerate(order)]
    root.mkdir(parents=True, exist_ok=True)
    with open(root / f"ablation_{axis}.csv", "w", newline="") as f:
        w = csv.writer(f)
        cols = ["rank", "variant", "val_acc", "val_loss", "train_loss", "epochs", "seed"]
        w.writerow(cols)
        for r in ranked:
            w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])
    return ranked


def analysis_batch(header, run: RunConfig | None, batch_size=64, seed=0):
    """A validation batch from the run's data (standardized with the checkpoint's stats), or
    standard-normal noise of the network's input shape when no data is configured."""
    if run is not None:
        train_ds, val_ds = load_datasets(run)
        ds = val_ds if val_ds is not None else train_ds
        stats = header.get("extra", {}).get("data_stats")
        if stats:
            raw = data.destandardize(ds)
            ds = data.standardize(data.Dataset(raw, ds.labels, ds.class_count),
                                  stats["mean"], stats["std"])
        return ds.images[:batch_size]
    c = header["spec"]["input_channels"]
    return np.random.default_rng(seed).standard_normal((batch_size, c, 32, 32)).astype(np.float32)


def analyze_checkpoint(path, run=None, out_dir=".", batch_size=64, seed=0):
    header, _ = read_checkpoint(path)
    net = load_checkpoint(path)
    batch = analysis_batch(header, run, batch_size, seed)
    records = analysis.analyze(net, batch)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_analysis_csv(records, out / "analysis.csv")
    analysis.write_histogram_csv(records, out / "gamma_histogram.csv")
    return records


def cost_summary(spec_ref, input_shape, placement=None, se_blocks=None) -> dict:
    spec = resolve_spec(spec_ref, placement=placement, se_blocks=se_blocks)
    report = analysis.count_flops(spec, input_shape)
    out = {"spec": spec.name, "placement": spec.placement, "se_blocks": spec.se_blocks,
           "report": report.to_dict()}
    if spec.placement != "none" or spec.se_blocks:
        base = analysis.count_flops(spec.replace(placement="none", se_blocks=False), input_shape)
        out["baseline"] = {"total_params": base.total_params, "total_macs": base.total_macs}
        out["added_params"] = report.total_params - base.total_params
        out["added_macs"] = report.total_macs - base.total_macs
    return out


# CLI

def _parse_shape(text):
    try:
        shape = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N,C,H,W, got {text!r}") from None
    if len(shape) != 4:
        raise argparse.ArgumentTypeError(f"expected N,C,H,W, got {text!r}")
    return shape


def build_parser():
    p = argparse.ArgumentParser(prog="gctnet", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one network")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--placement", choices=PLACEMENTS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--output-dir")

    e = sub.add_parser("evaluate", help="validation loss/accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)

    g = sub.add_parser("gradcheck", help="float64 finite-difference checks of every layer")
    g.add_argument("--instances", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--only", help="substring filter on case names")
    g.add_argument("--report", help="write the per-case report as CSV")

    a = sub.add_parser("ablate", help="train one run per variant along an ablation axis")
    a.add_argument("--config", required=True)
    a.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    a.add_argument("--seed", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--output-dir")
    a.add_argument("--with-baseline", action="store_true")

    n = sub.add_parser("analyze", help="gamma statistics and variance ratios of a checkpoint")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--config", help="run config whose data supplies the input batch "
                                    "(default: standard-normal noise)")
    n.add_argument("--batch-size", type=int, default=64)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--output-dir", default=".")

    c = sub.add_parser("count-cost", help="parameter and multiply-add accounting")
    c.add_argument("--spec", required=True, help="spec JSON file or reference name "
                                                  "(smallcnn, miniresnet, resnet50)")
    c.add_argument("--input-shape", required=True, type=_parse_shape)
    c.add_argument("--placement", choices=PLACEMENTS)
    c.add_argument("--se-blocks", action="store_true", default=None)
    c.add_argument("--output", help="write the JSON report here instead of stdout")
    return p


def _overrides(args):
    return {"seed": getattr(args, "seed", None), "placement": getattr(args, "placement", None),
            "train.epochs": getattr(args, "epochs", None),
            "output_dir": getattr(args, "output_dir", None)}


def _run(args) -> int:
    if args.command == "train":
        run = RunConfig.load(args.config, _overrides(args))
        res = train(run)
        print(json.dumps({"output_dir": res["output_dir"],
                          "final": res["history"][-1] if res["history"] else None}))
        return EXIT_OK
    if args.command == "evaluate":
        run = RunConfig.load(args.config)
        header, _ = read_checkpoint(args.checkpoint)
        net = load_checkpoint(args.checkpoint)
        _, val = load_datasets(run)
        if val is None:
            raise ConfigError("config has no validation split")
        loss, acc = evaluate(net, val)
        print(json.dumps({"val_loss": loss, "val_acc": acc}))
        return EXIT_OK
    if args.command == "gradcheck":
        cases = gradcheck.default_cases()
        if args.only:
            cases = {k: v for k, v in cases.items() if args.only in k}
        results = gradcheck.run_suite(args.instances, args.seed, cases)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name:40s} max_rel_error={r.max_rel_error:.3e}"
                  f" ({r.worst}, {r.instances} instances)")
        if args.report:
            with open(args.report, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["case", "instances", "max_rel_error", "worst_array", "passed"])
                for r in results:
                    w.writerow([r.name, r.instances, repr(r.max_rel_error), r.worst, r.passed])
        return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC
    if args.command == "ablate":
        run = RunConfig.load(args.config, _overrides(args))
        for row in ablate(run, args.axis, with_baseline=args.with_baseline):
            print(json.dumps(row))
        return EXIT_OK
    if args.command == "analyze":
        run = RunConfig.load(args.config) if args.config else None
        records = analyze_checkpoint(args.checkpoint, run, args.output_dir,
                                     args.batch_size, args.seed)
        for r in records:
            print(f"{r.layer_index:3d} {r.layer_name:40s} gamma {r.gamma_mean:+.4f} "
                  f"({r.gamma_std:.4f}) var_ratio {r.variance_ratio}")
        return EXIT_OK
    if args.command == "count-cost":
        summary = cost_summary(args.spec, args.input_shape, args.placement, args.se_blocks)
        text = json.dumps(summary, indent=2)
        if args.output:
            Path(args.output).write_text(text)
            rep = summary["report"]
            print(f"params {rep['total_params_M']:.4f}M  GMACs {rep['total_gmacs']:.4f}")
        else:
            print(text)
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _run(args)
    except (ConfigError, SpecError, analysis.AnalysisError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except data.DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
