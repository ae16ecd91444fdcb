"""Command-line entry point.

Subcommands: slic, loss, eval, train, sweep, synth, fuse-viz, grad-check,
features.  Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import autodiff as ad
from .autodiff import Tensor
from .data import (DatasetError, SyntheticTreeConfig, decode_av_label, load_dataset,
                   load_entry, load_mask_png, load_rgb, preprocess, save_mask_png,
                   save_rgb, write_synthetic_dataset)
from .losses import (AVLabel, ContrastiveConfig, LossWeights, PredictionTriple,
                     c3_fuse, total_loss)
from .metrics import (aggregate_reports, av_classification_metrics,
                      bv_segmentation_metrics)
from .model import NetConfig, VesselNet, load_checkpoint
from .superpixel import SlicConfig, SuperpixelMask, downsample_mask, slic_segment
from .train import (AugmentConfig, TrainConfig, evaluate_samples, prepare_samples,
                    train as run_train)
from .vtsr import read_vtsr, write_vtsr


class ValidationFailure(click.ClickException):
    exit_code = 1


@click.group()
def cli():
    """Vessel-coupled loss toolkit: superpixels, losses, metrics, training."""


def _load_pred_png(path) -> PredictionTriple:
    img = load_rgb(path).astype(np.float64) / 255.0
    return PredictionTriple(Tensor(img[..., 0]), Tensor(img[..., 1]),
                            Tensor(img[..., 2]))


def _load_label_png(path) -> AVLabel:
    l_a, l_v, l_bv, _ = decode_av_label(load_rgb(path))
    return AVLabel(Tensor(l_a), Tensor(l_v), Tensor(l_bv))


@cli.command("slic")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--k", default=20, show_default=True, type=int)
@click.option("--m", default=10.0, show_default=True, type=float)
@click.option("--max-iters", default=10, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
def slic_cmd(input_path, k, m, max_iters, seed, out_path):
    """Superpixel-segment an image; write a 16-bit mask PNG + sidecar."""
    img = load_rgb(input_path)
    mask = slic_segment(img, SlicConfig(k=k, m=m, max_iters=max_iters), seed=seed)
    save_mask_png(out_path, mask.labels, mask.n_clusters)
    click.echo(json.dumps({"C": mask.n_clusters}))


@cli.command("loss")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--label", "label_path", required=True, type=click.Path(exists=True))
@click.option("--features", "features_path", type=click.Path(exists=True))
@click.option("--mask", "mask_path", type=click.Path(exists=True))
@click.option("--lambda1", default=1.0, show_default=True, type=float)
@click.option("--lambda2", default=0.1, show_default=True, type=float)
@click.option("--tau", default=0.1, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--vessel-anchors", is_flag=True,
              help="restrict contrastive anchors to vessel positions")
def loss_cmd(pred_path, label_path, features_path, mask_path, lambda1, lambda2,
             tau, seed, vessel_anchors):
    """Evaluate the loss breakdown on a prediction/label pair."""
    pred = _load_pred_png(pred_path)
    label = _load_label_png(label_path)
    features = mask = vessel = None
    if features_path and mask_path:
        features = Tensor(read_vtsr(features_path))
        labels, n = load_mask_png(mask_path)
        mask = SuperpixelMask(labels, n)
        fh, fw = features.data.shape[-2:]
        if mask.labels.shape != (fh, fw):
            mask = downsample_mask(mask, fh, fw)
        if vessel_anchors:
            from .train import _block_max
            vessel = _block_max(label.l_bv.data, fh, fw) > 0.5
    _, breakdown = total_loss(pred, label, features, mask,
                              LossWeights(lambda1, lambda2),
                              ContrastiveConfig(temperature=tau, seed=seed),
                              vessel)
    click.echo(json.dumps(breakdown.as_dict()))


@cli.command("eval")
@click.option("--pred-dir", required=True, type=click.Path(exists=True))
@click.option("--gt-dir", required=True, type=click.Path(exists=True))
@click.option("--fov-dir", type=click.Path(exists=True))
@click.option("--protocol", type=click.Choice(["av", "bv"]), required=True)
@click.option("--include-crossing", is_flag=True)
@click.option("--macro", is_flag=True, help="macro-average the aggregate")
@click.option("--out", "out_path", required=True, type=click.Path())
def eval_cmd(pred_dir, gt_dir, fov_dir, protocol, include_crossing, macro, out_path):
    """Evaluate prediction images against ground truth, write report.json."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = sorted(p for p in pred_dir.iterdir() if p.is_file())
    if not preds:
        raise ValidationFailure("no prediction files found")
    per_image = {}
    reports = []
    for pp in preds:
        gp = gt_dir / pp.name
        if not gp.exists():
            raise ValidationFailure(f"missing ground truth for {pp.name}")
        fov = None
        if fov_dir:
            fp = Path(fov_dir) / pp.name
            if fp.exists():
                fov = np.asarray(load_rgb(fp))[..., 0] >= 128
        pred = _load_pred_png(pp)
        label = _load_label_png(gp)
        if protocol == "av":
            rep = av_classification_metrics(pred, label, include_crossing)
        else:
            rep = bv_segmentation_metrics(pred.y_bv, label.l_bv, fov)
        per_image[pp.name] = rep.as_dict()
        reports.append(rep)
    agg = aggregate_reports(reports, macro=macro)
    report = {"protocol_version": 1, "per_image": per_image,
              "aggregate": agg.as_dict()}
    Path(out_path).write_text(json.dumps(report, indent=2))
    click.echo(json.dumps(agg.as_dict()))


def _resolved_configs(config_path, overrides: dict):
    """defaults < config file < flags."""
    net_kw: dict = {}
    train_kw: dict = {}
    if config_path:
        with open(config_path, "rb") as f:
            doc = tomllib.load(f)
        net_kw.update(doc.get("net", {}))
        t = dict(doc.get("train", {}))
        for section, cls, key in (("weights", LossWeights, "weights"),
                                  ("contrastive", ContrastiveConfig, "contrastive"),
                                  ("slic", SlicConfig, "slic"),
                                  ("augment", AugmentConfig, "augment")):
            if section in t:
                t[key] = cls(**t.pop(section))
        train_kw.update(t)
    cfg = TrainConfig(**train_kw)
    net_cfg = NetConfig(**net_kw)
    o = {k: v for k, v in overrides.items() if v is not None}
    weights = replace(cfg.weights, **{k: o.pop(k) for k in ("lambda1", "lambda2")
                                      if k in o})
    slic_cfg = replace(cfg.slic, **({"k": o.pop("clusters")} if "clusters" in o else {}))
    if o.pop("fast", False):
        o.setdefault("patience", 20)
        o.setdefault("max_epochs", 300)
    cfg = replace(cfg, weights=weights, slic=slic_cfg, **o)
    return net_cfg, cfg


_train_options = [
    click.option("--config", "config_path", type=click.Path(exists=True)),
    click.option("--lambda1", type=float),
    click.option("--lambda2", type=float),
    click.option("--clusters", type=int),
    click.option("--max-epochs", "max_epochs", type=int),
    click.option("--patience", type=int),
    click.option("--seed", type=int),
    click.option("--dtype", type=click.Choice(["float32", "float64"])),
    click.option("--fast", is_flag=True, default=False,
                 help="desk-scale run: patience 20, max 300 epochs"),
]


def _with_train_options(fn):
    for opt in reversed(_train_options):
        fn = opt(fn)
    return fn


@cli.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--layout", default="flat", show_default=True,
              type=click.Choice(["flat", "rite", "lesav", "hrf"]))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--print-config", is_flag=True)
@_with_train_options
def train_cmd(data_dir, layout, out_dir, print_config, config_path, **overrides):
    """Train the small encoder-decoder with the full loss stack."""
    net_cfg, cfg = _resolved_configs(config_path, overrides)
    if print_config:
        click.echo(json.dumps({"net": asdict(net_cfg), "train": asdict(cfg)},
                              indent=2))
        return
    entries = load_dataset(data_dir, layout)
    result = run_train(entries, net_cfg, cfg, out_dir=out_dir)
    click.echo(json.dumps({"best_epoch": result.best_epoch,
                           "best_val": result.best_val,
                           "epochs_run": len(result.history)}))


@cli.command("sweep")
@click.option("--param", required=True,
              type=click.Choice(["lambda1", "lambda2", "clusters"]))
@click.option("--values", required=True, help="comma-separated values")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--layout", default="flat", show_default=True,
              type=click.Choice(["flat", "rite", "lesav", "hrf"]))
@click.option("--out", "out_path", required=True, type=click.Path())
@_with_train_options
def sweep_cmd(param, values, data_dir, layout, out_path, config_path, **overrides):
    """One seeded training run per value; per-value test metrics as CSV."""
    try:
        parsed = [int(v) if param == "clusters" else float(v)
                  for v in values.split(",") if v.strip()]
    except ValueError as e:
        raise ValidationFailure(f"bad values list: {e}") from e
    if not parsed:
        raise ValidationFailure("empty values list")
    entries = load_dataset(data_dir, layout)
    rows = []
    for value in parsed:
        run_overrides = dict(overrides)
        run_overrides[param] = value
        net_cfg, cfg = _resolved_configs(config_path, run_overrides)
        row = {"param": param, "value": value, "status": "ok"}
        try:
            train_entries = [e for e in entries if e.split == "train"]
            test_entries = [e for e in entries if e.split == "test"] or train_entries
            samples = prepare_samples(train_entries, cfg.slic)
            result = run_train(samples, net_cfg, cfg)
            test_samples = prepare_samples(test_entries, cfg.slic, with_masks=False)
            agg = aggregate_reports(evaluate_samples(result.net, test_samples, cfg))
            row.update({k: agg.as_dict()[k] for k in
                        ("sensitivity", "specificity", "accuracy", "f1",
                         "miou", "auroc")})
        except Exception as e:  # keep sweeping, mark the failure
            row["status"] = f"failed: {e}"
        rows.append(row)
    fields = ["param", "value", "status", "sensitivity", "specificity",
              "accuracy", "f1", "miou", "auroc"]
    with open(out_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow(row)
    click.echo(f"wrote {len(rows)} rows to {out_path}")


@cli.command("synth")
@click.option("--n", default=25, show_default=True, type=int)
@click.option("--size", default=128, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
def synth_cmd(n, size, seed, out_dir):
    """Emit a ready-to-train flat-layout synthetic dataset."""
    cfg = SyntheticTreeConfig(canvas_size=size, seed=seed)
    entries = write_synthetic_dataset(out_dir, n, cfg)
    n_train = sum(1 for e in entries if e.split == "train")
    click.echo(json.dumps({"written": n, "train": n_train, "test": n - n_train}))


@cli.command("fuse-viz")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--label", "label_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_prefix", required=True, type=click.Path())
def fuse_viz_cmd(pred_path, label_path, out_prefix):
    """Render the fused consistency map and the per-branch class overlay."""
    pred = _load_pred_png(pred_path)
    label = _load_label_png(label_path)
    fused = c3_fuse(pred, label)
    gray = np.clip(fused.data * 255.0, 0, 255).astype(np.uint8)
    save_rgb(str(out_prefix) + "_c3.png", np.stack([gray] * 3, axis=-1))
    # branch palette: artery magenta, vein cyan, crossing white, rest blue on
    # vessel pixels, black on background
    m_art, m_vein, m_cross, m_rest = label.class_masks()
    overlay = np.zeros((*gray.shape, 3), dtype=np.uint8)
    overlay[m_art > 0] = (255, 0, 255)
    overlay[m_vein > 0] = (0, 255, 255)
    overlay[m_cross > 0] = (255, 255, 255)
    overlay[(m_rest > 0) & (label.l_bv.data > 0.5)] = (0, 0, 255)
    save_rgb(str(out_prefix) + "_branches.png", overlay)
    click.echo(json.dumps({"c3_map": str(out_prefix) + "_c3.png",
                           "branches": str(out_prefix) + "_branches.png"}))


@cli.command("grad-check")
@click.option("--scope", default="ops", show_default=True,
              type=click.Choice(["ops", "losses", "end2end"]))
@click.option("--seeds", default=5, show_default=True, type=int)
@click.option("--corrupt", hidden=True, is_flag=True,
              help="mutation-test fixture: corrupt one backward rule")
def grad_check_cmd(scope, seeds, corrupt):
    """Run the gradient verification suites; nonzero exit on failure."""
    from .gradsuite import run_suite
    report = run_suite(scope, seeds=seeds, corrupt=corrupt)
    failed = False
    for name, err, tol in report:
        status = "ok" if err < tol else "FAIL"
        failed |= err >= tol
        click.echo(f"{name:32s} max_rel_err={err:.3e} tol={tol:.0e} {status}")
    if failed:
        sys.exit(2)


@cli.command("features")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True, type=int,
              help="init seed when no checkpoint is given")
@click.option("--out", "out_path", required=True, type=click.Path())
def features_cmd(input_path, ckpt_path, seed, out_path):
    """Dump the encoder bottleneck feature map as a VTSR tensor."""
    img = load_rgb(input_path)
    net = load_checkpoint(ckpt_path) if ckpt_path else VesselNet(NetConfig(), seed=seed)
    x = preprocess(img)
    div = 2 ** (net.cfg.depth - 1)
    h, w = x.shape[1:]
    x = x[:, :h - h % div, :w - w % div]
    _, bottleneck = net.forward(Tensor(x[None].astype(net.dtype)))
    write_vtsr(out_path, bottleneck.data)
    click.echo(json.dumps({"shape": list(bottleneck.data.shape)}))


def main():
    try:
        cli.main(standalone_mode=False)
    except click.UsageError as e:
        click.echo(f"error: {e.format_message()}", err=True)
        sys.exit(1)
    except ValidationFailure as e:
        click.echo(f"error: {e.message}", err=True)
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(1)
    except (DatasetError, ValueError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    except SystemExit:
        raise
    except Exception as e:
        click.echo(f"runtime failure: {e}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
