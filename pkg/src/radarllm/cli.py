"""Command line driver for the four-stage detection pipeline.

Every command reads the run configuration (``--config`` file, ``RLLM_SEED``,
``--set key=value``), works inside ``--workdir`` and appends one JSON line
to ``<workdir>/manifest.jsonl``.  Artifacts carry the hash of the
configuration stage that produced them and downstream commands refuse
artifacts whose hash does not match their own configuration.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 artifact
mismatch or missing upstream artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import data, detect, features, models, training
from .config import RunConfig, dump_config, load_config
from .errors import ArtifactMismatchError, DatasetFileError, NumericError, ValidationError
from .nncore import Adam, load_checkpoint, load_module_tensors, module_tensors, save_checkpoint, seed_everything

log = logging.getLogger("radarllm")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_ARTIFACT = 0, 2, 3, 4

DATASET = "dataset.rllm"
DATASET_META = "dataset.meta.json"
TOKENS = "tokens.npz"
REFERENCE = "reference"
SCORES = "scores.rlts"
SCORES_CSV = "scores.csv"
BACKBONE = "backbone"
HEAD = "head"
MANIFEST = "manifest.jsonl"

# seed offsets keep the stages' random streams independent of each other
_SEED_REFERENCE, _SEED_BACKBONE, _SEED_HEAD = 1, 2, 3


# -- hashing and provenance --------------------------------------------------------


def file_hash(path: Path) -> str:
    """sha256 of a file, or of (relative name, content) pairs for a directory."""
    h = hashlib.sha256()
    path = Path(path)
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ArtifactMismatchError(f"missing upstream artifact {what}: {path}")
    return path


def _check_hash(found: str, cfg: RunConfig, stage: str, path: Path) -> None:
    expected = cfg.stage_hash(stage)
    if found != expected:
        raise ArtifactMismatchError(
            f"{path} was produced under {stage} config hash {found}, current configuration gives {expected}"
        )


class _Step:
    """Collects inputs/outputs of one command and writes its manifest line."""

    def __init__(self, command: str, cfg: RunConfig, workdir: Path):
        self.command, self.cfg, self.workdir = command, cfg, workdir
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()

    def finish(self) -> None:
        rel = lambda p: str(Path(p).relative_to(self.workdir)) if Path(p).is_relative_to(self.workdir) else str(p)
        out_h = hashlib.sha256()
        for p in self.outputs:
            out_h.update(file_hash(p).encode())
        line = {
            "command": self.command,
            "config_hash": self.cfg.hash,
            "inputs": {rel(p): file_hash(p) for p in self.inputs},
            "outputs": [rel(p) for p in self.outputs],
            "output_hash": out_h.hexdigest(),
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        with open(self.workdir / MANIFEST, "a") as fh:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


# -- stage helpers -----------------------------------------------------------------


def _scene(cfg: RunConfig, seed: int) -> data.SceneParams:
    return data.SceneParams(
        n_pulses=cfg.n_pulses,
        prf_hz=cfg.prf_hz,
        clutter_shape_nu=cfg.clutter_shape_nu,
        clutter_power=cfg.clutter_power,
        target_amplitude=cfg.target_amplitude,
        target_doppler_hz=cfg.target_doppler_hz,
        doppler_jitter_hz=cfg.doppler_jitter_hz,
        scr_db=cfg.scr_db,
        seed=seed,
        texture_coherence=cfg.texture_coherence,
        speckle_bandwidth_hz=cfg.speckle_bandwidth_hz,
        clutter_doppler_hz=cfg.clutter_doppler_hz,
        doppler_block=cfg.doppler_block,
    )


def _cell_seed(seed: int, cell: int) -> int:
    return int(np.random.SeedSequence([seed, cell]).generate_state(1, np.uint64)[0])


def synthesize_series(cfg: RunConfig) -> list[data.EchoSeries]:
    """One target cell plus ``clutter_cells`` independent clutter cells."""
    target, clutter = data.synthesize_scene(_scene(cfg, _cell_seed(cfg.seed, 0)))
    target.cell_id, clutter.cell_id = 0, 1
    series = [target, clutter]
    for c in range(2, cfg.clutter_cells + 1):
        _, extra = data.synthesize_scene(_scene(cfg, _cell_seed(cfg.seed, c)))
        extra.cell_id = c
        series.append(extra)
    return series


def _write_dataset(workdir: Path, cfg: RunConfig, ds: data.Dataset, source: str) -> list[Path]:
    path = workdir / DATASET
    data.write_dataset(path, ds)
    meta = {
        "config_hash": cfg.stage_hash("data"),
        "source": source,
        "name": cfg.dataset_name,
        "N": ds.N,
        "count": len(ds),
        "n_target": len(ds.by_label(data.Label.TARGET)),
        "n_clutter": len(ds.by_label(data.Label.CLUTTER)),
        "checksum": data.dataset_checksum(ds),
    }
    (workdir / DATASET_META).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return [path, workdir / DATASET_META]


def _load_dataset(workdir: Path, cfg: RunConfig, step: _Step) -> data.Dataset:
    path = _require(workdir / DATASET, "dataset")
    meta_path = _require(workdir / DATASET_META, "dataset metadata")
    meta = json.loads(meta_path.read_text())
    if meta["source"] == "synthetic":
        _check_hash(meta["config_hash"], cfg, "data", path)
    ds = data.read_dataset(path)
    if data.dataset_checksum(ds) != meta["checksum"]:
        raise ArtifactMismatchError(f"{path} does not match the checksum in {meta_path}")
    step.inputs += [path, meta_path]
    return ds


def feature_config(cfg: RunConfig) -> features.FeatureConfig:
    return features.FeatureConfig(cfg.stft_window, cfg.stft_length, cfg.stft_hop, cfg.omega or None)


def _tokens_hash(cfg: RunConfig, meta: dict) -> str:
    # ingested data is not described by the data-stage keys, so chain on the dataset checksum
    return hashlib.sha256((cfg.stage_hash("features") + meta["checksum"]).encode()).hexdigest()[:16]


def load_tokens(workdir: Path, cfg: RunConfig, step: _Step | None = None) -> dict[str, features.FeatureTokenBatch]:
    path = _require(workdir / TOKENS, "token file")
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        arrays = {k: z[k] for k in z.files if k != "meta"}
    if meta["config_hash"] != _tokens_hash(cfg, meta):
        raise ArtifactMismatchError(f"{path} was produced under a different data/feature configuration")
    origin = [tuple(o) for o in meta["origin"]]
    out = {}
    for split in ("train", "val", "test"):
        out[split] = features.FeatureTokenBatch(
            arrays[f"{split}_tokens"], arrays[f"{split}_labels"], arrays[f"{split}_ids"], origin, meta["N"]
        )
    if step is not None:
        step.inputs.append(path)
    return out


def reference_config(cfg: RunConfig, K: int) -> models.ReferenceConfig:
    return models.ReferenceConfig(
        K=K, L=cfg.L, d_model=cfg.ref_d_model, n_heads=cfg.ref_heads, n_layers=cfg.ref_layers, d_ff=cfg.ref_ffn
    )


def backbone_config(cfg: RunConfig, K: int) -> models.BackboneConfig:
    return models.BackboneConfig(
        K=K,
        L=cfg.L,
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        n_layers=cfg.n_layers,
        lora_rank=cfg.lora_rank,
        lora_scale=cfg.lora_scale,
        head_hidden=cfg.head_hidden,
        trainable_positions=cfg.trainable_positions,
    )


def _tokens_meta(workdir: Path) -> dict:
    with np.load(_require(workdir / TOKENS, "token file")) as z:
        return json.loads(str(z["meta"]))


def _save_model(path: Path, model: torch.nn.Module, meta: dict, opt: Adam, workdir: Path, seed: int) -> None:
    """Checkpoint = parameters + Adam moments; the manifest carries model config, seed and feature statistics."""
    tok = _tokens_meta(workdir)
    meta = {
        **meta,
        "model_config": models.config_dict(model.cfg),
        "seed": seed,
        "norm_mean": tok["norm_mean"],
        "norm_std": tok["norm_std"],
    }
    save_checkpoint(path, {**module_tensors(model), **opt.state_tensors()}, meta)


def _load_model(path: Path, model: torch.nn.Module, cfg: RunConfig, stage: str, step: _Step) -> dict:
    _require(path / "manifest.json", f"{stage} checkpoint")
    tensors, meta = load_checkpoint(path)
    _check_hash(meta.get("config_hash", ""), cfg, stage, path)
    load_module_tensors(model, tensors)
    step.inputs.append(path)
    return meta


def _train_config(cfg: RunConfig, epochs: int, lr: float, seed: int) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=epochs,
        lr=lr,
        batch_size=cfg.batch_size,
        eval_batch_size=cfg.eval_batch_size,
        seed=seed,
        alpha=cfg.alpha,
        loss_mode=cfg.loss_mode,
        class_balanced=cfg.class_balanced,
        eval_far=cfg.p_fa,
    )


def _load_backbone(tagdir: Path, cfg: RunConfig, K: int, step: _Step) -> models.BackboneModel:
    model = models.BackboneModel(backbone_config(cfg, K))
    _load_model(tagdir / BACKBONE, model, cfg, "finetune", step)
    model.eval()
    return model


def _load_head(tagdir: Path, cfg: RunConfig, K: int, step: _Step) -> models.AutoencoderHead:
    head = models.AutoencoderHead(models.AutoencoderConfig.for_width(K, cfg.d_model))
    _load_model(tagdir / HEAD, head, cfg, "head", step)
    head.eval()
    return head


# -- commands ------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig, workdir: Path, step: _Step) -> None:
    series = synthesize_series(cfg)
    ds = data.build_dataset(series, cfg.N, cfg.M_target, cfg.M_clutter)
    step.outputs += _write_dataset(workdir, cfg, ds, "synthetic")
    if args.csv:
        data.write_csv(workdir / "dataset.csv", ds)
        step.outputs.append(workdir / "dataset.csv")
    print(f"synthesized {len(ds)} vectors ({len(ds.by_label(data.Label.TARGET))} target) -> {workdir / DATASET}")


def cmd_ingest(args, cfg: RunConfig, workdir: Path, step: _Step) -> None:
    if not args.target or not args.clutter:
        raise ValidationError("ingest needs at least one --target and one --clutter echo CSV")
    series = []
    for kind, paths in ((data.Label.TARGET, args.target), (data.Label.CLUTTER, args.clutter)):
        for p in paths:
            series.append(data.load_echo_csv(p, cfg.prf_hz, kind, cell_id=len(series)))
            step.inputs.append(Path(p))
    ds = data.build_dataset(series, cfg.N, cfg.M_target, cfg.M_clutter)
    step.outputs += _write_dataset(workdir, cfg, ds, "ingested")
    print(f"ingested {len(series)} echo series into {len(ds)} vectors -> {workdir / DATASET}")


def cmd_features(args, cfg: RunConfig, workdir: Path, step: _Step) -> None:
    ds = _load_dataset(workdir, cfg, step)
    splits = dict(zip(("train", "val", "test"), data.split_dataset(ds.vectors, cfg.train_frac, cfg.val_frac)))
    for name, vs in splits.items():
        if not vs:
            raise ValidationError(f"the {name} split is empty; adjust train_frac / val_frac")
    fcfg = feature_config(cfg)
    raw = {name: features.extract_batch(vs, fcfg) for name, vs in splits.items()}
    norm = features.FeatureNormalizer.fit(raw["train"])
    arrays = {}
    origin = None
    for name, vs in splits.items():
        batch = features.patch(
            norm.apply(raw[name]), cfg.L, [int(v.label) for v in vs], [v.sample_id for v in vs]
        )
        origin = batch.token_feature_origin
        arrays[f"{name}_tokens"] = batch.tokens
        arrays[f"{name}_labels"] = batch.labels
        arrays[f"{name}_ids"] = batch.sample_ids
    meta = {
        "checksum": json.loads((workdir / DATASET_META).read_text())["checksum"],
        "N": ds.N,
        "K": len(origin),
        "L": cfg.L,
        "origin": [list(o) for o in origin],
        "norm_mean": norm.mean.tolist(),
        "norm_std": norm.std.tolist(),
        "counts": {name: len(vs) for name, vs in splits.items()},
    }
    meta["config_hash"] = _tokens_hash(cfg, meta)
    path = workdir / TOKENS
    np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    step.outputs.append(path)
    if args.dump:
        ids = [v.sample_id for v in splits["train"]]
        features.write_feature_dump(workdir / "features_train.csv", ids, raw["train"])
        step.outputs.append(workdir / "features_train.csv")
    print(f"tokens: K={meta['K']} L={cfg.L} splits {meta['counts']} -> {path}")


def cmd_train_ref(args, cfg: RunConfig, workdir: Path, step: _Step) -> None:
    tok = load_tokens(workdir, cfg, step)
    seed = cfg.seed + _SEED_REFERENCE
    seed_everything(seed)
    model = models.ReferenceModel(reference_config(cfg, tok["val"].K))
    opt = Adam(model, cfg.ref_lr)
    res = training.train_reference(model, tok["val"], _train_config(cfg, cfg.ref_epochs, cfg.ref_lr, seed), opt)
    path = workdir / REFERENCE
    meta = {"config_hash": cfg.stage_hash("reference"), "final_token_ce": res.final_token_ce}
    _save_model(path, model, meta, opt, workdir, seed)
    step.outputs.append(path)
    print(f"reference model: final validation token CE {res.final_token_ce:.4f} -> {path}")


def cmd_score(args, cfg: RunConfig, workdir: Path, step: _Step) -> None:
    tok = load_tokens(workdir, cfg, step)
    model = models.ReferenceModel(reference_config(cfg, tok["train"].K))
    _load_model(workdir / REFERENCE, model, cfg, "reference", step)
    table = training.score_tokens(model, tok["train"], cfg.alpha, cfg.stage_hash("reference"))
    table.save(workdir / SCORES)
    table.write_csv(workdir / SCORES_CSV)
    step.outputs += [workdir / SCORES, workdir / SCORES_CSV]
    print(f"scored {table.losses.shape[0]} x {table.losses.shape[1]} training tokens -> {workdir / SCORES}")


def _tagdir(workdir: Path, cfg: RunConfig) -> Path:
    return workdir / cfg.loss_mode


def cmd_finetune(args, cfg: RunConfig, workdir: Path, step: _Step) -> None:
    tok = load_tokens(workdir, cfg, step)
    table = None
    if cfg.loss_mode != "plain_ce":
        table = training.TokenScoreTable.load(_require(workdir / SCORES, "token score table"))
        if table.reference_checkpoint_id != cfg.stage_hash("reference"):
            raise ArtifactMismatchError(f"{workdir / SCORES} was scored under a different reference configuration")
        step.inputs.append(workdir / SCORES)
    seed = cfg.seed + _SEED_BACKBONE
    seed_everything(seed)
    model = models.BackboneModel(backbone_config(cfg, tok["train"].K))
    opt = Adam(model, cfg.ft_lr)
    tlog = training.finetune_backbone(
        model, tok["train"], table, _train_config(cfg, cfg.ft_epochs, cfg.ft_lr, seed), tok["val"], opt
    )
    tagdir = _tagdir(workdir, cfg)
    tagdir.mkdir(exist_ok=True)
    meta = {"config_hash": cfg.stage_hash("finetune"), "loss_mode": cfg.loss_mode}
    _save_model(tagdir / BACKBONE, model, meta, opt, workdir, seed)
    tlog.write_csv(tagdir / "trainlog.csv")
    tlog.write_token_weights_csv(tagdir / "token_weights.csv", tok["train"].token_feature_origin)
    step.outputs += [tagdir / BACKBONE, tagdir / "trainlog.csv", tagdir / "token_weights.csv"]
    last = tlog.records[-1] if tlog.records else None
    if last is not None:
        print(
            f"fine-tuned ({cfg.loss_mode}) {len(tlog.records)} epochs: target loss {last.mean_target_loss:.4f}, "
            f"validation DR {last.eval_detection_rate:.3f} -> {tagdir / BACKBONE}"
        )


def cmd_train_head(args, cfg: RunConfig, workdir: Path, step: _Step) -> None:
    tok = load_tokens(workdir, cfg, step)
    tagdir = _tagdir(workdir, cfg)
    backbone = _load_backbone(tagdir, cfg, tok["train"].K, step)
    seed = cfg.seed + _SEED_HEAD
    seed_everything(seed)
    head = models.AutoencoderHead(models.AutoencoderConfig.for_width(tok["train"].K, cfg.d_model))
    opt = Adam(head, cfg.head_lr)
    res = training.train_head(backbone, head, tok["train"], _train_config(cfg, cfg.head_epochs, cfg.head_lr, seed), opt)
    _save_model(tagdir / HEAD, head, {"config_hash": cfg.stage_hash("head")}, opt, workdir, seed)
    with open(tagdir / "headlog.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total", "recon", "ce"])
        for e, row in enumerate(zip(res.epoch_losses, res.recon_losses, res.ce_losses)):
            w.writerow([e, *map(repr, row)])
    step.outputs += [tagdir / HEAD, tagdir / "headlog.csv"]
    final = res.epoch_losses[-1] if res.epoch_losses else float("nan")
    print(f"head trained ({cfg.loss_mode}): final total loss {final:.4f} -> {tagdir / HEAD}")


def cmd_eval(args, cfg: RunConfig, workdir: Path, step: _Step) -> None:
    tok = load_tokens(workdir, cfg, step)
    test = tok["test"]
    tagdir = _tagdir(workdir, cfg)
    backbone = _load_backbone(tagdir, cfg, test.K, step)
    variants = {"tokens": detect.aggregate_token_outputs(training.token_logits(backbone, test, cfg.eval_batch_size))}
    if (tagdir / HEAD).exists():
        variants["head"] = training.head_scores(backbone, _load_head(tagdir, cfg, test.K, step), test)
    for variant, scores in variants.items():
        rep = detect.evaluate(
            scores, test.labels, cfg.p_fa, test.sample_ids, cfg.hash, name=f"{cfg.loss_mode}/{variant}"
        )
        rep.extra = {"dataset": cfg.dataset_name, "loss_mode": cfg.loss_mode, "variant": variant}
        path = tagdir / f"report_{variant}.json"
        rep.save(path)
        detect.write_roc_csv(tagdir / f"roc_{variant}.csv", rep.roc)
        step.outputs += [path, tagdir / f"roc_{variant}.csv"]
        print(
            f"{rep.name}: DR {rep.detection_rate:.4f} at requested FAR {rep.requested_far} "
            f"(achieved {rep.achieved_far:.4f}) -> {path}"
        )


def cmd_roc(args, cfg: RunConfig, workdir: Path, step: _Step) -> None:
    paths = [Path(p) for p in args.reports] or sorted(workdir.glob("*/report_*.json"))
    if not paths:
        raise ArtifactMismatchError(f"no detection reports found under {workdir}")
    for p in paths:
        rep = detect.DetectionReport.load(_require(p, "detection report"))
        out = p.with_name(p.stem.replace("report_", "roc_") + ".csv")
        detect.write_roc_csv(out, rep.roc)
        step.inputs.append(p)
        step.outputs.append(out)
        print(f"{rep.name}: {len(rep.roc)} ROC points -> {out}")


def _load_reports(args, workdir: Path, step: _Step) -> list[detect.DetectionReport]:
    paths = [Path(p) for p in args.reports] or sorted(workdir.glob("*/report_*.json"))
    if not paths:
        raise ArtifactMismatchError(f"no detection reports found under {workdir}")
    reports = []
    for p in paths:
        reports.append(detect.DetectionReport.load(_require(p, "detection report")))
        step.inputs.append(p)
    return reports


def report_table(reports: list[detect.DetectionReport]) -> tuple[list[str], list[list]]:
    """Rows = methods, columns = datasets plus their plain mean."""
    datasets = sorted({r.extra.get("dataset", "") for r in reports})
    methods = sorted({r.name for r in reports})
    dr = {(r.name, r.extra.get("dataset", "")): r.detection_rate for r in reports}
    rows = []
    for m in methods:
        vals = [dr.get((m, d)) for d in datasets]
        present = [v for v in vals if v is not None]
        rows.append([m, *vals, float(np.mean(present))])
    return ["method", *datasets, "mean"], rows


def compare_table(reports: list[detect.DetectionReport]) -> tuple[list[str], list[list]]:
    """Preference vs plain-CE detection rates per dataset and scoring variant."""
    dr = {(r.extra.get("dataset", ""), r.extra.get("variant", ""), r.extra.get("loss_mode", "")): r.detection_rate for r in reports}
    keys = sorted({(d, v) for d, v, _ in dr})
    rows = []
    for d, v in keys:
        pa, ce = dr.get((d, v, "preference")), dr.get((d, v, "plain_ce"))
        if pa is None or ce is None:
            continue
        rows.append([d, v, pa, ce, pa - ce])
    if not rows:
        raise ArtifactMismatchError("compare needs reports from both preference and plain_ce runs")
    return ["dataset", "variant", "dr_preference", "dr_plain_ce", "delta"], rows


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_report(args, cfg: RunConfig, workdir: Path, step: _Step) -> None:
    reports = _load_reports(args, workdir, step)
    header, rows = compare_table(reports) if args.compare else report_table(reports)
    out = Path(args.out) if args.out else workdir / ("compare.csv" if args.compare else "report.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    step.outputs.append(out)
    widths = [max(len(_fmt(x)) for x in col) for col in zip(header, *rows)]
    for row in [header, *rows]:
        print("  ".join(_fmt(x).ljust(w) for x, w in zip(row, widths)))


COMMANDS = {
    "synth": (cmd_synth, "synthesize a sea-clutter scene and segment it into observation vectors"),
    "ingest": (cmd_ingest, "segment externally converted echo CSVs (re,im per row) into a dataset"),
    "features": (cmd_features, "extract, normalize and patch sequence features for every split"),
    "train-ref": (cmd_train_ref, "train the reference model on the validation split"),
    "score": (cmd_score, "compute reference losses for every training token"),
    "finetune": (cmd_finetune, "LoRA fine-tune the backbone under the chosen token weighting"),
    "train-head": (cmd_train_head, "train the autoencoder head on frozen backbone features"),
    "eval": (cmd_eval, "detect on the test split at the configured false alarm rate"),
    "roc": (cmd_roc, "write ROC CSVs for detection reports"),
    "report": (cmd_report, "merge detection reports into a table (or a preference vs CE comparison)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radarllm", description="Token-weighted transformer radar target detection")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--workdir", default=".", help="artifact directory (default: current directory)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("finetune", "train-head", "eval"):
            p.add_argument("--loss-mode", choices=training.LOSS_MODES, help="token weighting (default from config)")
        if name == "synth":
            p.add_argument("--csv", action="store_true", help="also write a CSV export of the dataset")
        if name == "ingest":
            p.add_argument("--target", action="append", default=[], help="target-cell echo CSV (repeatable)")
            p.add_argument("--clutter", action="append", default=[], help="clutter-cell echo CSV (repeatable)")
        if name == "features":
            p.add_argument("--dump", action="store_true", help="write raw training features as long-format CSV")
        if name in ("roc", "report"):
            p.add_argument("reports", nargs="*", help="report JSON files (default: all under the workdir)")
        if name == "report":
            p.add_argument("--compare", action="store_true", help="preference vs plain_ce delta table")
            p.add_argument("--out", help="output CSV path")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return parser


def _parse_sets(items: list[str]) -> dict[str, str]:
    pairs = {}
    for item in items:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = _parse_sets(args.set)
        if getattr(args, "loss_mode", None):
            overrides["loss_mode"] = args.loss_mode
        cfg = load_config(args.config, overrides)
        if args.command == "show-config":
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        workdir = Path(args.workdir).resolve()
        workdir.mkdir(parents=True, exist_ok=True)
        step = _Step(args.command, cfg, workdir)
        if args.config:
            step.inputs.append(Path(args.config).resolve())
        COMMANDS[args.command][0](args, cfg, workdir, step)
        step.finish()
        return EXIT_OK
    except ArtifactMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, DatasetFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
