"""Command-line entry point wiring every stage into reproducible file runs.

Subcommands: gen, train-wtal, train-tspca, calibrate, localize, eval,
report, run-all. Every stage reads and writes files under the output
directory, so rerunning a stage with identical inputs reproduces identical
bytes. The config file uses the same `keyword value...` line format as the
dataset manifest; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import baseline, deconfound, evaluate, localize, tspca
from .dataset import (Dataset, Split, SyntheticConfig, _parse_record_lines,
                      generate_synthetic, load_dataset, save_dataset)
from .errors import ConfigurationError, ValidationError, WtalError

ERROR_PROFILE_IOU = 0.5   # headline threshold used for the error taxonomy


@dataclass(frozen=True)
class RunConfig:
    train_manifest: str | None = None
    test_manifest: str | None = None
    out_dir: str = "out"
    synthetic: SyntheticConfig = SyntheticConfig()
    wtal: baseline.TrainConfig = baseline.TrainConfig()
    k_divisor: int = 8
    tspca: tspca.TspcaConfig = tspca.TspcaConfig()
    calibration: deconfound.CalibrationConfig = deconfound.CalibrationConfig()
    localization: localize.LocalizeConfig = localize.LocalizeConfig()
    iou_preset: str = "coarse"


_INT_KEYS = {
    "syn_n_train", "syn_n_test", "syn_segments", "syn_dim", "syn_classes",
    "syn_contexts", "syn_seed", "wtal_epochs", "wtal_seed", "wtal_k_divisor",
    "tspca_projectors", "tspca_epochs", "tspca_seed",
}
_FLOAT_KEYS = {
    "syn_context_strength", "syn_noise_sigma", "syn_fg_fraction",
    "wtal_lr", "wtal_momentum", "wtal_weight_decay",
    "tspca_recon_weight", "tspca_smooth_weight", "tspca_lr",
    "gamma", "video_class_threshold", "nms_tiou", "outer_margin_fraction",
}
_LIST_KEYS = {"gamma_grid", "loc_thresholds"}
_STR_KEYS = {"train_manifest", "test_manifest", "out_dir", "iou_preset"}


def load_run_config(path=None) -> RunConfig:
    """Parse the key/value config file; every key is optional."""
    values = {}
    if path is not None:
        for lineno, keyword, args in _parse_record_lines(path):
            where = f"{path}:{lineno}"
            try:
                if keyword in _INT_KEYS:
                    values[keyword] = int(args[0])
                elif keyword in _FLOAT_KEYS:
                    values[keyword] = float(args[0])
                elif keyword in _LIST_KEYS:
                    values[keyword] = tuple(float(s) for s in args[0].split(",") if s)
                elif keyword in _STR_KEYS:
                    values[keyword] = args[0]
                else:
                    raise ConfigurationError(f"{where}: unknown config key {keyword!r}")
            except (ValueError, IndexError):
                raise ConfigurationError(f"{where}: bad value for {keyword!r}")

    synthetic = SyntheticConfig(
        n_train=values.get("syn_n_train", 20),
        n_test=values.get("syn_n_test", 10),
        num_segments=values.get("syn_segments", 50),
        feature_dim=values.get("syn_dim", 16),
        num_classes=values.get("syn_classes", 4),
        num_contexts=values.get("syn_contexts", 3),
        context_strength=values.get("syn_context_strength", 1.5),
        noise_sigma=values.get("syn_noise_sigma", 0.5),
        fg_fraction=values.get("syn_fg_fraction", 0.3),
        seed=values.get("syn_seed", 0),
    )
    wtal = baseline.TrainConfig(
        learning_rate=values.get("wtal_lr", 0.01),
        momentum=values.get("wtal_momentum", 0.9),
        epochs=values.get("wtal_epochs", 100),
        weight_decay=values.get("wtal_weight_decay", 1e-4),
        seed=values.get("wtal_seed", 0),
    )
    ts_cfg = tspca.TspcaConfig(
        num_projectors=values.get("tspca_projectors", 5),
        recon_weight=values.get("tspca_recon_weight", 1.0),
        smooth_weight=values.get("tspca_smooth_weight", 1.0),
        learning_rate=values.get("tspca_lr", 0.005),
        epochs=values.get("tspca_epochs", 500),
        seed=values.get("tspca_seed", 0),
    )
    calibration = deconfound.CalibrationConfig(
        gamma=values.get("gamma", 0.5),
        gamma_grid=values.get("gamma_grid", (0.1, 0.2, 0.5, 1.0)),
    )
    localization = localize.LocalizeConfig(
        thresholds=values.get("loc_thresholds", localize.DEFAULT_THRESHOLDS),
        video_class_threshold=values.get("video_class_threshold", 0.1),
        nms_tiou=values.get("nms_tiou", 0.5),
        outer_margin_fraction=values.get("outer_margin_fraction", 0.25),
    )
    preset = values.get("iou_preset", "coarse")
    if preset not in evaluate.IOU_PRESETS:
        raise ConfigurationError(
            f"unknown iou_preset {preset!r}; choose from "
            f"{sorted(evaluate.IOU_PRESETS)}"
        )
    return RunConfig(
        train_manifest=values.get("train_manifest"),
        test_manifest=values.get("test_manifest"),
        out_dir=values.get("out_dir", "out"),
        synthetic=synthetic,
        wtal=wtal,
        k_divisor=values.get("wtal_k_divisor", 8),
        tspca=ts_cfg,
        calibration=calibration,
        localization=localization,
        iou_preset=preset,
    )


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.seed is not None:
        cfg = replace(
            cfg,
            synthetic=replace(cfg.synthetic, seed=args.seed),
            wtal=replace(cfg.wtal, seed=args.seed),
            tspca=replace(cfg.tspca, seed=args.seed),
        )
    if args.gamma is not None:
        cfg = replace(
            cfg,
            calibration=deconfound.CalibrationConfig(
                gamma=args.gamma, gamma_grid=(args.gamma,)
            ),
        )
    return cfg


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_split(cfg: RunConfig, split: Split) -> Dataset:
    if split is Split.TRAIN:
        manifest = cfg.train_manifest or str(Path(cfg.out_dir) / "train" / "manifest.txt")
    else:
        manifest = cfg.test_manifest or str(Path(cfg.out_dir) / "test" / "manifest.txt")
    if not Path(manifest).exists():
        raise ValidationError(
            f"manifest {manifest} not found; run `gen` first or set "
            f"{'train' if split is Split.TRAIN else 'test'}_manifest in the config"
        )
    return load_dataset(manifest, split)


def cmd_gen(cfg: RunConfig) -> None:
    out = _out(cfg)
    train, test = generate_synthetic(cfg.synthetic)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(f"gen: wrote {len(train.videos)} train / {len(test.videos)} test videos "
          f"under {out}")


def _write_loss_history(history, path, extra_lines=()):
    lines = [f"epoch {i} {value!r}" for i, value in enumerate(history)]
    lines.extend(extra_lines)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train_wtal(cfg: RunConfig) -> None:
    out = _out(cfg)
    train = _load_split(cfg, Split.TRAIN)
    params, history = baseline.train_classifier(train, cfg.wtal, cfg.k_divisor)
    baseline.save_params(params, out / "classifier.wtcp")
    _write_loss_history(history, out / "wtal_loss.txt")
    print(f"train-wtal: final loss {history[-1]:.6f} -> {out / 'classifier.wtcp'}")


def cmd_train_tspca(cfg: RunConfig) -> None:
    out = _out(cfg)
    train = _load_split(cfg, Split.TRAIN)
    bank, history = tspca.train_tspca(train, cfg.tspca)
    tspca.save_bank(bank, out / "projectors.tspc")
    residual = tspca.orthogonality_residual(bank)
    _write_loss_history(history, out / "tspca_loss.txt",
                        [f"orthogonality_residual {residual!r}"])
    print(f"train-tspca: ||PP^T - I||_F = {residual:.4f} -> {out / 'projectors.tspc'}")


def _write_confounders(scores, path) -> None:
    lines = []
    for score in scores:
        for t, value in enumerate(score.z):
            lines.append(f"conf {score.video_id} {t} {value:.9g}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8")


def read_confounders(path):
    by_video = {}
    order = []
    for _lineno, keyword, args in _parse_record_lines(path):
        if keyword != "conf" or len(args) != 3:
            raise ValidationError(f"{path}: malformed confounder line")
        video_id = args[0]
        if video_id not in by_video:
            by_video[video_id] = []
            order.append(video_id)
        by_video[video_id].append(float(args[2]))
    return {v: np.array(by_video[v]) for v in order}


def cmd_calibrate(cfg: RunConfig) -> None:
    out = _out(cfg)
    train = _load_split(cfg, Split.TRAIN)
    test = _load_split(cfg, Split.TEST)
    params = baseline.load_params(out / "classifier.wtcp")
    bank = tspca.load_bank(out / "projectors.tspc")
    bank = tspca.orient_projectors(bank, train, params)
    tspca.save_bank(bank, out / "projectors_oriented.tspc")

    gamma, sweep = deconfound.select_gamma(
        train, params, bank, cfg.calibration, cfg.localization,
        split_seed=cfg.wtal.seed,
    )
    gamma_lines = [f"gamma {gamma!r}"]
    for candidate, value in sweep.items():
        gamma_lines.append(f"candidate {candidate!r} {value!r}")
    (out / "gamma.txt").write_text("\n".join(gamma_lines) + "\n", encoding="utf-8")

    baseline_cas, calibrated_cas, confounders = [], [], []
    for video in test.videos:
        cas = deconfound.quantize_cas(baseline.cas_forward(params, video))
        score = tspca.confounder_score(bank, video)
        calibrated = deconfound.quantize_cas(
            deconfound.calibrate(cas, score, gamma)
        )
        baseline_cas.append(cas)
        calibrated_cas.append(calibrated)
        confounders.append(score)

    for name, cas_list in (("baseline", baseline_cas), ("calibrated", calibrated_cas)):
        deconfound.write_cas_text(cas_list, out / f"cas_{name}.txt")
        binary_dir = out / f"cas_{name}"
        binary_dir.mkdir(exist_ok=True)
        for cas in cas_list:
            deconfound.write_cas_binary(cas, binary_dir / f"{cas.video_id}.wcas")
    _write_confounders(confounders, out / "confounder.txt")
    print(f"calibrate: gamma {gamma} (orientation {bank.orientation:+d}), "
          f"wrote activation exports under {out}")


def _read_cas_for(out: Path, name: str, test: Dataset):
    binary_dir = out / f"cas_{name}"
    text_path = out / f"cas_{name}.txt"
    cas_list = []
    if binary_dir.is_dir():
        for video in test.videos:
            path = binary_dir / f"{video.video_id}.wcas"
            if not path.exists():
                raise ValidationError(
                    f"missing activation dump {path}; run `calibrate` first"
                )
            cas_list.append(deconfound.read_cas_binary(path, video.video_id))
        return cas_list
    if text_path.exists():
        by_id = {c.video_id: c for c in deconfound.read_cas_text(text_path)}
        return [by_id[v.video_id] for v in test.videos]
    raise ValidationError(
        f"no activation export for run {name!r} under {out}; run `calibrate` first"
    )


def cmd_localize(cfg: RunConfig) -> None:
    out = _out(cfg)
    test = _load_split(cfg, Split.TEST)
    params = baseline.load_params(out / "classifier.wtcp")
    for name in ("baseline", "calibrated"):
        cas_list = _read_cas_for(out, name, test)
        predictions = []
        for video, cas in zip(test.videos, cas_list):
            predictions.extend(
                deconfound.localize_cas(cas, video, params.k_divisor,
                                        cfg.localization)
            )
        localize.write_predictions(predictions, out / f"predictions_{name}.txt")
        print(f"localize: {len(predictions)} instances -> "
              f"{out / f'predictions_{name}.txt'}")


def cmd_eval(cfg: RunConfig) -> None:
    out = _out(cfg)
    test = _load_split(cfg, Split.TEST)
    thresholds = evaluate.IOU_PRESETS[cfg.iou_preset]
    for name in ("baseline", "calibrated"):
        pred_path = out / f"predictions_{name}.txt"
        if not pred_path.exists():
            raise ValidationError(f"missing {pred_path}; run `localize` first")
        predictions = localize.read_predictions(pred_path)
        result = evaluate.map_eval(predictions, test.ground_truth, thresholds)
        evaluate.write_eval_text(result, out / f"eval_{name}.txt")
        evaluate.write_eval_dat(result, out / f"eval_{name}.dat")
        profile = evaluate.error_profile(predictions, test.ground_truth,
                                         ERROR_PROFILE_IOU)
        evaluate.write_errors_dat(profile, ERROR_PROFILE_IOU,
                                  out / f"errors_{name}.dat")
        print(f"eval[{name}]: mAP@0.5 = "
              f"{result.map_by_iou.get(0.5, float('nan')):.4f}, "
              f"avg mAP = {result.average_map:.4f}")


def write_report(cfg: RunConfig) -> None:
    """Assemble the comparison tables and per-video traces from stage files."""
    out = _out(cfg)
    required = {
        "eval": [out / "eval_baseline.dat", out / "eval_calibrated.dat",
                 out / "errors_baseline.dat", out / "errors_calibrated.dat"],
        "calibrate": [out / "cas_baseline.txt", out / "cas_calibrated.txt",
                      out / "confounder.txt"],
    }
    for stage, paths in required.items():
        for path in paths:
            if not path.exists():
                raise ValidationError(f"missing {path}; run `{stage}` first")

    base = evaluate.read_eval_dat(out / "eval_baseline.dat")
    cal = evaluate.read_eval_dat(out / "eval_calibrated.dat")
    thresholds = base.iou_thresholds
    rows = [
        "row," + ",".join(f"{t:.2f}" for t in thresholds),
        "baseline," + ",".join(
            f"{100 * base.map_by_iou[t]:.2f}" for t in thresholds),
        "calibrated," + ",".join(
            f"{100 * cal.map_by_iou[t]:.2f}" for t in thresholds),
        "abs_improve," + ",".join(
            f"{100 * (cal.map_by_iou[t] - base.map_by_iou[t]):.2f}"
            for t in thresholds),
    ]
    (out / "report_map.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    base_err = evaluate.read_errors_dat(out / "errors_baseline.dat")
    cal_err = evaluate.read_errors_dat(out / "errors_calibrated.dat")
    err_rows = ["section,category,baseline,calibrated"]
    for category in evaluate.ERROR_CATEGORIES:
        err_rows.append(f"counts,{category},{base_err.counts[category]},"
                        f"{cal_err.counts[category]}")
    for i in range(5):
        for category in evaluate.ERROR_CATEGORIES:
            err_rows.append(
                f"quintile_{i + 1},{category},"
                f"{base_err.quintile_percentages[i][category]:.2f},"
                f"{cal_err.quintile_percentages[i][category]:.2f}"
            )
    (out / "report_errors.csv").write_text("\n".join(err_rows) + "\n",
                                           encoding="utf-8")

    base_cas = {c.video_id: c for c in deconfound.read_cas_text(out / "cas_baseline.txt")}
    cal_cas = {c.video_id: c for c in deconfound.read_cas_text(out / "cas_calibrated.txt")}
    confounders = read_confounders(out / "confounder.txt")
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    for video_id in sorted(base_cas):
        a = base_cas[video_id].scores.max(axis=1)
        ahat = cal_cas[video_id].scores.max(axis=1)
        z = confounders.get(video_id, np.zeros(len(a)))
        lines = ["t,cas_max,confounder,calibrated_max"]
        for t in range(len(a)):
            lines.append(f"{t},{a[t]:.6f},{z[t]:.6f},{ahat[t]:.6f}")
        (trace_dir / f"{video_id}.csv").write_text("\n".join(lines) + "\n",
                                                   encoding="utf-8")
    print(f"report: wrote report_map.csv, report_errors.csv and "
          f"{len(base_cas)} traces under {out}")


def cmd_run_all(cfg: RunConfig) -> None:
    if cfg.train_manifest is None or cfg.test_manifest is None:
        cmd_gen(cfg)
    cmd_train_wtal(cfg)
    cmd_train_tspca(cfg)
    cmd_calibrate(cfg)
    cmd_localize(cfg)
    cmd_eval(cfg)
    write_report(cfg)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="wtal-deconf",
        description="weakly-supervised action localization with projector-based "
                    "activation calibration",
    )
    parser.add_argument("command", choices=[
        "gen", "train-wtal", "train-tspca", "calibrate", "localize", "eval",
        "report", "run-all",
    ])
    parser.add_argument("--config", default=None, help="key/value config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override every seed in the config")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--gamma", type=float, default=None,
                        help="fix the calibration gamma (disables the sweep)")
    return parser


_COMMANDS = {
    "gen": cmd_gen,
    "train-wtal": cmd_train_wtal,
    "train-tspca": cmd_train_tspca,
    "calibrate": cmd_calibrate,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "report": write_report,
    "run-all": cmd_run_all,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(parser.format_usage(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:   # argparse -h
        return int(exc.code or 0)
    try:
        cfg = load_run_config(args.config)
        cfg = _apply_overrides(cfg, args)
        _COMMANDS[args.command](cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (WtalError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
