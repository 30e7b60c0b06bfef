"""Command-line interface: phantom generation, artifact injection,
regression, evaluation, dropout sweeps and format conversion.

Every command writes into a fresh output directory; on failure the partial
output is removed and a single machine-readable ``error: ...`` line goes to
stderr (exit code 1; usage errors exit 2).
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import io as gio
from . import metrics, phantom
from .config import (
    ConfigError,
    ExperimentConfig,
    PRESETS,
    config_echo,
    config_from_dict,
    load_experiment_config,
)
from .density import density_to_hu, hu_to_density
from .grid import LandmarkSet, ScalarGrid
from .regression import TimeSeries, run_multiresolution


def _parse_dims(text: str) -> tuple[int, ...]:
    dims = tuple(int(tok) for tok in text.replace("x", ",").split(",") if tok)
    if not 1 <= len(dims) <= 3:
        raise ValueError(f"bad dims {text!r}")
    return dims


class _OutputDir:
    """Create the target atomically-ish: build in <out>.partial, rename on
    success, remove on failure."""

    def __init__(self, target, force: bool = False):
        self.target = Path(target)
        self.partial = Path(str(target) + ".partial")
        self.force = force

    def __enter__(self) -> Path:
        if self.target.exists() and not self.force:
            raise FileExistsError(f"output directory {self.target} exists (use --force)")
        if self.partial.exists():
            shutil.rmtree(self.partial)
        self.partial.mkdir(parents=True)
        return self.partial

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            if self.target.exists():
                shutil.rmtree(self.target)
            self.partial.rename(self.target)
        else:
            shutil.rmtree(self.partial, ignore_errors=True)
        return False


# ---------------------------------------------------------------------------
# subcommands

def _cmd_phantom(args) -> int:
    spec = phantom.PhantomSpec(
        dims=_parse_dims(args.dims),
        spacing=tuple(1.0 for _ in _parse_dims(args.dims)),
        amplitude_mm=args.amplitude,
        n_phases=args.phases,
        seed=args.seed,
        texture=args.texture,
        n_landmarks=args.landmarks,
    )
    ts, truth = phantom.make_phantom(spec)
    with _OutputDir(args.out, args.force) as out:
        gio.save_series(out, ts, truth)
    print(f"wrote {spec.n_phases}-phase phantom to {args.out}")
    return 0


def _cmd_inject(args) -> int:
    ts, truth = gio.load_series(args.series)
    with _OutputDir(args.out, args.force) as out:
        extra: dict = {}
        if args.duplication_mm is not None:
            ts2, artifact_mask = phantom.inject_duplication(
                ts, args.phase, args.duplication_mm
            )
            masks = list(ts2.masks)
            masks[args.phase] = ScalarGrid(
                artifact_mask.geometry,
                masks[args.phase].values * artifact_mask.values,
            )
            ts2 = TimeSeries(ts2.images, masks, ts2.times)
            extra = {"artifact_phase": args.phase,
                     "artifact_mask": "artifact_mask.hdr"}
        elif args.dropout_fraction is not None:
            drop = phantom.make_dropout_masks(
                ts, args.dropout_fraction, args.slab_mm, args.seed
            )
            ts2 = phantom.apply_dropout(ts, drop)
            artifact_mask = None
        else:
            raise ValueError("inject needs --duplication-mm or --dropout-fraction")
        _save_series_with_truth(out, ts2, args.series)
        if extra:
            gio.write_volume(out / "artifact_mask.hdr",
                             ScalarGrid(artifact_mask.geometry,
                                        (artifact_mask.values > 0.5).astype(float)),
                             "uint8")
            inject_info = json.loads((out / "series.json").read_text())
            inject_info.update(extra)
            (out / "series.json").write_text(json.dumps(inject_info, indent=2) + "\n")
    print(f"wrote injected series to {args.out}")
    return 0


def _save_series_with_truth(out: Path, ts: TimeSeries, source_series) -> None:
    gio.save_series(out, ts)
    src_truth = Path(source_series) / "truth"
    if src_truth.is_dir():
        shutil.copytree(src_truth, out / "truth")
        manifest = json.loads((out / "series.json").read_text())
        manifest["truth"] = "truth"
        (out / "series.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _experiment_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_experiment_config(args.config)
    else:
        doc: dict = {}
        if args.preset:
            doc["preset"] = args.preset
        else:
            raise ConfigError("regress needs --config or --preset")
        cfg = config_from_dict(doc)
    if args.mode:
        cfg.mode = args.mode
    if args.driver:
        cfg.driver = args.driver
    if args.max_iters is not None:
        cfg.max_iters = args.max_iters
    if args.k is not None:
        cfg.k = args.k
    cfg.regression_config()  # validate the merged config
    return cfg


def _cmd_regress(args) -> int:
    cfg = _experiment_config(args)
    series_dir = args.series or cfg.series_dir
    if not series_dir:
        raise ConfigError("no input series (give --series or series_dir in config)")
    out_dir = args.out or cfg.output_dir
    if not out_dir:
        raise ConfigError("no output directory (give --out or output_dir in config)")
    ts, _ = gio.load_series(series_dir)
    result = run_multiresolution(ts, cfg.regression_config())
    with _OutputDir(out_dir, args.force) as out:
        gio.save_result(out, result, config_echo(cfg), ts.times)
    final = result.final_cost
    print(f"regression finished: final cost {final:.6g}, "
          f"converged={result.converged}, output {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    ts, truth = gio.load_series(args.truth_dir)
    if truth is None:
        raise ValueError(f"{args.truth_dir} carries no ground truth")
    result = gio.load_result(args.result_dir)
    series_info = json.loads((Path(args.truth_dir) / "series.json").read_text())
    lung = truth["lung_mask"]
    rows: list[list[str]] = []

    def add(name, value, region, units):
        rows.append([name, repr(float(value)), region, units])

    n = len(result["fits"])
    jac_errors = []
    for i in range(n):
        err = metrics.jacobian_error(result["jac_inv"][i], truth["jacobians"][i], lung)
        jac_errors.append(err)
        add(f"jacobian_error_{i:02d}", err, "lung", "1")
    add("jacobian_error_mean", float(np.mean(jac_errors[1:])), "lung", "1")
    add("jacobian_error_final", jac_errors[-1], "lung", "1")

    if "artifact_mask" in series_info:
        amask = gio.read_volume(Path(args.truth_dir) / series_info["artifact_mask"])
        region = ScalarGrid(amask.geometry, (amask.values < 0.5).astype(float))
        ai = int(series_info["artifact_phase"])
        add(
            "jacobian_error_artifact",
            metrics.jacobian_error(result["jac_inv"][ai], truth["jacobians"][ai], region),
            "artifact", "1",
        )

    add("template_mlv", metrics.mean_mlv(result["template"], lung), "lung", "density")
    for i in range(n):
        add(
            f"masked_ssd_{i:02d}",
            metrics.masked_ssd(result["fits"][i], ts.images[i], ts.masks[i]),
            "whole", "density^2*mm^d",
        )

    if "landmarks_moving" in truth:
        moving = LandmarkSet(truth["landmarks_moving"], paired=True)
        reference = LandmarkSet(truth["landmarks_reference"], paired=True)
        add("mle_pre", metrics.mean_landmark_error(moving, reference), "whole", "mm")
        est_inv = result["maps_inv"][-1]
        mapped = phantom.propagate_landmarks(moving, est_inv)
        add("mle_post", metrics.mean_landmark_error(mapped, reference), "whole", "mm")

    out_path = Path(args.out) if args.out else Path(args.result_dir) / "metrics.csv"
    gio.write_csv(out_path, "metrics", ["name", "value", "region", "units"], rows)
    print(f"wrote {len(rows)} metrics to {out_path}")
    return 0


def _dropout_jacobian_error(ts, truth, cfg, level_pct, repeat, seed, mode,
                            slab_mm: float = 12.0):
    from dataclasses import replace

    # blanked data for both modes; only gdr consumes the masks
    drop = phantom.make_dropout_masks(ts, level_pct / 100.0, slab_mm, seed)
    dropped = phantom.apply_dropout(ts, drop)
    rc = replace(cfg.regression_config(), mode=mode)
    result = run_multiresolution(dropped, rc)
    lung = truth["lung_mask"]
    errs = [
        metrics.jacobian_error(result.jac_inv_obs[i], truth["jacobians"][i], lung)
        for i in range(1, ts.n_obs)
    ]
    return float(np.mean(errs))


def _cmd_sweep_dropout(args) -> int:
    from .parallel import pmap

    cfg = _experiment_config(args)
    ts, truth = gio.load_series(args.series)
    if truth is None:
        raise ValueError("sweep-dropout needs a series with ground truth")
    levels = [int(tok) for tok in args.levels.split(",") if tok != ""]
    tasks = []
    for mode in ("gdr", "gir"):
        for li, pct in enumerate(levels):
            for rep in range(args.repeats):
                seed = args.seed + 1000 * li + rep
                tasks.append((mode, pct, rep, seed))

    def run(task):
        mode, pct, rep, seed = task
        err = _dropout_jacobian_error(ts, truth, cfg, pct, rep, seed, mode)
        return [mode, str(pct), str(rep), str(seed), repr(float(err))]

    rows = pmap(run, tasks)
    with _OutputDir(args.out, args.force) as out:
        gio.write_csv(
            out / "sweep.csv",
            "dropout-sweep",
            ["mode", "dropout_pct", "repeat", "seed", "jacobian_error"],
            rows,
        )
    print(f"wrote {len(rows)} sweep rows to {args.out}/sweep.csv")
    return 0


def _cmd_convert(args) -> int:
    vol = gio.read_volume(args.input)
    if args.to_density:
        if not isinstance(vol, ScalarGrid):
            raise ValueError("HU conversion needs a scalar volume")
        gio.write_volume(args.out, hu_to_density(vol))
    elif args.to_hu:
        if not isinstance(vol, ScalarGrid):
            raise ValueError("density conversion needs a scalar volume")
        gio.write_volume(args.out, density_to_hu(vol))
    elif args.slice is not None:
        axis_index = args.slice.split(",")
        if not isinstance(vol, ScalarGrid):
            raise ValueError("slice export needs a scalar volume")
        if vol.geometry.ndim == 2:
            gio.export_slice(vol, args.out)
        else:
            gio.export_slice(vol, args.out, int(axis_index[0]), int(axis_index[1]))
    else:
        raise ValueError("convert needs --to-density, --to-hu or --slice")
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gdr",
        description="Geodesic density regression of image time-series "
                    "with artifact masks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic series with ground truth")
    p.add_argument("--dims", default="64,64", help="grid dims, e.g. 64,64 or 48,48,48")
    p.add_argument("--amplitude", type=float, default=6.0, help="deformation mm")
    p.add_argument("--phases", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture", choices=("none", "vessels", "fine"), default="vessels")
    p.add_argument("--landmarks", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("inject", help="inject a duplication artifact or dropout")
    p.add_argument("--series", required=True)
    p.add_argument("--duplication-mm", type=float, default=None)
    p.add_argument("--phase", type=int, default=1, help="phase for duplication")
    p.add_argument("--dropout-fraction", type=float, default=None)
    p.add_argument("--slab-mm", type=float, default=12.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_inject)

    p = sub.add_parser("regress", help="run the regression")
    p.add_argument("--series", default=None)
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--mode", choices=("gdr", "gir"), default=None)
    p.add_argument("--driver", choices=("fot", "foi"), default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_regress)

    p = sub.add_parser("eval", help="score a result directory against ground truth")
    p.add_argument("--truth-dir", required=True)
    p.add_argument("--result-dir", required=True)
    p.add_argument("--out", default=None, help="metrics csv path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-dropout", help="dropout robustness protocol")
    p.add_argument("--series", required=True)
    p.add_argument("--levels", default="0,10,20,30,40,50", help="percent levels")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk-2d")
    p.add_argument("--mode", default=None, help=argparse.SUPPRESS)
    p.add_argument("--driver", choices=("fot", "foi"), default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_sweep_dropout)

    p = sub.add_parser("convert", help="HU/density conversion and slice export")
    p.add_argument("--input", required=True)
    p.add_argument("--to-density", action="store_true")
    p.add_argument("--to-hu", action="store_true")
    p.add_argument("--slice", default=None, help="axis,index for 3D volumes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_convert)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
