"""Command-line pipeline: phantom cohort, ECG prep, registration, flow
training, inference, evaluation, and analysis tables.

Every command echoes its resolved configuration (including the seed) into a
JSON file next to its outputs, never mutates its inputs, and exits nonzero
with a machine-readable error JSON on failure. ``COF_SEED`` provides a
global seed fallback when ``--seed`` is not given.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from . import analysis, ecg, fileio, flowmatch, inference, metrics, phantom, registration
from .errors import CardiotwinError, FormatError
from .volgrid import FOREGROUND_CLASSES, LV, LabelVolume, Volume3D

SEED_ENV_VAR = "COF_SEED"


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    if os.environ.get(SEED_ENV_VAR):
        return int(os.environ[SEED_ENV_VAR])
    return 0


def _write_json(path: str, payload: dict):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fileio._atomic_write_text(path, json.dumps(payload, indent=1, sort_keys=True))


def _echo_config(out_dir_or_base: str, command: str, args: dict, seed: int):
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "args": {k: v for k, v in args.items() if v is not None},
    }
    if os.path.isdir(out_dir_or_base) or out_dir_or_base.endswith(os.sep):
        path = os.path.join(out_dir_or_base, "run_config.json")
    else:
        path = out_dir_or_base + ".run.json"
    _write_json(path, payload)


def _write_csv(path: str, fieldnames: list, rows: list):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    lines = [",".join(fieldnames)]
    for row in rows:
        cells = []
        for name in fieldnames:
            v = row.get(name, "")
            if isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    fileio._atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# phantom


def _cmd_phantom(args) -> int:
    seed = _resolve_seed(args.seed)
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    defaults = cfg.get("defaults", {})
    subjects = cfg.get("subjects")
    if not subjects:
        raise FormatError("phantom config needs a non-empty 'subjects' list")
    base_seed = int(cfg.get("seed", seed))

    os.makedirs(args.out, exist_ok=True)
    manifest_rows = []
    for i, sub in enumerate(subjects):
        merged = {**defaults, **sub}
        sid = merged.pop("subject_id", f"s{i:03d}")
        category = merged.pop("category", "unlabelled")
        merged.setdefault("seed", base_seed + i)
        for key in ("dims", "spacing_mm", "lv_endo_radii_mm", "lv_epi_radii_mm",
                    "rv_offset_mm", "rv_radii_mm", "center_voxel"):
            if key in merged and merged[key] is not None:
                merged[key] = tuple(merged[key])
        spec = phantom.PhantomSpec(**merged)
        truth = phantom.generate_phantom(spec)

        sub_dir = os.path.join(args.out, sid)
        os.makedirs(sub_dir, exist_ok=True)
        fileio.write_volume(os.path.join(sub_dir, "volume"), truth.volumes)
        fileio.write_volume(
            os.path.join(sub_dir, "labels"),
            fileio.LabelSequence(truth.labels, truth.frame_times),
        )
        fileio.write_ecg(os.path.join(sub_dir, "ecg.csv"), truth.ecg)
        _write_json(
            os.path.join(sub_dir, "truth.json"),
            {
                "subject_id": sid,
                "category": category,
                "lv_cavity_volume_ml": truth.lv_cavity_volume_ml.tolist(),
                "analytic_ef": truth.analytic_ejection_fraction(),
                "heart_rate_bpm": spec.heart_rate_bpm,
                "frames": spec.frames,
                "seed": spec.seed,
            },
        )
        manifest_rows.append(
            {
                "subject_id": sid,
                "volume_path": f"{sid}/volume",
                "labels_path": f"{sid}/labels",
                "ecg_path": f"{sid}/ecg.csv",
                "category": category,
            }
        )
    _write_csv(
        os.path.join(args.out, "manifest.csv"),
        ["subject_id", "volume_path", "labels_path", "ecg_path", "category"],
        manifest_rows,
    )
    _echo_config(args.out, "phantom", vars(args), base_seed)
    print(f"wrote {len(manifest_rows)} phantom subject(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# ecg-prep


def _prep_cycle(rec: ecg.EcgRecord):
    peaks = ecg.detect_r_peaks(rec)
    cycle = ecg.extract_cycle(rec, peaks, which="median")
    emb = ecg.embed_ecg(cycle)
    return peaks, cycle, emb


def _cmd_ecg_prep(args) -> int:
    rec = fileio.read_ecg(args.infile)
    peaks, cycle, emb = _prep_cycle(rec)
    payload = {
        "sample_rate_hz": rec.sample_rate_hz,
        "r_peaks": peaks.tolist(),
        "rr_seconds": cycle.rr_seconds,
        "phase_grid": cycle.phase_grid.tolist(),
        "resampled": cycle.resampled.tolist(),
        "embedding": emb.tolist(),
    }
    _write_json(args.out, payload)
    _echo_config(args.out, "ecg-prep", vars(args), _resolve_seed(args.seed))
    print(f"{peaks.size} R peaks, rr={cycle.rr_seconds:.3f}s -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# register


def _load_sequence(volume_path: str, labels_path: str):
    vol = fileio.read_volume(volume_path)
    labs = fileio.read_volume(labels_path)
    if not hasattr(vol, "frames"):
        raise FormatError("register expects a 4D volume container")
    if not isinstance(labs, fileio.LabelSequence):
        raise FormatError("register expects a 4D label container")
    return vol, labs


def _cmd_register(args) -> int:
    seed = _resolve_seed(args.seed)
    vol, labs = _load_sequence(args.volume, args.labels)
    cfg = registration.RegConfig(
        lambda_seg=args.lambda_seg,
        lambda_smooth=args.lambda_smooth,
        iters=args.iters,
        lr=args.lr,
        stride=args.stride,
        seed=seed,
    )
    defs = registration.register_sequence(vol, labs.labels, cfg)
    fractions = metrics.topology_report(defs)
    meta = {
        "command": "register",
        "seed": seed,
        "iters": cfg.iters,
        "lr": cfg.lr,
        "lambda_seg": cfg.lambda_seg,
        "lambda_smooth": cfg.lambda_smooth,
        "stride": cfg.stride,
        "positive_jacobian_fraction": fractions,
    }
    base = fileio.write_checkpoint(args.out, defs, extra_meta=meta)
    _echo_config(base, "register", vars(args), seed)
    print(f"registered {defs.n_frames} frames -> {base}.ckpt.*")
    return 0


# ---------------------------------------------------------------------------
# train-flow


def _default_defs_path(volume_path: str) -> str:
    return os.path.join(os.path.dirname(fileio._cvol_base(volume_path)), "defs")


def _subject_inputs(row, zero_rea: bool):
    vol = fileio.read_volume(row.volume_path)
    labs = fileio.read_volume(row.labels_path)
    rec = fileio.read_ecg(row.ecg_path)
    _, cycle, emb = _prep_cycle(rec)
    reference = vol.frames[0]
    cond = flowmatch.ConditionEmbedding(
        c_ecg=emb, c_rea=flowmatch.anatomy_features(reference)
    )
    if zero_rea:
        cond = cond.without_rea()
    return vol, labs, cycle, cond


def _cmd_train_flow(args) -> int:
    seed = _resolve_seed(args.seed)
    rows = fileio.read_manifest(args.manifest)
    refs, conds = [], []
    missing = []
    for row in rows:
        defs_path = row.defs_path or _default_defs_path(row.volume_path)
        if not os.path.exists(fileio._ckpt_base(defs_path) + ".ckpt.json"):
            missing.append(f"{row.subject_id}: no deformation checkpoint at '{defs_path}'")
            continue
        vol, labs, _, cond = _subject_inputs(row, args.zero_rea)
        defs = fileio.read_checkpoint(defs_path)
        mask = None if args.sample_all else labs.labels[0]
        refs.append(
            flowmatch.derive_reference_velocities(
                defs, sample_mask=mask, subject_id=row.subject_id
            )
        )
        conds.append(cond)
    if missing:
        raise FormatError("; ".join(missing))

    net = flowmatch.VelocityNet(
        flowmatch.FlowModelConfig(
            ecg_dim=conds[0].c_ecg.size, rea_dim=conds[0].c_rea.size, seed=seed
        )
    )
    cfg = flowmatch.FlowTrainConfig(
        iters=args.iters, batch_size=args.batch, lr=args.lr, seed=seed
    )
    net, trace = flowmatch.train_flow(net, refs, conds, cfg)
    meta = {
        "command": "train-flow",
        "seed": seed,
        "iters": cfg.iters,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "zero_rea": bool(args.zero_rea),
        "subjects": [r.subject_id for r in rows],
        "final_loss": trace[-1],
        "parameter_count": net.parameter_count,
    }
    base = fileio.write_checkpoint(args.out, net, extra_meta=meta)
    _echo_config(base, "train-flow", vars(args), seed)
    print(f"trained on {len(refs)} subject(s), final loss {trace[-1]:.4g} -> {base}.ckpt.*")
    return 0


# ---------------------------------------------------------------------------
# infer


def _as_reference(obj):
    if isinstance(obj, Volume3D):
        return obj
    if hasattr(obj, "frames"):
        return obj.frames[0]
    raise FormatError("reference must be a 3D or 4D intensity container")


def _as_reference_labels(obj):
    if isinstance(obj, LabelVolume):
        return obj
    if isinstance(obj, fileio.LabelSequence):
        return obj.labels[0]
    raise FormatError("labels must be a label container")


def _cmd_infer(args) -> int:
    seed = _resolve_seed(args.seed)
    net = fileio.read_checkpoint(args.flow)
    if not isinstance(net, flowmatch.VelocityNet):
        raise FormatError("--flow must point at a velocity_net checkpoint")
    reference = _as_reference(fileio.read_volume(args.reference))
    ref_labels = _as_reference_labels(fileio.read_volume(args.labels))
    rec = fileio.read_ecg(args.ecg)
    _, cycle, emb = _prep_cycle(rec)
    cond = flowmatch.ConditionEmbedding(
        c_ecg=emb, c_rea=flowmatch.anatomy_features(reference)
    )
    if args.zero_ecg:
        cond = cond.without_ecg()
    if args.zero_rea:
        cond = cond.without_rea()

    frame_times = np.arange(args.frames, dtype=np.float64) / args.frames
    defs = inference.ode_integrate(
        net,
        cond,
        reference.dims,
        frame_times,
        solver=args.solver,
        substeps=args.substeps,
        spacing_mm=reference.spacing_mm,
    )
    volumes, labels = inference.synthesize_4d(reference, ref_labels, defs)

    os.makedirs(args.out, exist_ok=True)
    fileio.write_volume(os.path.join(args.out, "volume"), volumes)
    fileio.write_volume(
        os.path.join(args.out, "labels"), fileio.LabelSequence(labels, frame_times)
    )
    fileio.write_checkpoint(
        os.path.join(args.out, "defs"),
        defs,
        extra_meta={"command": "infer", "rr_seconds": cycle.rr_seconds},
    )
    _write_json(
        os.path.join(args.out, "inference.json"),
        {
            "rr_seconds": cycle.rr_seconds,
            "frames": int(args.frames),
            "solver": args.solver,
            "substeps": int(args.substeps),
            "zero_ecg": bool(args.zero_ecg),
            "zero_rea": bool(args.zero_rea),
        },
    )
    _echo_config(args.out, "infer", vars(args), seed)
    print(f"synthesized {args.frames} frames -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _read_pair_dir(path: str):
    vol = fileio.read_volume(os.path.join(path, "volume"))
    labs = fileio.read_volume(os.path.join(path, "labels"))
    if not hasattr(vol, "frames") or not isinstance(labs, fileio.LabelSequence):
        raise FormatError(f"'{path}' must contain 4D volume + labels containers")
    return vol, labs


def _cmd_evaluate(args) -> int:
    real_vol, real_labs = _read_pair_dir(args.real)
    gen_vol, gen_labs = _read_pair_dir(args.gen)
    t = min(real_vol.n_frames, gen_vol.n_frames)

    ssim_vals = [metrics.ssim(real_vol.frames[k], gen_vol.frames[k]) for k in range(t)]
    psnr_vals = [metrics.psnr(real_vol.frames[k], gen_vol.frames[k]) for k in range(t)]
    seg = {}
    for cls in FOREGROUND_CLASSES:
        dices, ious, hds = [], [], []
        for k in range(t):
            d, i = metrics.dice_iou(gen_labs.labels[k], real_labs.labels[k], cls)
            dices.append(d)
            ious.append(i)
            try:
                hds.append(
                    metrics.hd95(
                        gen_labs.labels[k].labels == cls,
                        real_labs.labels[k].labels == cls,
                        real_labs.labels[k].spacing_mm,
                        mode="surface3d",
                    )
                )
            except CardiotwinError:
                pass
        seg[real_labs.labels[0].class_map[cls]] = {
            "dice": float(np.mean(dices)),
            "iou": float(np.mean(ious)),
            "hd95_mm": float(np.mean(hds)) if hds else None,
        }
    m_corr, m_ssim = metrics.motion_metrics(real_vol, gen_vol)

    report = {
        "frames_compared": t,
        "ssim": float(np.mean(ssim_vals)),
        "psnr_db": float(np.mean(psnr_vals)),
        "m_corr": m_corr,
        "m_ssim": m_ssim,
        "segmentation": seg,
    }
    gen_defs = os.path.join(args.gen, "defs")
    if os.path.exists(gen_defs + ".ckpt.json"):
        defs = fileio.read_checkpoint(gen_defs)
        report["positive_jacobian_fraction"] = metrics.topology_report(defs)
    _write_json(args.out, report)
    _echo_config(args.out, "evaluate", vars(args), _resolve_seed(args.seed))
    print(f"ssim={report['ssim']:.4f} psnr={report['psnr_db']:.2f}dB -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# analyze


def _cmd_analyze(args) -> int:
    seed = _resolve_seed(args.seed)
    rows = fileio.read_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)

    index_rows, curve_rows, profiles, cases = [], [], [], []
    by_category = {}
    for row in rows:
        real_labs = fileio.read_volume(row.labels_path)
        gen_dir = os.path.join(args.gen_dir, row.subject_id)
        gen_labs = fileio.read_volume(os.path.join(gen_dir, "labels"))
        if row.spacing_mm:
            real_labs = fileio.LabelSequence(
                [LabelVolume(l.dims, row.spacing_mm, l.labels, dict(l.class_map))
                 for l in real_labs.labels],
                real_labs.frame_times,
            )
            gen_labs = fileio.LabelSequence(
                [LabelVolume(l.dims, row.spacing_mm, l.labels, dict(l.class_map))
                 for l in gen_labs.labels],
                gen_labs.frame_times,
            )
        rec = fileio.read_ecg(row.ecg_path)
        _, cycle, _ = _prep_cycle(rec)

        real_idx = analysis.functional_indices(
            real_labs.labels, real_labs.frame_times, cycle.rr_seconds
        )
        gen_idx = analysis.functional_indices(
            gen_labs.labels, gen_labs.frame_times, cycle.rr_seconds
        )
        r_curve = (
            analysis.curve_correlation(real_idx, gen_idx)
            if real_idx.volume_curve_ml.size == gen_idx.volume_curve_ml.size
            else float("nan")
        )
        rec_row = {
            "subject_id": row.subject_id,
            "category": row.category,
            "curve_pearson": r_curve,
        }
        for tag, idx in (("real", real_idx), ("gen", gen_idx)):
            rec_row.update(
                {
                    f"{tag}_edv_ml": idx.edv_ml,
                    f"{tag}_esv_ml": idx.esv_ml,
                    f"{tag}_sv_ml": idx.sv_ml,
                    f"{tag}_ef": idx.ef,
                    f"{tag}_co_l_per_min": idx.co_l_per_min,
                }
            )
        index_rows.append(rec_row)
        by_category.setdefault(row.category, []).append((real_idx, gen_idx))
        for k, tt in enumerate(real_labs.frame_times):
            curve_rows.append(
                {
                    "subject_id": row.subject_id,
                    "frame": k,
                    "time": float(tt),
                    "real_ml": float(real_idx.volume_curve_ml[k]),
                    "gen_ml": float(gen_idx.volume_curve_ml[k])
                    if k < gen_idx.volume_curve_ml.size
                    else float("nan"),
                }
            )
        if real_labs.frame_times.size == gen_labs.frame_times.size:
            profiles.append(
                analysis.slice_profile(
                    gen_labs.labels, real_labs.labels, ed_frame=0, es_frame=real_idx.es_frame
                )
            )
            cases.append(
                analysis.ResolutionCase(row.subject_id, gen_labs.labels, real_labs.labels)
            )

    _write_csv(
        os.path.join(args.out, "indices.csv"),
        list(index_rows[0].keys()),
        index_rows,
    )
    _write_csv(
        os.path.join(args.out, "curves.csv"),
        ["subject_id", "frame", "time", "real_ml", "gen_ml"],
        curve_rows,
    )

    agreement_rows = []
    for category, pairs in sorted(by_category.items()):
        for name, attr in (
            ("EDV", "edv_ml"),
            ("ESV", "esv_ml"),
            ("SV", "sv_ml"),
            ("EF", "ef"),
            ("CO", "co_l_per_min"),
        ):
            real_vals = [getattr(r, attr) for r, _ in pairs]
            gen_vals = [getattr(g, attr) for _, g in pairs]
            if len(real_vals) >= 3:
                agg = analysis.index_agreement(
                    real_vals, gen_vals, replicates=args.bootstrap, seed=seed
                )
            else:
                agg = {
                    "pearson_r": float("nan"),
                    "ci_lo": float("nan"),
                    "ci_hi": float("nan"),
                    "mae": float(np.mean(np.abs(np.array(gen_vals) - np.array(real_vals)))),
                    "rmse": float(
                        np.sqrt(np.mean((np.array(gen_vals) - np.array(real_vals)) ** 2))
                    ),
                    "n": len(real_vals),
                }
            agreement_rows.append({"category": category, "index": name, **agg})
    _write_csv(
        os.path.join(args.out, "category_agreement.csv"),
        ["category", "index", "pearson_r", "ci_lo", "ci_hi", "mae", "rmse", "n"],
        agreement_rows,
    )

    if profiles:
        _write_csv(
            os.path.join(args.out, "slice_profile.csv"),
            ["rank", "class", "phase", "n", "dice", "iou", "hd95_mm"],
            analysis.aggregate_slice_profiles(profiles),
        )
    try:
        sweep = analysis.resolution_sweep(cases, n_bins=args.bins)
        _write_csv(
            os.path.join(args.out, "resolution_bins.csv"),
            ["bin", "lo", "hi", "class", "n", "dice_mean", "dice_std", "iou_mean",
             "iou_std", "hd95_mm_mean", "hd95_mm_std"],
            sweep.bin_stats,
        )
        slope_rows = [
            {"class": cls, "metric": m, "slope_per_mm": s}
            for (cls, m), s in sorted(sweep.slopes.items())
        ]
        _write_csv(
            os.path.join(args.out, "resolution_slopes.csv"),
            ["class", "metric", "slope_per_mm"],
            slope_rows,
        )
    except CardiotwinError:
        pass  # single-resolution cohorts have no trend to fit
    _echo_config(args.out, "analyze", vars(args), seed)
    print(f"analysis tables -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardiotwin",
        description="ECG-conditioned 4D cardiac digital twin pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("ecg-prep", help="R peaks, cycle crop, embedding")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_ecg_prep)

    p = sub.add_parser("register", help="stage 1: sequence registration")
    p.add_argument("--volume", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-seg", type=float, default=1.0)
    p.add_argument("--lambda-smooth", type=float, default=0.01)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("train-flow", help="stage 2: flow matching")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--zero-rea", action="store_true",
                   help="replace anatomy features with zeros (ablation)")
    p.add_argument("--sample-all", action="store_true",
                   help="supervise on all voxels instead of dilated foreground")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train_flow)

    p = sub.add_parser("infer", help="ODE inference + 4D synthesis")
    p.add_argument("--flow", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--ecg", required=True)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--solver", choices=inference.SOLVERS, default="rk4")
    p.add_argument("--substeps", type=int, default=2)
    p.add_argument("--zero-ecg", action="store_true",
                   help="zero the ECG condition at inference (ablation)")
    p.add_argument("--zero-rea", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="image + segmentation metrics")
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("analyze", help="functional indices, slices, bins, bootstrap")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gen-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=4)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CardiotwinError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return 1
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
