"""Command-line interface.

Subcommands: gen-scene, build-tracks, match, postprocess, sample-groups,
eval-homography, eval-triangulation. Every run is deterministic for a fixed
config and seed: reruns produce byte-identical MVWF/TSV/CSV/JSON outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config, save_config
from .geometry import (ErrorCurve, corner_error, dlt_homography,
                       ransac_homography, accuracy_completeness,
                       triangulate_observations)
from .grids import DenseWarpField, read_warp_file, write_warp_file
from .grouping import (GroupSamplerParams, ImageGroup, default_budget,
                       overlap_from_descriptors, overlap_from_matches,
                       read_group_manifest, sample_groups, write_group_manifest)
from .matcher import init_matcher_params, run_group
from .features import OracleFeatureProvider
from .oracle import (gt_warp, load_scene, make_planar_scene,
                     make_point_cloud_scene, save_scene, simulate_matcher)
from .postprocess import (match_statistics, postprocess_group,
                          reciprocity_filter, select_matches, write_statistics)
from .tracks import sample_tracks, write_tracks_tsv


def _parse_thresholds(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _load_cfg(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return PipelineConfig()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default_group(num_views: int, k: int) -> ImageGroup:
    return ImageGroup(0, tuple(range(1, min(num_views, k + 1))))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    size = args.image_size or cfg.base_resolution
    if args.kind == "planar":
        scene = make_planar_scene(args.views, (size, size), args.seed)
    else:
        scene = make_point_cloud_scene(args.views, (size, size), args.seed,
                                       num_points=args.points)
    path = out / "scene.json"
    save_scene(path, scene)
    print(f"wrote {path} ({args.kind}, {scene.num_views} views, {size}x{size})")
    return 0


def cmd_build_tracks(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    scene = load_scene(args.scene)
    group = _default_group(scene.num_views, cfg.targets_per_group)
    samples = simulate_matcher(scene, group, cfg.matcher_samples,
                               cfg.matcher_noise_sigma, cfg.matcher_outlier_rate,
                               seed=args.seed)
    tracks = sample_tracks(samples, cfg.track_tokens, seed=args.seed,
                           normalize=cfg.normalize_track_coords)
    path = out / "tracks.tsv"
    write_tracks_tsv(path, tracks, num_views=len(group.views))
    print(f"wrote {path} ({len(tracks)} tracks from {len(samples)} matches)")
    return 0


def cmd_sample_groups(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    if args.warps:
        warps = {}
        m = 0
        for path in sorted(Path(args.warps).glob("*.mvwf")):
            warp = read_warp_file(path)
            warps[(warp.source_view, warp.target_view)] = warp
            m = max(m, warp.source_view + 1, warp.target_view + 1)
        if not warps:
            print(f"no MVWF files under {args.warps}", file=sys.stderr)
            return 2
        overlap = overlap_from_matches(warps, m, cfg.group_tau_conf)
    elif args.descriptors:
        table = np.loadtxt(args.descriptors, delimiter="\t", ndmin=2)
        overlap = overlap_from_descriptors(table)
        m = overlap.num_images
    elif args.scene:
        scene = load_scene(args.scene)
        m = scene.num_views
        warps = {}
        for i in range(m):
            for j in range(m):
                if i != j:
                    warps[(i, j)] = gt_warp(scene, i, j)
        overlap = overlap_from_matches(warps, m, cfg.group_tau_conf)
    else:
        print("sample-groups needs --scene, --warps or --descriptors",
              file=sys.stderr)
        return 2
    params = GroupSamplerParams(max_targets=cfg.targets_per_group, tau=cfg.group_tau,
                                tau_conf=cfg.group_tau_conf, beta=cfg.beta,
                                alpha_src=cfg.alpha_src, alpha_tgt=cfg.alpha_tgt,
                                lam=cfg.lam, half_budget=(args.budget == "half"))
    budget = default_budget(m, params.half_budget)
    stage1, stage2 = sample_groups(overlap, params, budget)
    path = out / "groups.json"
    write_group_manifest(path, stage1, stage2)
    print(f"wrote {path} ({len(stage1)} stage-1 + {len(stage2)} stage-2 groups, "
          f"budget {budget})")
    return 0


def cmd_match(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    scene = load_scene(args.scene)
    if args.groups:
        groups = [g for g, _ in read_group_manifest(args.groups)]
    else:
        groups = [_default_group(scene.num_views, cfg.targets_per_group)]
    provider = OracleFeatureProvider(scene, dim=cfg.feature_dim, seed=args.seed)
    params = init_matcher_params(
        feature_dim=cfg.feature_dim, hidden_dim=cfg.hidden_dim, seed=args.seed,
        strides=cfg.strides, sigma=cfg.sigma,
        mvfuse_levels=cfg.mvfuse_levels, mvfuse_iters=cfg.mvfuse_iters,
        mvfuse_alignment=cfg.mvfuse_alignment,
        global_temperature=cfg.global_temperature,
        softargmax_temperature=cfg.softargmax_temperature,
        residual_gain=cfg.residual_gain)
    manifest = {"seed": args.seed, "strides": list(cfg.strides),
                "scene": Path(args.scene).name, "groups": [],
                "config": json.loads(cfg.to_json())}
    for gid, group in enumerate(groups):
        samples = simulate_matcher(scene, group, cfg.matcher_samples,
                                   cfg.matcher_noise_sigma, cfg.matcher_outlier_rate,
                                   seed=args.seed + gid)
        tracks = sample_tracks(samples, cfg.track_tokens, seed=args.seed + gid,
                               normalize=cfg.normalize_track_coords)
        warps = run_group(group, provider, tracks, params,
                          upsample_factor=cfg.upsample_factor)
        for tgt, warp in sorted(warps.items()):
            name = f"warp_g{gid:04d}_{group.source:03d}_{tgt:03d}.mvwf"
            write_warp_file(out / name, warp)
        manifest["groups"].append({"id": gid, "source": group.source,
                                   "targets": list(group.targets)})
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(manifest['groups'])} group(s) of warps to {out}")
    return 0


def _load_warp_bank(warps_dir: Path):
    """Read every MVWF file; returns candidates per ordered pair plus groups."""
    manifest_path = warps_dir / "manifest.json"
    with open(manifest_path) as f:
        manifest = json.load(f)
    candidates: dict[tuple[int, int], list[DenseWarpField]] = {}
    for path in sorted(warps_dir.glob("warp_g*.mvwf")):
        warp = read_warp_file(path)
        candidates.setdefault((warp.source_view, warp.target_view), []).append(warp)
    groups = [(g["id"], ImageGroup(g["source"], tuple(g["targets"])))
              for g in manifest["groups"]]
    return candidates, groups, manifest


def cmd_postprocess(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    warps_dir = Path(args.warps)
    candidates, groups, _ = _load_warp_bank(warps_dir)
    selected = {pair: select_matches(cands)[0] for pair, cands in candidates.items()}
    keeps = {}
    for (a, b), warp in selected.items():
        back = selected.get((b, a))
        if back is None:
            keeps[(a, b)] = np.zeros((warp.height, warp.width), dtype=bool)
        else:
            keeps[(a, b)] = reciprocity_filter(warp, back, cfg.eps_p)
    all_tracks = []
    per_group_tracks = []
    num_views = 1 + max(max((a for a, _ in selected), default=0),
                        max((b for _, b in selected), default=0))
    for gid, group in groups:
        usable = [t for t in group.targets if (group.source, t) in selected]
        if not usable:
            per_group_tracks.append([])
            continue
        tracks = postprocess_group(group.source, usable, selected, keeps,
                                   cfg.tau, cfg.nms_radius,
                                   cfg.max_keypoints or None)
        per_group_tracks.append(tracks)
        views = (group.source,) + tuple(usable)
        all_tracks.extend((t, views) for t in tracks)
    path = out / "sfm_tracks.tsv"
    with open(path, "w") as f:
        f.write(f"# V={num_views}\tT={len(all_tracks)}\n")
        f.write("token_id\tview_id\tx\ty\n")
        for tid, (track, views) in enumerate(all_tracks):
            pts = track.coords.reshape(-1, 2)
            for slot, view in enumerate(views):
                if track.visibility[slot]:
                    f.write(f"{tid}\t{view}\t{_fmt(pts[slot, 0])}\t{_fmt(pts[slot, 1])}\n")
    stats = match_statistics(keeps, per_group_tracks)
    write_statistics(out / "stats.json", stats)
    print(f"wrote {path} ({len(all_tracks)} tracks) and stats.json")
    return 0


def _stratified_matches(warp: DenseWarpField, keep: np.ndarray, tau: float,
                        max_matches: int, seed: int):
    """Confidence-stratified uniform sampling of kept matches (<= max_matches)."""
    valid = keep & (warp.confidence > tau)
    ys, xs = np.nonzero(valid)
    if ys.size == 0:
        return np.empty((0, 2)), np.empty((0, 2))
    conf = warp.confidence[ys, xs]
    rng = np.random.Generator(np.random.PCG64(seed))
    if ys.size > max_matches:
        bins = np.clip((conf * 10).astype(int), 0, 9)
        chosen = []
        per_bin = max_matches // 10
        leftover = []
        for b in range(10):
            idx = np.nonzero(bins == b)[0]
            if idx.size == 0:
                continue
            take = min(per_bin, idx.size)
            pick = rng.choice(idx, size=take, replace=False)
            chosen.append(pick)
            if idx.size > take:
                leftover.append(np.setdiff1d(idx, pick, assume_unique=False))
        chosen = np.concatenate(chosen) if chosen else np.empty(0, dtype=int)
        if chosen.size < max_matches and leftover:
            pool = np.concatenate(leftover)
            extra = rng.choice(pool, size=min(max_matches - chosen.size, pool.size),
                               replace=False)
            chosen = np.concatenate([chosen, extra])
        chosen = np.sort(chosen)
        ys, xs = ys[chosen], xs[chosen]
    src = np.stack([xs, ys], axis=1).astype(np.float64)
    dst = warp.targets[ys, xs]
    return src, dst


def cmd_eval_homography(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    scene = load_scene(args.scene)
    if scene.kind != "planar":
        print("eval-homography requires a planar scene", file=sys.stderr)
        return 2
    thresholds = _parse_thresholds(args.threshold) if args.threshold \
        else cfg.homography_thresholds
    candidates, _, _ = _load_warp_bank(Path(args.warps))
    selected = {pair: select_matches(cands)[0] for pair, cands in candidates.items()}
    errors = {"dlt": [], "ransac": []}
    pairs_used = 0
    for (a, b), warp in sorted(selected.items()):
        back = selected.get((b, a))
        if back is None:
            continue
        keep = reciprocity_filter(warp, back, cfg.eps_p)
        src, dst = _stratified_matches(warp, keep, cfg.tau, cfg.eval_max_matches,
                                       seed=args.seed)
        if src.shape[0] < 4:
            continue
        gt = np.linalg.inv(scene.homographies[b]) @ scene.homographies[a]
        gt = gt / gt[2, 2]
        pairs_used += 1
        h_dlt = dlt_homography(src, dst)
        errors["dlt"].append(corner_error(h_dlt, gt, scene.image_size))
        h_ransac, _ = ransac_homography(src, dst, cfg.ransac_threshold,
                                        cfg.ransac_iters, seed=args.seed)
        errors["ransac"].append(corner_error(h_ransac, gt, scene.image_size))
    path = out / "homography_auc.csv"
    with open(path, "w") as f:
        f.write("solver,threshold_px,auc,pairs\n")
        for solver in ("dlt", "ransac"):
            if errors[solver]:
                curve = ErrorCurve.from_errors(errors[solver], thresholds)
                aucs = curve.auc
            else:
                aucs = {float(t): 0.0 for t in thresholds}
            for t in thresholds:
                f.write(f"{solver},{_fmt(float(t))},{_fmt(aucs[float(t)])},{pairs_used}\n")
    print(f"wrote {path} ({pairs_used} pairs)")
    return 0


def cmd_eval_triangulation(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    scene = load_scene(args.scene)
    if scene.kind != "point_cloud":
        print("eval-triangulation requires a point-cloud scene", file=sys.stderr)
        return 2
    thresholds = _parse_thresholds(args.threshold) if args.threshold \
        else cfg.triangulation_thresholds
    with open(args.tracks) as f:
        header = f.readline()
        if not header.startswith("# V="):
            print("track file missing header", file=sys.stderr)
            return 2
        f.readline()
        rows: dict[int, dict[int, tuple[float, float]]] = {}
        for line in f:
            if not line.strip():
                continue
            tid, view, x, y = line.split("\t")
            rows.setdefault(int(tid), {})[int(view)] = (float(x), float(y))
    observations = [rows[tid] for tid in sorted(rows)]
    points, _, skipped = triangulate_observations(observations, scene.cameras)
    table = accuracy_completeness(points, scene.points, thresholds)
    path = out / "triangulation.csv"
    with open(path, "w") as f:
        f.write("threshold,accuracy,completeness,triangulated,skipped\n")
        for t in thresholds:
            row = table[float(t)]
            f.write(f"{_fmt(float(t))},{_fmt(row['accuracy'])},"
                    f"{_fmt(row['completeness'])},{points.shape[0]},{skipped}\n")
    print(f"wrote {path} ({points.shape[0]} points, {skipped} skipped)")
    return 0


def cmd_init_config(args) -> int:
    out = _out_dir(args)
    path = out / "config.json"
    save_config(path, PipelineConfig())
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvmatch",
        description="Multi-view dense matching and SfM track extraction")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="config JSON file")
        p.add_argument("--seed", type=int, default=0, help="RNG seed")
        p.add_argument("--out", type=str, required=True, help="output directory")

    p = sub.add_parser("gen-scene", help="generate a synthetic scene")
    common(p)
    p.add_argument("--kind", choices=["planar", "point-cloud"], default="planar")
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--points", type=int, default=4000)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("build-tracks", help="simulate matches and sample track tokens")
    common(p)
    p.add_argument("--scene", type=str, required=True)
    p.set_defaults(func=cmd_build_tracks)

    p = sub.add_parser("sample-groups", help="two-stage covisibility group sampling")
    common(p)
    p.add_argument("--scene", type=str, default=None,
                   help="scene file (ground-truth visibility overlap)")
    p.add_argument("--warps", type=str, default=None,
                   help="directory of MVWF files (matcher-output overlap)")
    p.add_argument("--descriptors", type=str, default=None,
                   help="TSV table of per-image global descriptors")
    p.add_argument("--budget", choices=["full", "half"], default="full")
    p.set_defaults(func=cmd_sample_groups)

    p = sub.add_parser("match", help="run the multi-view matcher over groups")
    common(p)
    p.add_argument("--scene", type=str, required=True)
    p.add_argument("--groups", type=str, default=None, help="group manifest JSON")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("postprocess", help="select, filter and sample SfM tracks")
    common(p)
    p.add_argument("--warps", type=str, required=True, help="directory of MVWF files")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("eval-homography", help="DLT/RANSAC corner-error AUC")
    common(p)
    p.add_argument("--scene", type=str, required=True)
    p.add_argument("--warps", type=str, required=True)
    p.add_argument("--threshold", type=str, default=None, help="comma-separated px list")
    p.set_defaults(func=cmd_eval_homography)

    p = sub.add_parser("eval-triangulation", help="triangulation accuracy/completeness")
    common(p)
    p.add_argument("--scene", type=str, required=True)
    p.add_argument("--tracks", type=str, required=True)
    p.add_argument("--threshold", type=str, default=None,
                   help="comma-separated distance list")
    p.set_defaults(func=cmd_eval_triangulation)

    p = sub.add_parser("init-config", help="write the default config file")
    common(p)
    p.set_defaults(func=cmd_init_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
