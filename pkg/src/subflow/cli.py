"""Command-line front end.

Commands cover the whole pipeline: gen-scene, embed, train-flow,
train-style, stylize, render, eval-align, eval-consistency, dump-config.
Artifacts are binary scene/feature/checkpoint files plus CSVs and PPMs;
exit codes: 0 success, 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import flowalign as fa
from . import losses as ls
from . import metrics as mt
from . import rasterizer as ras
from . import scene as sc
from . import transfer as tr
from .diffcore.checkpoint import load_params, restore_params, save_params
from .encoders import FeatureEncoders, export_features, import_features, procedural_texture
from .errors import FormatError, NumericsError, ShapeError, StateError, SubflowError


class CliError(SubflowError):
    """Invalid invocation or inputs; maps to exit code 2."""


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "rounds", None) is not None:
        overrides["flow.rounds"] = args.rounds
    if getattr(args, "steps", None) is not None:
        overrides["style.steps"] = args.steps
        overrides["flow.train_steps"] = args.steps
        overrides["distill.steps"] = args.steps
    return cfg.with_overrides(**overrides)


def _threads(cfg) -> int:
    env = os.environ.get("SUBFLOW_THREADS")
    if env is not None:
        return max(1, int(env))
    return max(1, cfg["threads"])


def _encoders(cfg) -> FeatureEncoders:
    return FeatureEncoders(seed=cfg["seed"], clip_dim=cfg["clip_dim"],
                           style_dim=cfg["style_dim"])


def _ring(cfg) -> list[sc.Camera]:
    return sc.camera_ring((0.0, 0.0, 0.0), cfg["camera.radius"], cfg["camera.count"],
                          elevation=cfg["camera.elevation"], focal=cfg["camera.focal"],
                          width=cfg["camera.width"], height=cfg["camera.height"])


def _flow_cfg(cfg) -> fa.FlowConfig:
    return fa.FlowConfig(
        euler_steps=cfg["flow.euler_steps"], rounds=cfg["flow.rounds"],
        train_steps=cfg["flow.train_steps"], batch_size=cfg["flow.batch_size"],
        learning_rate=cfg["flow.learning_rate"], seed=cfg["seed"],
        mapping_steps=cfg["flow.mapping_steps"])


def _weights(cfg) -> ls.LossWeights:
    return ls.LossWeights(lambda_style=cfg["weights.style"], lambda_obs=cfg["weights.obs"],
                          lambda_flow=cfg["weights.flow"],
                          suppression_weight=cfg["weights.suppression"])


def _require(path, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{kind} file not found: {p}")
    return p


def _style_corpus(cfg) -> list[np.ndarray]:
    size = cfg["camera.width"]
    return [procedural_texture(cfg["seed"], i, size=size) for i in range(cfg["flow.corpus"])]


def _load_decoder(path, cfg) -> tr.DecoderNet:
    decoder = tr.DecoderNet(cfg["embed_dim"], hidden=(cfg["distill.hidden"],),
                            seed=cfg["seed"])
    restore_params(decoder.parameters(), load_params(_require(path, "decoder checkpoint")))
    decoder.trained = True
    return decoder


def _style_image(args, cfg) -> np.ndarray:
    if getattr(args, "style_image", None):
        return ras.read_ppm(_require(args.style_image, "style image"))
    return procedural_texture(cfg["seed"] + 7, 100, size=cfg["camera.width"])


def _decoder2d(cfg, encoders, out_dir: Path) -> ls.Decoder2D:
    """Train (or reload) the 2D generator decoder for this encoder seed."""
    ck = out_dir / f"decoder2d_seed{cfg['seed']}.prms"
    dec = ls.Decoder2D(channels=encoders.tap_widths[ls.GENERATOR_TAP], seed=cfg["seed"])
    if ck.exists():
        restore_params(dec.parameters(), load_params(ck))
        dec.trained = True
        return dec
    dec = ls.train_decoder2d(encoders, corpus=cfg["gen2d.corpus"], steps=cfg["gen2d.steps"],
                             seed=cfg["seed"], size=cfg["camera.width"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(ck, dec.parameters())
    return dec


# -- commands ------------------------------------------------------------------


def cmd_dump_config(args) -> int:
    cfg = _load_config(args)
    sys.stdout.write(cfg.dump())
    return 0


def cmd_gen_scene(args) -> int:
    cfg = _load_config(args)
    scene = sc.generate_toy_scene(cfg["scene.kind"], cfg["scene.n"], cfg["scene.seed"],
                                  embed_dim=cfg["embed_dim"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    sc.save_scene(scene, args.out)
    print(f"wrote {args.out} ({scene.count} gaussians, D={scene.embed_dim})")
    return 0


def cmd_embed(args) -> int:
    cfg = _load_config(args)
    scene = sc.load_scene(_require(args.scene, "scene"))
    encoders = _encoders(cfg)
    cams = _ring(cfg)
    distilled, decoder, report = tr.distill_embeddings(
        scene, cams[:max(1, len(cams) // 2)], encoders, steps=cfg["distill.steps"],
        seed=cfg["seed"], lr=cfg["distill.learning_rate"],
        decoder_hidden=(cfg["distill.hidden"],))
    out_scene = Path(args.out_scene)
    out_scene.parent.mkdir(parents=True, exist_ok=True)
    sc.save_scene(distilled, out_scene)
    save_params(args.out_decoder, decoder.parameters())
    print(f"distilled {args.scene}: reconstruction mse {report.reconstruction_mse:.3e}, "
          f"projection {report.projection_mse_first:.4f} -> {report.projection_mse_last:.4f}")
    return 0


def cmd_train_flow(args) -> int:
    cfg = _load_config(args)
    encoders = _encoders(cfg)
    if args.feat_clip or args.feat_vgg:
        if not (args.feat_clip and args.feat_vgg):
            raise CliError("--feat-clip and --feat-vgg must be given together")
        clip_fs = import_features(_require(args.feat_clip, "clip features"))
        vgg_fs = import_features(_require(args.feat_vgg, "style features"))
    else:
        corpus = _style_corpus(cfg)
        clip_fs = encoders.encode_clip_like(corpus)
        vgg_fs = encoders.encode_vgg_like(corpus)
    aligned, reports, pipe = fa.run_subdivisive_flow(clip_fs, vgg_fs, _flow_cfg(cfg))
    out = Path(args.out)
    pipe.save(out)
    fa.reports_to_csv(reports, out / "rounds.csv")
    from .encoders import FeatureSet
    export_features(out / "aligned.feat",
                    FeatureSet("vgg_like", aligned.vectors, provenance=aligned.provenance))
    for r in reports:
        print(f"round {r.round_index}: SIM {r.sim_before:.4f}->{r.sim_after:.4f} "
              f"FID {r.fid_before:.4f}->{r.fid_after:.4f}")
    print(f"wrote pipeline to {out}")
    return 0


def cmd_train_style(args) -> int:
    cfg = _load_config(args)
    encoders = _encoders(cfg)
    scene = sc.load_scene(_require(args.scene, "scene"))
    scene.distilled = True  # embed artifacts are distilled by construction
    decoder = _load_decoder(args.decoder, cfg)
    pipe = fa.FlowPipeline.load(_require(args.pipeline, "pipeline"))
    style_img = _style_image(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dec2d = _decoder2d(cfg, encoders, out)
    cams = _ring(cfg)
    decoder, disc, log = ls.train_stylization(
        scene, cams[:max(1, len(cams) // 2)], style_img, pipe, decoder, encoders,
        _weights(cfg), steps=cfg["style.steps"], decoder2d=dec2d, seed=cfg["seed"],
        lr=cfg["style.learning_rate"])
    save_params(out / "decoder.prms", decoder.parameters())
    if disc is not None:
        save_params(out / "discriminator.prms", disc.parameters())
    (out / "train_log.csv").write_text(log.csv(), encoding="ascii")
    last = log.rows[-1] if log.rows else {"total": float("nan")}
    print(f"trained decoder for {cfg['style.steps']} steps; final total {last['total']:.4f}")
    return 0


def cmd_stylize(args) -> int:
    cfg = _load_config(args)
    sources = [s for s in (args.image, args.text, args.feat) if s]
    if len(sources) != 1:
        raise CliError("stylize needs exactly one of --image, --text, --feat")
    encoders = _encoders(cfg)
    scene = sc.load_scene(_require(args.scene, "scene"))
    scene.distilled = True
    decoder = _load_decoder(args.decoder, cfg)
    pipe = fa.FlowPipeline.load(_require(args.pipeline, "pipeline"))
    if args.image:
        img = ras.read_ppm(_require(args.image, "reference image"))
        vec = encoders.encode_clip_like(img).vectors[0]
        aligned = pipe.align(vec)
    elif args.text:
        tokens = args.text.split()
        vec = encoders.encode_text(tokens).vectors[0]
        aligned = pipe.align(vec)
    else:
        fs = import_features(_require(args.feat, "feature file"))
        if fs.domain != "clip_like":
            raise CliError(f"--feat expects clip-domain rows, got '{fs.domain}'")
        aligned = pipe.align(fs.vectors).mean(axis=0)
    stats = tr.stats_from_feature(aligned)
    styled = tr.stylize_scene(scene, stats, decoder)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    sc.save_scene(styled, args.out)
    print(f"wrote stylized scene to {args.out}")
    return 0


def cmd_render(args) -> int:
    cfg = _load_config(args)
    scene = sc.load_scene(_require(args.scene, "scene"))
    cams = _ring(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = _threads(cfg)
    for i, cam in enumerate(cams):
        res = ras.render(scene, cam, threads=threads)
        ras.write_ppm(out / f"view_{i:02d}.ppm", res.rgb)
        if args.depth:
            ras.write_fmap(out / f"depth_{i:02d}.fmap", np.where(
                np.isfinite(res.depth), res.depth, -1.0))
        if args.features:
            ras.write_fmap(out / f"features_{i:02d}.fmap", res.features)
    print(f"rendered {len(cams)} views to {out}")
    return 0


def cmd_eval_align(args) -> int:
    cfg = _load_config(args)
    encoders = _encoders(cfg)
    pipe = fa.FlowPipeline.load(_require(args.pipeline, "pipeline"))
    if args.feat_clip and args.feat_vgg:
        clip_fs = import_features(args.feat_clip)
        vgg_fs = import_features(args.feat_vgg)
    else:
        corpus = _style_corpus(cfg)
        clip_fs = encoders.encode_clip_like(corpus)
        vgg_fs = encoders.encode_vgg_like(corpus)
    from .encoders import FeatureSet
    current = pipe.mapping.apply(clip_fs.vectors)
    rows = [("sim", "mapped", mt.cosine_sim(FeatureSet("clip_mapped", current), vgg_fs)),
            ("fid", "mapped", mt.frechet_distance(FeatureSet("clip_mapped", current), vgg_fs))]
    for k, vf in enumerate(pipe.fields, start=1):
        current = fa.euler_integrate(vf, current, pipe.cfg.euler_steps)[-1].astype(np.float32)
        fs_cur = FeatureSet("clip_mapped", current)
        rows.append(("sim", f"round{k}", mt.cosine_sim(fs_cur, vgg_fs)))
        rows.append(("fid", f"round{k}", mt.frechet_distance(fs_cur, vgg_fs)))
    text = mt.metrics_csv_rows(rows)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text, encoding="ascii")
    sys.stdout.write(text)
    return 0


def cmd_eval_consistency(args) -> int:
    cfg = _load_config(args)
    scene = sc.load_scene(_require(args.scene, "scene"))
    cams = _ring(cfg)
    threads = _threads(cfg)
    reports = mt.eval_consistency(scene, cams,
                                  lambda s, c: ras.render(s, c, threads=threads))
    summary = mt.consistency_summary(reports)
    rows = [("masked_rmse", tag, val) for tag, val in summary.items()]
    rows += [("valid_fraction", r.range, r.valid_pixel_fraction) for r in reports]
    text = mt.metrics_csv_rows(rows)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text, encoding="ascii")
    sys.stdout.write(text)
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subflow",
                                     description="Stylize 3D Gaussian scenes from "
                                                 "image or text references.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--steps", type=int)

    p = sub.add_parser("dump-config", help="print the effective configuration")
    common(p)
    p.set_defaults(fn=cmd_dump_config)

    p = sub.add_parser("gen-scene", help="generate a toy scene (GSCN)")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_scene)

    p = sub.add_parser("embed", help="distill per-Gaussian embeddings and the decoder")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out-scene", required=True)
    p.add_argument("--out-decoder", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("train-flow", help="train the alignment pipeline")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--feat-clip", help="FEAT file of externally computed clip-domain rows")
    p.add_argument("--feat-vgg", help="FEAT file of externally computed style-domain rows")
    p.set_defaults(fn=cmd_train_flow)

    p = sub.add_parser("train-style", help="train the stylization decoder on a style")
    common(p)
    p.add_argument("--scene", required=True, help="distilled GSCN from `embed`")
    p.add_argument("--decoder", required=True, help="decoder PRMS from `embed`")
    p.add_argument("--pipeline", required=True, help="pipeline dir from `train-flow`")
    p.add_argument("--style-image", help="style reference (binary PPM)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_style)

    p = sub.add_parser("stylize", help="stylize a distilled scene")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--pipeline", required=True)
    p.add_argument("--image", help="style reference image (PPM)")
    p.add_argument("--text", help="style reference text")
    p.add_argument("--feat", help="style reference features (FEAT, clip domain)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stylize)

    p = sub.add_parser("render", help="render ring views to PPM")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth", action="store_true", help="also dump FMAP depth maps")
    p.add_argument("--features", action="store_true", help="also dump FMAP embedding maps")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval-align", help="per-round SIM/FID of a trained pipeline")
    common(p)
    p.add_argument("--pipeline", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--feat-clip")
    p.add_argument("--feat-vgg")
    p.set_defaults(fn=cmd_eval_align)

    p = sub.add_parser("eval-consistency", help="short/long-range masked RMSE")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval_consistency)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (CliError, FormatError, ShapeError, StateError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
