"""``skelmotion`` command line.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .attention_io import AttentionDumpError, plot_attention, save_attention
from .checkpoint import CheckpointError
from .denoiser import DenoiserConfig, generate, load_denoiser, save_denoiser, train_denoiser
from .editing import EditSpec, EditSpecError, edit_generate
from .motion_io import MotionFormatError, generate_synthetic_corpus, read_corpus, write_corpus, write_motion_file
from .optim import TrainingDivergedError
from .schedule import GuidanceConfig
from .skeleton import TopologyError, counterpart_map, load_skeleton, skeleton_to_dict
from .text import TextEncodingError
from .vae import VAEConfig, load_vae, save_vae, train_vae

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


VALIDATION_ERRORS = (
    UsageError, EditSpecError, MotionFormatError, CheckpointError, TopologyError,
    TextEncodingError, AttentionDumpError, FileNotFoundError, NotADirectoryError, PermissionError,
)


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not np.isfinite(v) or v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"must be a non-negative finite number, got {text}")
    return v


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _frames(text: str) -> int:
    v = _positive_int(text)
    if v % 4:
        raise argparse.ArgumentTypeError(f"frame count must be a multiple of 4, got {v}")
    return v


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _echo_config(out: Path, command: str, args: argparse.Namespace, **resolved: Any) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"command": command, "version": __version__, "flags": flags, "resolved": resolved}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _write_csv(path: Path, rows: Sequence[dict[str, float]]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: f"{v:.8g}" if isinstance(v, float) else v for k, v in row.items()})


def _skeleton(args):
    return load_skeleton(args.skeleton)


def _corpus(args, topo):
    clips = read_corpus(args.corpus, topo)
    if not clips:
        raise UsageError(f"corpus {args.corpus} is empty")
    return clips


def _check_motion(motion, what: str) -> None:
    if not np.isfinite(motion.data).all():
        raise NumericError(f"{what} contains non-finite values")


# -- commands -----------------------------------------------------------------------

def cmd_corpus(args) -> int:
    topo, plan = _skeleton(args)
    out = _out_dir(args.out)
    clips = generate_synthetic_corpus(args.seed, args.clips, topo, n_frames=args.frames, fps=args.fps)
    write_corpus(out, clips)
    _echo_config(out, "corpus", args, skeleton=skeleton_to_dict(topo, plan))
    print(f"wrote {len(clips)} clips to {out}")
    return EXIT_OK


def cmd_train_vae(args) -> int:
    topo, plan = _skeleton(args)
    clips = _corpus(args, topo)
    out = _out_dir(args.out)
    config = VAEConfig(
        latent_dim=args.latent_dim, hidden_dim=args.hidden_dim, lambda_pos=args.lambda_pos,
        lambda_vel=args.lambda_vel, lambda_kl=args.lambda_kl, window=args.window,
        batch_size=args.batch_size, steps=args.steps, lr=args.lr, warmup=args.warmup, seed=args.seed,
    )
    if config.window % 4:
        raise UsageError("--window must be a multiple of 4")
    _echo_config(out, "train-vae", args, config=config.to_dict())
    ckpt = out / "vae.npz"
    try:
        _, history = train_vae(clips, config, topo, plan, checkpoint_path=ckpt, checkpoint_every=args.checkpoint_every)
    except TrainingDivergedError as exc:
        raise NumericError(str(exc)) from exc
    _write_csv(out / "vae_loss.csv", [{"step": i, **h} for i, h in enumerate(history)])
    print(f"vae: loss {history[0]['total']:.4f} -> {history[-1]['total']:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_train_denoiser(args) -> int:
    if not args.vae:
        raise UsageError("train-denoiser needs --vae CHECKPOINT")
    vae = load_vae(args.vae)
    clips = _corpus(args, vae.topology)
    out = _out_dir(args.out)
    config = DenoiserConfig(
        latent_dim=vae.config.latent_dim, width=args.width, layers=args.layers, heads=args.heads,
        ffn_dim=args.ffn_dim, text_encoder=args.text_encoder, text_dim=args.text_dim,
        p_uncond=args.p_uncond, window=args.window, batch_size=args.batch_size, steps=args.steps,
        lr=args.lr, warmup=args.warmup, seed=args.seed,
    )
    if config.width % config.heads:
        raise UsageError("--width must be divisible by --heads")
    if config.layers % 2:
        raise UsageError("--layers must be even")
    if config.window % vae.frame_factor:
        raise UsageError(f"--window must be a multiple of {vae.frame_factor}")
    ckpt = out / "denoiser.npz"
    try:
        model, history = train_denoiser(clips, vae, config, checkpoint_path=ckpt, checkpoint_every=args.checkpoint_every)
    except TrainingDivergedError as exc:
        raise NumericError(str(exc)) from exc
    _echo_config(out, "train-denoiser", args, config=model.config.to_dict())
    _write_csv(out / "denoiser_loss.csv", history)
    print(f"denoiser: loss {history[0]['loss']:.4f} -> {history[-1]['loss']:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def _load_models(args):
    vae = load_vae(args.vae)
    model = load_denoiser(args.denoiser)
    if model.config.latent_dim != vae.config.latent_dim:
        raise CheckpointError(
            f"denoiser latent width {model.config.latent_dim} does not match VAE latent width {vae.config.latent_dim}"
        )
    return vae, model


def cmd_generate(args) -> int:
    vae, model = _load_models(args)
    out = _out_dir(args.out)
    guidance = GuidanceConfig(w=args.cfg_weight, p_uncond=model.config.p_uncond)
    _echo_config(out, "generate", args, cfg_weight=guidance.w, n_steps=args.steps)
    motion, record = generate(model, vae, args.text, args.frames, args.seed, guidance, args.steps)
    _check_motion(motion, "generated motion")
    write_motion_file(out / "motion.salm", motion)
    if args.dump_attn:
        save_attention(out / "attention.npz", {"gen": record}, {"text": args.text, "seed": args.seed})
    if args.plot:
        atomic = vae.plan.stages[-1].topology.joint_names
        plot_attention(record, out / "attention.png", atomic, title=args.text)
    if args.render:
        from .render import render_filmstrip

        render_filmstrip(motion, out / "motion.png", title=args.text)
    print(f"wrote {out / 'motion.salm'} ({motion.n_frames} frames, w={guidance.w})")
    return EXIT_OK


def load_edit_spec(path: str | Path, T: int = 1000) -> EditSpec:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise EditSpecError("<file>", f"cannot parse {path}: {exc}") from exc
    return EditSpec.from_dict(doc, T)


def cmd_edit(args) -> int:
    vae, model = _load_models(args)
    spec = load_edit_spec(args.edit, model.config.T)
    out = _out_dir(args.out)
    guidance = GuidanceConfig(w=args.cfg_weight, p_uncond=model.config.p_uncond)
    src_motion, edited, trace = edit_generate(
        model, vae, args.source_text, args.target_text, spec, args.seed, guidance, args.frames, args.steps
    )
    _check_motion(src_motion, "source motion")
    _check_motion(edited, "edited motion")
    _echo_config(out, "edit", args, spec=trace.spec.to_dict(), cfg_weight=guidance.w)
    write_motion_file(out / "source.salm", src_motion)
    write_motion_file(out / "edited.salm", edited)
    extra = {"spec": trace.spec.to_dict(), "divergence": trace.divergence}
    save_attention(out / "trace.npz", {"source": trace.source, "modulated": trace.modulated}, extra)
    if args.plot:
        atomic = vae.plan.stages[-1].topology.joint_names
        plot_attention(trace.source, out / "source_attention.png", atomic, title=args.source_text)
        plot_attention(trace.modulated, out / "edited_attention.png", atomic, title="edited")
    print(f"wrote {out / 'source.salm'}, {out / 'edited.salm'} and {out / 'trace.npz'}")
    return EXIT_OK


def cmd_counterparts(args) -> int:
    topo, plan = _skeleton(args)
    atomic = plan.topologies(topo)[-1]
    for j, c in enumerate(counterpart_map(atomic)):
        print(f"{j}\t{atomic.joint_names[j]}\t->\t{atomic.joint_names[c]}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def _annotate_defaults(parser: argparse.ArgumentParser) -> None:
    """Append the default to the help of every optional, non-required flag."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _annotate_defaults(sub)
            continue
        if not action.option_strings or action.required or action.default is argparse.SUPPRESS:
            continue
        if isinstance(action, (argparse._HelpAction, argparse._VersionAction)):
            continue
        action.help = f"{action.help} (default: %(default)s)" if action.help else "default: %(default)s"


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.HelpFormatter
    p = argparse.ArgumentParser(prog="skelmotion", description="Skeleton-aware latent motion diffusion.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, skeleton=True):
        if skeleton:
            sp.add_argument("--skeleton", default=None, help="skeleton YAML (default: bundled 22-joint skeleton)")
        sp.add_argument("--seed", type=_nonneg_int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("corpus", help="write a procedural captioned motion corpus", formatter_class=fmt)
    common(sp)
    sp.add_argument("--clips", type=_positive_int, default=16)
    sp.add_argument("--frames", type=_frames, default=None, help="fixed clip length (default: varied)")
    sp.add_argument("--fps", type=_positive_float, default=20.0)
    sp.set_defaults(func=cmd_corpus)

    sp = sub.add_parser("train-vae", help="train the skeleton-aware VAE", formatter_class=fmt)
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--steps", type=_positive_int, default=2000)
    sp.add_argument("--lr", type=_positive_float, default=2e-4)
    sp.add_argument("--warmup", type=_nonneg_int, default=2000)
    sp.add_argument("--batch-size", type=_positive_int, default=8)
    sp.add_argument("--window", type=_positive_int, default=64)
    sp.add_argument("--latent-dim", type=_positive_int, default=32)
    sp.add_argument("--hidden-dim", type=_positive_int, default=32)
    sp.add_argument("--lambda-pos", type=_nonneg_float, default=0.5)
    sp.add_argument("--lambda-vel", type=_nonneg_float, default=0.5)
    sp.add_argument("--lambda-kl", type=_nonneg_float, default=0.02)
    sp.add_argument("--checkpoint-every", type=_nonneg_int, default=0)
    sp.set_defaults(func=cmd_train_vae)

    sp = sub.add_parser("train-denoiser", help="train the latent denoiser", formatter_class=fmt)
    common(sp, skeleton=False)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vae", default=None, help="VAE checkpoint (required)")
    sp.add_argument("--steps", type=_positive_int, default=1000)
    sp.add_argument("--lr", type=_positive_float, default=2e-4)
    sp.add_argument("--warmup", type=_nonneg_int, default=2000)
    sp.add_argument("--batch-size", type=_positive_int, default=8)
    sp.add_argument("--window", type=_positive_int, default=64)
    sp.add_argument("--width", type=_positive_int, default=256)
    sp.add_argument("--layers", type=_positive_int, default=6)
    sp.add_argument("--heads", type=_positive_int, default=4)
    sp.add_argument("--ffn-dim", type=_positive_int, default=512)
    sp.add_argument("--text-encoder", default="stub", help="'stub' or 'file:<embeddings.json>'")
    sp.add_argument("--text-dim", type=_positive_int, default=128)
    sp.add_argument("--p-uncond", type=_probability, default=0.1)
    sp.add_argument("--checkpoint-every", type=_nonneg_int, default=0)
    sp.set_defaults(func=cmd_train_denoiser)

    def sampling(sp):
        sp.add_argument("--vae", required=True)
        sp.add_argument("--denoiser", required=True)
        sp.add_argument("--frames", type=_frames, default=64)
        sp.add_argument("--cfg-weight", type=_nonneg_float, default=7.5)
        sp.add_argument("--steps", type=_positive_int, default=50, help="DDIM steps")
        sp.add_argument("--plot", action="store_true", help="write joint-by-frame attention heatmaps")

    sp = sub.add_parser("generate", help="sample a motion from text", formatter_class=fmt)
    common(sp, skeleton=False)
    sampling(sp)
    sp.add_argument("--text", required=True)
    sp.add_argument("--dump-attn", action="store_true", help="write attention.npz")
    sp.add_argument("--render", action="store_true", help="write a stick-figure filmstrip")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("edit", help="zero-shot edit by attention modulation", formatter_class=fmt)
    common(sp, skeleton=False)
    sampling(sp)
    sp.add_argument("--source-text", required=True)
    sp.add_argument("--target-text", default=None, help="defaults to the source text")
    sp.add_argument("--edit", required=True, help="YAML edit spec")
    sp.set_defaults(func=cmd_edit)

    sp = sub.add_parser("counterparts", help="print the left/right map of the atomic joints", formatter_class=fmt)
    sp.add_argument("--skeleton", default=None)
    sp.set_defaults(func=cmd_counterparts)
    _annotate_defaults(p)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingDivergedError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
