"""Command-line entry point.

Subcommands: pretrain, probe, compose, selfcheck. Configuration is a flat
`key = value` text file plus `--set key=value` overrides; unknown keys are
rejected and every value is range-checked at parse time. Exit codes:
0 success, 1 runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import AnchorConfig
from .composition import CompositionParams, compose
from .imaging import AugmentParams, augment_view, generate_gallery, write_ppm
from .nn import BackboneConfig
from .probes import (ProbeConfig, classification_probe_accuracy,
                     localization_probe_accuracy, probe_tsv_row)
from .rng import substream
from .selfcheck import run_selfcheck
from .trainer import (MODES, TrainConfig, pretrain, resume, save_checkpoint)


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _float_list(text: str) -> tuple:
    return tuple(float(t) for t in text.split(",") if t.strip())


@dataclass(frozen=True)
class Key:
    name: str
    parse: callable
    default: object
    check: callable
    help: str


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _prob(v):
    return 0.0 <= v <= 1.0


def _always(_v):
    return True


KEYS = [
    Key("mode", str, "insloc-c4", lambda v: v in MODES,
        f"training mode, one of {'/'.join(MODES)}"),
    Key("steps", int, 2000, _nonneg, "optimization steps"),
    Key("batch_size", int, 32, _pos, "samples per step"),
    Key("base_lr", float, 0.03, _pos, "initial learning rate (cosine-decayed)"),
    Key("sgd_momentum", float, 0.9, lambda v: 0 <= v < 1, "SGD momentum"),
    Key("weight_decay", float, 1e-4, _nonneg, "L2 weight decay"),
    Key("temperature", float, 0.2, _pos, "contrastive temperature"),
    Key("queue_capacity", int, 1024, _pos, "negatives per memory queue"),
    Key("queue_prefill", str, "random", lambda v: v in ("random", "empty"),
        "queue start: random unit rows, or empty (grow until full)"),
    Key("ema_momentum", float, 0.999, _prob, "key-encoder EMA coefficient"),
    Key("seed", int, 0, _nonneg, "master seed for all substreams"),
    Key("gallery_k", int, 256, lambda v: v >= 3, "instances in the gallery"),
    Key("gallery_size", int, 64, lambda v: v >= 8, "gallery image side (px)"),
    Key("view_size", int, 32, _pos, "augmented foreground view side (px)"),
    Key("crop_area_min", float, 0.5, _pos, "crop area fraction, lower"),
    Key("crop_area_max", float, 1.0, _pos, "crop area fraction, upper"),
    Key("crop_aspect_min", float, 0.75, _pos, "crop aspect (w/h), lower"),
    Key("crop_aspect_max", float, 4.0 / 3.0, _pos, "crop aspect (w/h), upper"),
    Key("jitter_brightness", float, 0.4, _nonneg, "brightness jitter strength"),
    Key("jitter_contrast", float, 0.4, _nonneg, "contrast jitter strength"),
    Key("jitter_saturation", float, 0.4, _nonneg, "saturation jitter strength"),
    Key("grayscale_prob", float, 0.2, _prob, "grayscale probability"),
    Key("blur_prob", float, 0.5, _prob, "gaussian blur probability"),
    Key("blur_sigma_min", float, 0.1, _pos, "blur sigma, lower"),
    Key("blur_sigma_max", float, 2.0, _pos, "blur sigma, upper"),
    Key("flip_prob", float, 0.5, _prob, "horizontal flip probability"),
    Key("composite_size", int, 0, _nonneg,
        "composite image side (px); 0 means gallery_size"),
    Key("fg_scale_min", float, 16.0, _pos, "foreground shorter side, lower (px)"),
    Key("fg_scale_max", float, 48.0, _pos, "foreground shorter side, upper (px)"),
    Key("fg_aspect_min", float, 0.0, _nonneg,
        "foreground aspect, lower; 0 means per-mode default"),
    Key("fg_aspect_max", float, 0.0, _nonneg,
        "foreground aspect, upper; 0 means per-mode default"),
    Key("anchor_strides", _int_list, (8, 16), lambda v: v and all(s > 0 for s in v),
        "anchor grid strides (comma list, px)"),
    Key("anchor_scales", _float_list, (16.0, 24.0, 32.0, 48.0),
        lambda v: v and all(s > 0 for s in v), "anchor side lengths (comma list)"),
    Key("anchor_ratios", _float_list, (0.5, 1.0, 2.0),
        lambda v: v and all(r > 0 for r in v), "anchor w/h ratios (comma list)"),
    Key("iou_threshold", float, 0.5, lambda v: 0 < v < 1,
        "minimum IoU for box augmentation candidates"),
    Key("box_aug", _bool, True, _always, "augment query boxes with anchors"),
    Key("backbone_variant", str, "auto", lambda v: v in ("auto", "c4", "fpn"),
        "backbone style; auto follows the mode"),
    Key("widths", _int_list, (16, 32, 64, 64), lambda v: v and all(w > 0 for w in v),
        "conv stage widths (comma list)"),
    Key("stage_strides", _int_list, (2, 2, 2, 2),
        lambda v: v and all(s > 0 for s in v), "conv stage strides (comma list)"),
    Key("fpn_channels", int, 64, _pos, "pyramid lateral width"),
    Key("embed_dim", int, 128, _pos, "projection head output width"),
    Key("hidden_dim", int, 0, _nonneg, "projection head hidden width; 0 = input"),
    Key("channel_norm", _bool, False, _always,
        "parameter-free per-channel standardization after each stage"),
    Key("roi_output_size", int, 7, _pos, "RoIAlign bins per axis (P)"),
    Key("roi_sampling", int, 2, _pos, "RoIAlign samples per bin axis (s)"),
    Key("probe_m", int, 9, _pos, "localization probe patch count (square)"),
    Key("probe_steps", int, 500, _pos, "probe gradient-descent steps"),
    Key("probe_lr", float, 0.5, _pos, "probe learning rate"),
    Key("probe_eval_frac", float, 0.2, lambda v: 0 < v < 1,
        "held-out image fraction for the localization probe"),
    Key("probe_views_train", int, 8, _pos, "train views per instance (cls probe)"),
    Key("probe_views_eval", int, 8, _pos, "eval views per instance (cls probe)"),
    Key("probe_seed", int, 0, _nonneg, "probe split/view seed"),
    Key("isolated_patches", _bool, False, _always,
        "probe each patch in isolation instead of RoI-pooling the full image"),
    Key("out_dir", str, "out", _always, "output directory"),
]
KEY_MAP = {k.name: k for k in KEYS}


def parse_kv_line(line: str, where: str) -> tuple[str, str] | None:
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    if "=" not in text:
        raise ConfigError(f"{where}: expected 'key = value', got {line.rstrip()!r}")
    key, value = (part.strip() for part in text.split("=", 1))
    return key, value


def parse_config(path: str | None, overrides: list[str]) -> dict:
    values = {k.name: k.default for k in KEYS}

    def apply(key: str, raw: str, where: str):
        spec = KEY_MAP.get(key)
        if spec is None:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            v = spec.parse(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: key {key!r}: {e}") from None
        if not spec.check(v):
            raise ConfigError(f"{where}: key {key!r}: value {v!r} out of range")
        values[key] = v

    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        for i, line in enumerate(p.read_text().splitlines(), 1):
            kv = parse_kv_line(line, f"{path}:{i}")
            if kv:
                apply(*kv, where=f"{path}:{i}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        apply(key, raw, where=f"--set {key}")
    return values


def build_train_config(v: dict) -> TrainConfig:
    composite = v["composite_size"] or v["gallery_size"]
    if v["fg_aspect_min"] > 0 and v["fg_aspect_max"] > 0:
        aspect = (v["fg_aspect_min"], v["fg_aspect_max"])
    else:
        aspect = (0.5, 2.0) if v["mode"] == "insloc-fpn" else (1.0 / 3.0, 3.0)
    variant = v["backbone_variant"]
    if variant == "auto":
        variant = "fpn" if v["mode"] == "insloc-fpn" else "c4"
    try:
        return TrainConfig(
            mode=v["mode"], steps=v["steps"], batch_size=v["batch_size"],
            base_lr=v["base_lr"], sgd_momentum=v["sgd_momentum"],
            weight_decay=v["weight_decay"], temperature=v["temperature"],
            queue_capacity=v["queue_capacity"], queue_prefill=v["queue_prefill"],
            ema_momentum=v["ema_momentum"], seed=v["seed"],
            gallery_k=v["gallery_k"], gallery_size=v["gallery_size"],
            augment=AugmentParams(
                view_size=v["view_size"],
                crop_area=(v["crop_area_min"], v["crop_area_max"]),
                crop_aspect=(v["crop_aspect_min"], v["crop_aspect_max"]),
                brightness=v["jitter_brightness"], contrast=v["jitter_contrast"],
                saturation=v["jitter_saturation"],
                grayscale_prob=v["grayscale_prob"], blur_prob=v["blur_prob"],
                blur_sigma=(v["blur_sigma_min"], v["blur_sigma_max"]),
                flip_prob=v["flip_prob"],
            ),
            composition=CompositionParams(
                composite_size=composite,
                fg_scale=(v["fg_scale_min"], v["fg_scale_max"]),
                fg_aspect=aspect,
            ),
            anchors=AnchorConfig(strides=v["anchor_strides"],
                                 scales=v["anchor_scales"],
                                 ratios=v["anchor_ratios"]),
            iou_threshold=v["iou_threshold"], box_aug=v["box_aug"],
            backbone=BackboneConfig(
                variant=variant, widths=v["widths"],
                stage_strides=v["stage_strides"], fpn_channels=v["fpn_channels"],
                embed_dim=v["embed_dim"], hidden_dim=v["hidden_dim"],
                channel_norm=v["channel_norm"],
            ),
            roi_output_size=v["roi_output_size"], roi_sampling=v["roi_sampling"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def build_probe_config(v: dict) -> ProbeConfig:
    try:
        return ProbeConfig(
            m_patches=v["probe_m"], steps=v["probe_steps"], lr=v["probe_lr"],
            eval_frac=v["probe_eval_frac"], views_train=v["probe_views_train"],
            views_eval=v["probe_views_eval"], seed=v["probe_seed"],
            isolated_patches=v["isolated_patches"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def worker_thread_cap() -> int:
    """INSLOC_THREADS caps data-preparation workers; the engine as shipped
    prepares batches in-process, which honors any cap >= 1."""
    raw = os.environ.get("INSLOC_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"INSLOC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"INSLOC_THREADS must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    values = parse_config(args.config, args.set)
    config = build_train_config(values)
    out_dir = Path(values["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.tsv"
    ckpt_path = out_dir / "checkpoint.ilck"
    with open(metrics_path, "w") as metrics:
        state = pretrain(config, metrics=metrics)
    save_checkpoint(ckpt_path, state)
    print(f"pretrained {config.mode} for {state.step} steps; "
          f"checkpoint {ckpt_path}, metrics {metrics_path}")
    return 0


def cmd_probe(args) -> int:
    values = parse_config(args.config, args.set)
    if args.M is not None:
        values["probe_m"] = args.M
    if args.isolated_patches:
        values["isolated_patches"] = True
    config = build_train_config(values)
    probe_cfg = build_probe_config(values)
    ckpt = args.checkpoint or str(Path(values["out_dir"]) / "checkpoint.ilck")
    state = resume(config, ckpt)
    encoder = state.pair.query
    loc = localization_probe_accuracy(encoder, state.gallery, probe_cfg,
                                      state.roi_specs)
    cls = classification_probe_accuracy(encoder, state.gallery, probe_cfg,
                                        config.augment, state.roi_specs)
    print(f"# chance: loc {1.0 / probe_cfg.m_patches:.4f}, "
          f"cls {1.0 / config.gallery_k:.4f}")
    print(probe_tsv_row(config.mode, probe_cfg.m_patches, loc, cls, config.seed))
    return 0


def _draw_box_overlay(img, box):
    out = img.copy()
    h, w = out.shape[:2]
    x1, y1 = max(0, int(round(box.x1))), max(0, int(round(box.y1)))
    x2, y2 = min(w - 1, int(round(box.x2)) - 1), min(h - 1, int(round(box.y2)) - 1)
    red = np.array([1.0, 0.0, 0.0], dtype=np.float32)
    out[y1, x1:x2 + 1] = red
    out[y2, x1:x2 + 1] = red
    out[y1:y2 + 1, x1] = red
    out[y1:y2 + 1, x2] = red
    return out


def cmd_compose(args) -> int:
    values = parse_config(args.config, args.set)
    config = build_train_config(values)
    out_dir = Path(args.out or (Path(values["out_dir"]) / "composites"))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".writable"
        probe.touch()
        probe.unlink()
    except OSError as e:
        print(f"output directory not writable: {out_dir} ({e})", file=sys.stderr)
        return 1
    gallery = generate_gallery(config.gallery_k, config.gallery_size, config.seed)
    rng = substream(config.seed, "compose-inspect")
    rows = []
    for i in range(args.count):
        inst = int(rng.integers(config.gallery_k))
        bg_choices = [j for j in range(config.gallery_k) if j != inst]
        bg = bg_choices[int(rng.integers(len(bg_choices)))]
        view = augment_view(gallery.images[inst], config.augment, rng)
        image, box = compose(view, gallery.images[bg], config.composition, rng)
        raw_name, overlay_name = f"composite_{i:04d}.ppm", f"overlay_{i:04d}.ppm"
        write_ppm(image, out_dir / raw_name)
        write_ppm(_draw_box_overlay(image, box), out_dir / overlay_name)
        rows.append(f"{raw_name}\t{box.x1:.2f}\t{box.y1:.2f}\t{box.x2:.2f}"
                    f"\t{box.y2:.2f}\t{inst}\t{bg}")
    (out_dir / "composites.tsv").write_text(
        "".join(r + "\n" for r in rows)
    )
    print(f"wrote {args.count} composite pairs to {out_dir}")
    return 0


def cmd_selfcheck(_args) -> int:
    results = run_selfcheck(out=sys.stdout)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: "
              + ", ".join(r.name for r in failed), file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def _config_help() -> str:
    lines = ["config keys (key = value lines; same names work with --set):"]
    for k in KEYS:
        default = ",".join(str(x) for x in k.default) \
            if isinstance(k.default, tuple) else k.default
        lines.append(f"  {k.name:<20} default {default!r:<24} {k.help}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="insloc",
        description="Region-contrastive pretraining on composited images, "
                    "with linear localization/classification readouts.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("pretrain", help="run the pretraining loop")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="linear localization/classification readout")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint to probe "
                                        "(default <out_dir>/checkpoint.ilck)")
    p.add_argument("--M", type=int, help="override localization patch count")
    p.add_argument("--isolated-patches", action="store_true",
                   help="forward each patch alone instead of pooling the full image")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("compose", help="dump composite inspection images")
    common(p)
    p.add_argument("--count", type=int, default=8, help="number of composites")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_compose)

    p = sub.add_parser("selfcheck", help="run the oracle battery")
    p.set_defaults(fn=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        worker_thread_cap()
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures: exit 1 with detail
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
