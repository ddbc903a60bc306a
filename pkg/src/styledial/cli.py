"""Batch entry points for every pipeline stage.

Exit codes: 0 success, 1 validation error (bad flags, missing inputs, unknown
attributes, fingerprint mismatch), 2 runtime failure. All randomness flows
from --seed; machine outputs go to files, stdout carries the human log.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .dataset import DatasetError, build_dataset, load_dataset
from .diffusion import GuidanceConfig, ScheduleError
from .evaluation import EvaluationError
from .filters import KNOWN_ATTRIBUTES, validate_attributes
from .image import ImageError, load_png, save_png
from .inversion import InversionError, edit_inverted, invert_image, load_inversion, save_inversion
from .model import DenoiserConfig, ModelError, StyleParams, load_bundle
from .sampling import SampleCond, SamplingError, edge_tensor, sample, save_trajectory
from .training import TrainConfig, TrainingError, train_adapter, train_base

VALIDATION_ERRORS = (
    ImageError, DatasetError, ModelError, ScheduleError, EvaluationError, ValueError, FileNotFoundError,
)
RUNTIME_ERRORS = (TrainingError, SamplingError, InversionError)

DEFAULTS = {
    "seed": 0,
    "steps": 50,
    "w1": 7.5,
    "w2": 3.0,
    "act_t": 0.1,
    "w": 7.5,
    "n_content": 96,
    "k_variants": 3,
    "image_size": 32,
    "attributes": "blackpoint,contourWidth",
    "train_steps": 5000,
    "batch_size": 4,
    "lr": 1e-4,
    "beta": 5.0,
    "prompt_dropout": 0.1,
    "checkpoint_every": 0,
    "iterations": 10,
    "inv_lr": 1e-2,
    "prompt_id": 0,
    "cond_index": 0,
    "grid": "0:1:0.1",
    "act_grid": "0,0.2,0.4,0.6,0.8,1.0",
    "seeds": "20",
    "host": "127.0.0.1",
    "port": 8000,
}


class CliError(ValueError):
    pass


def _load_config_file(path: str) -> dict:
    """Flat key = value file; values parsed as JSON scalars when possible."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line without '=': {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = value
    return out


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge precedence: CLI flag > config file > baked-in default."""
    config = _load_config_file(args.config) if getattr(args, "config", None) else {}
    for key, value in vars(args).items():
        if value is None:
            if key in config:
                setattr(args, key, config[key])
            elif key in DEFAULTS:
                setattr(args, key, DEFAULTS[key])
    for key in config:
        if not hasattr(args, key):
            raise CliError(f"config key {key!r} not recognized for this subcommand")
    return args


def _parse_lambda(pairs) -> dict[str, float]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--lambda expects name=value, got {pair!r}")
        name, value = pair.split("=", 1)
        validate_attributes([name])
        out[name] = float(value)
    return out


def _parse_grid(spec: str) -> list[float]:
    spec = str(spec)
    if ":" in spec:
        lo, hi, step = (float(x) for x in spec.split(":"))
        if step <= 0:
            raise CliError(f"grid step must be > 0 in {spec!r}")
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    return [float(x) for x in spec.split(",") if x.strip()]


def _parse_seeds(spec: str) -> list[int]:
    spec = str(spec)
    if "," in spec:
        return [int(x) for x in spec.split(",") if x.strip()]
    return list(range(int(spec)))


def _hash_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_run_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace,
                        inputs: list[Path], outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in vars(args).items() if k not in ("func",) and v is not None}
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _hash_file(p) for p in inputs if Path(p).is_file()},
        "outputs": outputs,
    }
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def _resolve_cond(args):
    """Conditioning from --edge/--prompt-id or from a dataset record."""
    if getattr(args, "edge", None):
        edge = edge_tensor(load_png(args.edge))
        return int(args.prompt_id), edge, [Path(args.edge)]
    if getattr(args, "manifest", None):
        data = load_dataset(args.manifest)
        rec = data.record(int(args.cond_index))
        return rec.prompt_id, data.edge_tensor(int(args.cond_index)), [Path(args.manifest)]
    raise CliError("need either --edge (with --prompt-id) or --manifest/--cond-index")


def _guidance(args) -> GuidanceConfig:
    return GuidanceConfig(w1=float(args.w1), w2=float(args.w2), act_t=float(args.act_t), w=float(args.w))


# -- subcommands -----------------------------------------------------------------


def cmd_dataset(args) -> int:
    args = _resolve(args)
    attributes = [a.strip() for a in str(args.attributes).split(",") if a.strip()]
    manifest = build_dataset(
        args.out, attributes, int(args.n_content), int(args.k_variants),
        seed=int(args.seed), image_size=int(args.image_size),
    )
    _write_run_manifest(Path(args.out), "dataset", args, [], [str(manifest.name), "dataset.json"])
    print(f"dataset written: {manifest}")
    return 0


def cmd_train_base(args) -> int:
    args = _resolve(args)
    config = TrainConfig(
        steps=int(args.train_steps), batch_size=int(args.batch_size), lr=float(args.lr),
        beta=0.0, seed=int(args.seed), checkpoint_every=int(args.checkpoint_every),
        prompt_dropout=float(args.prompt_dropout),
    )
    out = Path(args.out)
    model_cfg = DenoiserConfig(image_size=int(args.image_size))
    bundle, rows = train_base(args.manifest, config, model_cfg=model_cfg, out_dir=out)
    _write_run_manifest(out, "train-base", args, [Path(args.manifest)], ["base.pt", "base_loss.csv"])
    print(f"base bundle: {out / 'base.pt'} (final loss {rows[-1][3]:.5f})")
    return 0


def cmd_train_adapter(args) -> int:
    args = _resolve(args)
    bundle = load_bundle(args.base)
    config = TrainConfig(
        steps=int(args.train_steps), batch_size=int(args.batch_size), lr=float(args.lr),
        beta=float(args.beta), seed=int(args.seed), checkpoint_every=int(args.checkpoint_every),
    )
    out = Path(args.out)
    bundle, rows = train_adapter(args.manifest, bundle, config, out_dir=out)
    _write_run_manifest(out, "train-adapter", args, [Path(args.manifest), Path(args.base)],
                        ["adapter.pt", "adapter_loss.csv"])
    print(f"adapter bundle: {out / 'adapter.pt'} (final loss {rows[-1][3]:.5f})")
    return 0


def cmd_sample(args) -> int:
    args = _resolve(args)
    bundle = load_bundle(args.bundle)
    prompt_id, edge, inputs = _resolve_cond(args)
    strengths = _parse_lambda(args.strength)
    style = StyleParams.from_mapping(bundle.attributes, strengths)
    cond = SampleCond(prompt_id, edge, style)
    result = sample(
        bundle, cond, _guidance(args), steps=int(args.steps), seed=int(args.seed),
        collect_trajectory=bool(args.trajectory),
    )
    out = Path(args.out)
    save_png(result.image, out / "sample.png")
    outputs = ["sample.png"]
    if args.trajectory:
        save_trajectory(out / "trajectory.bin", result, int(args.seed), bundle.schedule().T)
        outputs.append("trajectory.bin")
    _write_run_manifest(out, "sample", args, inputs + [Path(args.bundle)], outputs)
    print(f"sample written: {out / 'sample.png'}")
    return 0


def cmd_edit(args) -> int:
    args = _resolve(args)
    bundle = load_bundle(args.bundle)
    strengths = _parse_lambda(args.strength)
    style = StyleParams.from_mapping(bundle.attributes, strengths)
    out = Path(args.out)
    cfg = _guidance(args)

    if args.inversion:
        record = load_inversion(args.inversion)
        edited = edit_inverted(bundle, record, style, cfg)
        baseline = record.reconstruction
        inputs = [Path(args.inversion), Path(args.bundle)]
    else:
        prompt_id, edge, inputs = _resolve_cond(args)
        inputs = inputs + [Path(args.bundle)]
        baseline = sample(
            bundle, SampleCond(prompt_id, edge, StyleParams.zeros(bundle.attributes)),
            cfg, steps=int(args.steps), seed=int(args.seed),
        ).image
        edited = sample(
            bundle, SampleCond(prompt_id, edge, style), cfg, steps=int(args.steps), seed=int(args.seed)
        ).image

    from .evaluation import perceptual_distance

    save_png(edited, out / "edited.png")
    outputs = ["edited.png"]
    if baseline is not None:
        save_png(baseline, out / "baseline.png")
        outputs.append("baseline.png")
        print(f"distance to base: {perceptual_distance(edited, baseline):.6f}")
    _write_run_manifest(out, "edit", args, inputs, outputs)
    print(f"edit written: {out / 'edited.png'}")
    return 0


def cmd_invert(args) -> int:
    args = _resolve(args)
    bundle = load_bundle(args.bundle)
    image = load_png(args.image)
    if getattr(args, "edge", None):
        edge = edge_tensor(load_png(args.edge))
        inputs = [Path(args.image), Path(args.edge), Path(args.bundle)]
    else:
        from .filters import edge_map

        edge = edge_tensor(edge_map(image))
        inputs = [Path(args.image), Path(args.bundle)]
    record = invert_image(
        bundle, image, int(args.prompt_id), edge, steps=int(args.steps),
        iterations=int(args.iterations), lr=float(args.inv_lr), cfg=_guidance(args),
    )
    out = Path(args.out)
    save_inversion(record, out / "inversion.pt")
    save_png(record.reconstruction, out / "reconstruction.png")
    _write_run_manifest(out, "invert", args, inputs, ["inversion.pt", "reconstruction.png"])
    print(f"inversion written: {out / 'inversion.pt'} (reconstruction PSNR {record.recon_psnr:.2f} dB)")
    return 0


def cmd_sweep(args) -> int:
    args = _resolve(args)
    from .evaluation import report, sweep

    bundle = load_bundle(args.bundle)
    prompt_id, edge, inputs = _resolve_cond(args)
    result = sweep(
        bundle, prompt_id, edge, args.attribute, _parse_grid(args.grid),
        _parse_seeds(args.seeds), cfg=_guidance(args), steps=int(args.steps),
    )
    files = report(args.out, sweeps=[result], bundle=bundle)
    _write_run_manifest(Path(args.out), "sweep", args, inputs + [Path(args.bundle)],
                        sorted(files.keys()))
    print(f"sweep written: {args.out} (smoothness {result.smoothness_score:.5f})")
    return 0


def cmd_heatmap(args) -> int:
    args = _resolve(args)
    from .evaluation import heatmap, report

    bundle = load_bundle(args.bundle)
    prompt_id, edge, inputs = _resolve_cond(args)
    result = heatmap(
        bundle, prompt_id, edge, args.attribute, _parse_grid(args.act_grid),
        _parse_grid(args.grid), _parse_seeds(args.seeds), cfg=_guidance(args), steps=int(args.steps),
    )
    files = report(args.out, heatmaps=[result], bundle=bundle)
    _write_run_manifest(Path(args.out), "heatmap", args, inputs + [Path(args.bundle)],
                        sorted(files.keys()))
    print(f"heatmap written: {args.out}")
    return 0


def cmd_serve(args) -> int:
    args = _resolve(args)
    import uvicorn

    from .service import create_app

    bundles = {}
    for spec in args.bundle or []:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        bundles[name] = path
    if not bundles:
        raise CliError("serve needs at least one --bundle [name=]path")
    app = create_app(bundles)
    print(f"serving on http://{args.host}:{args.port}")
    uvicorn.run(app, host=str(args.host), port=int(args.port), log_level="warning")
    return 0


# -- parser ----------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, *, out_required: bool = True) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=out_required, help="output directory")


def _add_guidance(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--w1", type=float, default=None)
    p.add_argument("--w2", type=float, default=None)
    p.add_argument("--act-t", dest="act_t", type=float, default=None)
    p.add_argument("--w", type=float, default=None)


def _add_cond(p: argparse.ArgumentParser) -> None:
    p.add_argument("--edge", help="edge-map PNG (pairs with --prompt-id)")
    p.add_argument("--prompt-id", dest="prompt_id", type=int, default=None)
    p.add_argument("--manifest", help="dataset manifest to draw conditioning from")
    p.add_argument("--cond-index", dest="cond_index", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="styledial", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("dataset", help="generate a stylized training dataset")
    _add_common(p)
    p.add_argument("--attributes", default=None, help=f"comma list from {KNOWN_ATTRIBUTES}")
    p.add_argument("--n-content", dest="n_content", type=int, default=None)
    p.add_argument("--k-variants", dest="k_variants", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train-base", help="train denoiser + control branch")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-steps", dest="train_steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--prompt-dropout", dest="prompt_dropout", type=float, default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-adapter", help="fine-tune the style adapter")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--base", required=True, help="base bundle checkpoint")
    p.add_argument("--train-steps", dest="train_steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("sample", help="generate an image")
    _add_common(p)
    _add_guidance(p)
    _add_cond(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--lambda", dest="strength", action="append", metavar="NAME=VALUE")
    p.add_argument("--trajectory", action="store_true", help="dump the latent trajectory")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="apply attribute strengths against a baseline")
    _add_common(p)
    _add_guidance(p)
    _add_cond(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--lambda", dest="strength", action="append", metavar="NAME=VALUE")
    p.add_argument("--inversion", help="edit a stored inversion record instead of a seed")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("invert", help="invert a real image and optimize null tokens")
    _add_common(p)
    _add_guidance(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--edge", help="edge-map PNG; derived from the image when omitted")
    p.add_argument("--prompt-id", dest="prompt_id", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--inv-lr", dest="inv_lr", type=float, default=None)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("sweep", help="distance-vs-strength curves")
    _add_common(p)
    _add_guidance(p)
    _add_cond(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--attribute", required=True)
    p.add_argument("--grid", default=None, help="lo:hi:step or comma list")
    p.add_argument("--seeds", default=None, help="count or comma list")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("heatmap", help="act_t x strength distance heatmap")
    _add_common(p)
    _add_guidance(p)
    _add_cond(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--attribute", required=True)
    p.add_argument("--grid", default=None, help="strength grid")
    p.add_argument("--act-grid", dest="act_grid", default=None)
    p.add_argument("--seeds", default=None)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("serve", help="run the HTTP editing service")
    _add_common(p, out_required=False)
    p.add_argument("--bundle", action="append", metavar="[NAME=]PATH")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (CliError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
