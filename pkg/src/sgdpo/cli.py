"""Command-line entry points.

    sgdpo synth     --rule a --n-examples 500
    sgdpo sft       --data pairs.jsonl
    sgdpo train     --method sgdpo --r1 0.9 --r2 0.6
    sgdpo gradflow  --method dpo --beta 0.1
    sgdpo landscape --kind fz --z 0.5
    sgdpo verify

Outputs go under ``--out`` (default: $SGDPO_OUT, else ./sgdpo_out).
``train`` and ``sft`` accept ``--config FILE`` (flat key = value lines using
TrainConfig field names); flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import gradflow as gf
from . import verify as vf
from .data import DatasetError, SynthSpec, load_jsonl, resolve_rule, save_jsonl, sft_corpus, synth_dataset
from .model import InputError, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .subsequence import ConfigError
from .trainer import TrainConfig, TrainingError, po_train, read_config_file, sft_train, write_history_csv

OUT_ENV = "SGDPO_OUT"
MODEL_FIELDS = ("d_model", "n_layers", "n_heads", "d_ff", "max_context")


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "sgdpo_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return float(parts[0]), float(parts[1])


def _int_pair(text: str) -> tuple[int, int]:
    lo, hi = _pair(text)
    return int(lo), int(hi)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./sgdpo_out)")


def _add_data(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", help="JSONL preference file; synthesised when omitted")
    g.add_argument("--rule", default="a", help="synthetic rule: a/repeat_vs_noise or b/suffix")
    g.add_argument("--n-examples", type=int, default=500)
    g.add_argument("--response-len", type=_int_pair, default=None, metavar="LO,HI")
    g.add_argument("--suffix-k", type=int, default=None)
    g.add_argument("--data-seed", type=int, default=None, help="defaults to --seed")


def _add_model(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    for name in MODEL_FIELDS:
        g.add_argument("--" + name.replace("_", "-"), type=int, default=None)


def _add_train_fields(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (TrainConfig fields)")
    g.add_argument("--config", help="flat key = value file of TrainConfig fields")
    for f in dataclasses.fields(TrainConfig):
        # values stay strings here; TrainConfig.from_mapping coerces them
        g.add_argument("--" + f.name.replace("_", "-"), dest="tc_" + f.name, default=None, metavar=f.name.upper())


def _train_config(args) -> TrainConfig:
    values: dict[str, object] = {}
    if args.config:
        values.update(read_config_file(args.config))
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, "tc_" + f.name)
        if v is not None:
            values[f.name] = v
    return TrainConfig.from_mapping(values)


def _dataset(args, cfg: TrainConfig):
    if args.data:
        return load_jsonl(args.data)
    kw = {}
    if args.response_len is not None:
        kw["response_len"] = args.response_len
    if args.suffix_k is not None:
        kw["suffix_k"] = args.suffix_k
    seed = cfg.seed if args.data_seed is None else args.data_seed
    return synth_dataset(SynthSpec(rule=resolve_rule(args.rule), n_examples=args.n_examples, seed=seed, **kw))


def _initial_params(args, seed: int):
    if args.init:
        return load_checkpoint(args.init)
    overrides = {k: getattr(args, k) for k in MODEL_FIELDS if getattr(args, k) is not None}
    return init_params(ModelConfig(**overrides), seed)


def _write_config(cfg: TrainConfig, path: Path) -> None:
    d = {k: (v.value if hasattr(v, "value") else v) for k, v in dataclasses.asdict(cfg).items()}
    path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args)
    kw = {}
    if args.response_len is not None:
        kw["response_len"] = args.response_len
    if args.suffix_k is not None:
        kw["suffix_k"] = args.suffix_k
    spec = SynthSpec(rule=resolve_rule(args.rule), n_examples=args.n_examples, seed=args.seed, **kw)
    path = save_jsonl(synth_dataset(spec), out / "pairs.jsonl")
    print(f"wrote {spec.n_examples} pairs to {path}")
    return 0


def cmd_sft(args) -> int:
    out = _out_dir(args)
    cfg = _train_config(args)
    data = _dataset(args, cfg)
    params = sft_train(_initial_params(args, cfg.seed), sft_corpus(data), cfg)
    path = save_checkpoint(params, out / "sft.npz")
    print(f"SFT on {len(data)} pairs; checkpoint {path}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _train_config(args)
    data = _dataset(args, cfg)
    params = _initial_params(args, cfg.seed)
    if not args.skip_sft:
        params = sft_train(params, sft_corpus(data), cfg)
    policy, history = po_train(params, data, cfg)
    write_history_csv(history, out / "history.csv")
    save_checkpoint(policy, out / "policy.npz")
    _write_config(cfg, out / "train_config.json")
    last = history.records[-1]
    print(
        f"{cfg.method.value}: {len(history)} steps, final loss {last.loss:.4f}, "
        f"chosen {last.chosen_reward:.4f}, rejected {last.rejected_reward:.4f}; outputs in {out}"
    )
    return 0


def cmd_gradflow(args) -> int:
    out = _out_dir(args)
    pilot = None
    if args.method == "pilot":
        if args.y1 is not None or args.y2 is not None:
            pilot = gf.PilotParams(y1=args.y1, y2=args.y2)
        else:
            pilot = gf.PilotParams(p1=args.p1, p2=args.p2)
    grid = gf.FieldGrid(args.x1_range, args.x2_range, args.resolution, args.truncation)
    points = gf.field_grid(args.method, args.beta, grid, pilot)
    stem = f"{args.method}_field"
    csv = gf.write_field_csv(points, out / f"{stem}.csv")
    if not args.no_svg:
        gf.quiver_svg(points, out / f"{stem}.svg", title=f"{args.method} gradient flow, beta={args.beta}")
    print(f"wrote {len(points)} vectors to {csv}")
    return 0


def cmd_landscape(args) -> int:
    out = _out_dir(args)
    if args.kind == "fz":
        land = gf.fz_landscape(args.z, args.a_range, args.b_range, args.resolution, args.beta)
    else:
        land = gf.partial_landscape(args.kind, args.a_range, args.b_range, args.resolution, args.beta)
    stem = f"landscape_{args.kind}"
    csv = gf.write_landscape_csv(land, out / f"{stem}.csv")
    if not args.no_svg:
        gf.heatmap_svg(land, out / f"{stem}.svg", title=f"{args.kind}, beta={args.beta}")
    print(f"wrote {land.values.size} cells to {csv}")
    return 0


def cmd_verify(args) -> int:
    out = _out_dir(args)
    results = vf.run_all(out)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("verification failed: " + "; ".join(failed), file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgdpo", description="DPO / SGDPO desk lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic preference dataset as JSONL")
    _add_common(p)
    p.add_argument("--rule", default="a")
    p.add_argument("--n-examples", type=int, default=500)
    p.add_argument("--response-len", type=_int_pair, default=None, metavar="LO,HI")
    p.add_argument("--suffix-k", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    for name, fn, help_ in (
        ("sft", cmd_sft, "supervised fine-tuning on chosen responses"),
        ("train", cmd_train, "preference optimisation (SFT first unless --skip-sft)"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        _add_data(p)
        _add_model(p)
        _add_train_fields(p)
        if name == "train":
            p.add_argument("--skip-sft", action="store_true", help="use --init (or a fresh model) as the SFT policy")
        p.set_defaults(fn=fn)

    p = sub.add_parser("gradflow", help="gradient vector field over (X1, X2)")
    _add_common(p)
    p.add_argument("--method", choices=("dpo", "pilot"), default="dpo")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--x1-range", type=_pair, default=(0.05, 1.5), metavar="LO,HI")
    p.add_argument("--x2-range", type=_pair, default=(0.05, 1.5), metavar="LO,HI")
    p.add_argument("--resolution", type=int, default=30)
    p.add_argument("--truncation", type=float, default=gf.DEFAULT_TRUNCATION)
    p.add_argument("--y1", type=float)
    p.add_argument("--y2", type=float)
    p.add_argument("--p1", type=float, default=0.8)
    p.add_argument("--p2", type=float, default=0.8)
    p.add_argument("--no-svg", action="store_true")
    p.set_defaults(fn=cmd_gradflow)

    p = sub.add_parser("landscape", help="f(z) or pilot-partial heat map")
    _add_common(p)
    p.add_argument("--kind", choices=("fz", "dX1", "dX2"), default="fz")
    p.add_argument("--z", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--a-range", type=_pair, default=(0.1, 2.0), metavar="LO,HI", help="p1 (fz) or x axis")
    p.add_argument("--b-range", type=_pair, default=(0.1, 2.0), metavar="LO,HI", help="p2 (fz) or y axis")
    p.add_argument("--resolution", type=int, default=40)
    p.add_argument("--no-svg", action="store_true")
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("verify", help="run the oracle suite; exit 1 on any failure")
    _add_common(p)
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, InputError, TrainingError, OSError, ValueError) as exc:
        print(f"sgdpo {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
