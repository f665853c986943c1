"""Command-line entry point: ``python -m mobcpd {register,interpolate,synth,eval}``.

Exit codes: 0 success, 1 invalid input, 2 registration diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema

from . import io as mio
from .core import LabeledCloud
from .interpolation import DEFAULT_CHUNK, MalformedInputError, RegistrationModel, warp_points_file
from .kernel import OrganModel
from .registration import MODES, Config, RegistrationDiverged, configure_mode, register
from .synth import (SyntheticCase, gen_gp_case, gen_labelnoise_case, gen_similarity_case,
                    move_landmarks, tre)

logger = logging.getLogger("mobcpd")

DENSE_LIMIT = 2000
DEFAULT_LARGE_RANK = 50

_number_or_list = {
    "oneOf": [
        {"type": "number", "exclusiveMinimum": 0},
        {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
    ]
}
_matrix = {
    "oneOf": [
        {"enum": ["identity", "ones"]},
        {"type": "array", "items": {"type": "array", "items": {"type": "number"}}, "minItems": 1},
    ]
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "omega": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "kappa": {"type": "number", "exclusiveMinimum": 0},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "max_iters": {"type": "integer", "minimum": 1},
        "rank": {"type": ["integer", "null"], "minimum": 1},
        "lambda": _number_or_list,
        "bandwidth": _number_or_list,
        "coupling": _matrix,
        "label_transition": _matrix,
        "outlier_pad_mm": {"type": "number", "minimum": 0},
        "prealign": {"type": "boolean"},
        "source": {"type": "string"},
        "target": {"type": "string"},
    },
}


class UsageError(ValueError):
    pass


def load_run_config(path) -> dict:
    """Read and schema-check a JSON run configuration."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise UsageError(f"{path}: {where}: {exc.message}") from exc
    return doc


def config_from_run(doc: dict, n_labels: int) -> Config:
    changes = {}
    for key, field_ in (("lambda", "lam"), ("bandwidth", "bandwidth")):
        if key in doc:
            # scalars broadcast over organs
            val = doc[key]
            changes[field_] = [val] * n_labels if isinstance(val, (int, float)) else val
    for key in ("coupling", "label_transition"):
        if key in doc:
            changes[key] = doc[key]
    om = OrganModel.uniform(n_labels).replace(**changes)
    kw = {k: doc[k] for k in ("omega", "kappa", "gamma", "epsilon", "max_iters", "rank",
                              "outlier_pad_mm", "prealign") if k in doc}
    return Config(organ_model=om, **kw)


def default_rank(M: int) -> int | None:
    return None if M < DENSE_LIMIT else DEFAULT_LARGE_RANK


def cmd_register(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    src = args.source or doc.get("source")
    tgt = args.target or doc.get("target")
    if not src or not tgt:
        raise UsageError("source and target clouds are required (flags or config)")
    y = mio.read_cloud(src)
    x = mio.read_cloud(tgt)
    L = int(max(y.labels.max(), x.labels.max()))
    y = LabeledCloud(y.points, y.labels, L)
    x = LabeledCloud(x.points, x.labels, L)
    cfg = configure_mode(args.mode, L, config_from_run(doc, L))
    rank = args.rank if args.rank is not None else doc.get("rank", default_rank(len(y)))
    if rank is not None and rank >= len(y):
        rank = None
    cfg = replace(cfg, rank=rank)

    result = register(y, x, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mio.write_transform(out / "transform.json", result.transform)
    mio.write_cloud(out / "deformed.csv", result.deformed)
    RegistrationModel.from_result(result).save(out / "model.json")
    diag = result.diagnostics()
    diag["mode"] = args.mode
    diag["source"] = str(src)
    diag["target"] = str(tgt)
    mio.write_json(out / "diagnostics.json", diag)
    logger.info("registered in %d iterations, converged=%s", result.iterations, result.converged)
    return 0


def cmd_interpolate(args) -> int:
    if args.chunk < 1:
        raise UsageError("--chunk must be positive")
    model = RegistrationModel.load(args.model)
    n = warp_points_file(model, args.points, args.out, chunk=args.chunk)
    logger.info("wrote %d points", n)
    return 0


def cmd_synth(args) -> int:
    if args.case == "similarity":
        case = gen_similarity_case(args.seed, **({"M": args.size} if args.size else {}))
    elif args.case == "gp":
        case = gen_gp_case(args.seed, **({"M": args.size} if args.size else {}))
    else:
        case = gen_labelnoise_case(args.seed, **({"M": args.size} if args.size else {}))
    case.save(args.out)
    return 0


def cmd_eval(args) -> int:
    if args.case and args.result:
        case = SyntheticCase.load(args.case)
        model = RegistrationModel.load(Path(args.result) / "model.json")
        moved, target = move_landmarks(model, case.source_landmarks), case.target_landmarks
    elif args.moved and args.target:
        moved, target = mio.read_landmarks(args.moved), mio.read_landmarks(args.target)
    else:
        raise UsageError("eval needs --moved and --target, or --case and --result")
    json.dump(tre(moved, target), sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m mobcpd", description="Labeled point cloud registration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="register a labeled source cloud onto a target")
    r.add_argument("--source")
    r.add_argument("--target")
    r.add_argument("--config", help="JSON run configuration")
    r.add_argument("--mode", choices=MODES, default="custom")
    r.add_argument("--rank", type=int, help="low-rank kernel size (default: dense below 2000 points)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_register)

    i = sub.add_parser("interpolate", help="evaluate a fitted deformation at query points")
    i.add_argument("--model", required=True)
    i.add_argument("--points", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--chunk", type=int, default=DEFAULT_CHUNK)
    i.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("synth", help="write a synthetic registration case")
    s.add_argument("--case", choices=("similarity", "gp", "labelnoise"), required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--size", type=int, help="number of source points")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="landmark registration error as JSON")
    e.add_argument("--moved")
    e.add_argument("--target")
    e.add_argument("--case", help="synthetic case directory")
    e.add_argument("--result", help="register output directory")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except RegistrationDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
