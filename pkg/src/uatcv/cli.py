"""Command-line entry points.

    uatcv lower    SPEC [--out PATH]
    uatcv verify   SPEC [--trials N] [--tol X]
    uatcv expand   SPEC [--format text|latex]
    uatcv classify SPEC
    uatcv analyze  SPEC [--lora-layer N --lora-rank R [--lora-target M]]
                        [--prune-layer N (--prune-channels 0,2 | --prune-threshold X)]
    uatcv report   SPEC [--out PATH] [--format text|latex] [--trials N] [--tol X]

Common flags: ``--seed`` overrides the description's seed, ``--cap`` the
element cap (the UATCV_CAP environment variable is the fallback).

Exit codes: 0 success; 2 parse/validation error; 3 verification failure;
4 internal invariant breach.  Errors print one line to stderr:
``error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .analysis import LoraDelta, PruneMask
from .errors import ParseError, UatcvError, ValidationError, VerificationError
from .netspec import materialize, parse_spec, to_expandable, verify_network
from .report import build_report, report_json, report_latex
from .symbolic import classify_params, emit
from .tensor import SplitMix64, set_element_cap

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VERIFY = 3
EXIT_INTERNAL = 4

# analysis factor streams fork off the description seed at documented offsets
LORA_SEED_OFFSET = 0x4C6F5241


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("spec", help="network description file (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the description seed")
    p.add_argument("--cap", type=int, default=None, help="element cap override")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uatcv", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lower", help="per-layer lowering statistics")
    _add_common(p)
    p.add_argument("--out", type=Path, default=None, help="write JSON here instead of stdout")

    p = sub.add_parser("verify", help="compare lowerings against direct evaluation")
    _add_common(p)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-9)

    p = sub.add_parser("expand", help="emit the canonical expanded form")
    _add_common(p)
    p.add_argument("--format", choices=("text", "latex"), default="text")

    p = sub.add_parser("classify", help="fixed vs input-dependent parameter table")
    _add_common(p)

    p = sub.add_parser("analyze", help="term counts, receptive fields, LoRA, pruning")
    _add_common(p)
    p.add_argument("--trials", type=int, default=8, help="impact-sample inputs")
    p.add_argument("--lora-layer", type=int, default=None)
    p.add_argument("--lora-rank", type=int, default=1)
    p.add_argument("--lora-target", default="w_2")
    p.add_argument("--prune-layer", type=int, default=None)
    p.add_argument("--prune-channels", default=None, help="comma-separated indices")
    p.add_argument("--prune-threshold", type=float, default=None)

    p = sub.add_parser("report", help="full deterministic report")
    _add_common(p)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--format", choices=("text", "latex"), default="text",
                   help="latex additionally writes a .tex sidecar next to --out")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-9)
    return ap


def _load(args) -> "tuple":
    set_element_cap(args.cap)
    spec = parse_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    return spec, materialize(spec)


def _random_lora(net, layer: int, rank: int, target: str) -> LoraDelta:
    from .analysis import _target_matrix

    if not 0 <= layer < len(net.layers):
        raise ValidationError(f"no layer {layer} in a {len(net.layers)}-layer network")
    matrix = _target_matrix(net.layers[layer], target)
    m, n = matrix.shape
    gen = SplitMix64(net.spec.seed + LORA_SEED_OFFSET)
    b = gen.uniform(m * rank, -1.0, 1.0).reshape(m, rank)
    a = gen.uniform(rank * n, -1.0, 1.0).reshape(rank, n)
    return LoraDelta(layer=layer, a=a, b=b, target=target)


def _cmd_lower(args) -> int:
    _, net = _load(args)
    from .report import layer_section

    doc = {"layers": layer_section(net, net.activation)}
    text = report_json(doc)
    if args.out:
        args.out.write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_verify(args) -> int:
    _, net = _load(args)
    result = verify_network(net, trials=args.trials, tol=args.tol)
    for i, diff in enumerate(result["per_layer_max_abs_diff"]):
        status = "ok" if diff <= args.tol else "FAIL"
        print(f"layer {i} ({net.layers[i].spec.kind}): max abs diff {diff:.3e} [{status}]")
    print(
        f"{result['trials']} trials, tol {result['tolerance']:g}: "
        + ("PASS" if result["passed"] else "FAIL")
    )
    if not result["passed"]:
        raise VerificationError(
            f"max abs diff {result['max_abs_diff']:.3e} exceeds tol {args.tol:g}"
        )
    return EXIT_OK


def _cmd_expand(args) -> int:
    _, net = _load(args)
    exp = to_expandable(net)
    if exp.preprocessing:
        print(f"% {exp.preprocessing}" if args.format == "latex" else f"# {exp.preprocessing}")
    print(emit(exp.chain.canonical, args.format))
    return EXIT_OK


def _cmd_classify(args) -> int:
    _, net = _load(args)
    exp = to_expandable(net)
    rows = classify_params(exp.chain.canonical)
    width = max(len(r.display) for r in rows)
    print(f"{'atom':<{width}}  {'kind':<6}  {'dependence':<16}  provenance")
    for r in rows:
        print(f"{r.display:<{width}}  {r.kind:<6}  {r.dependence.value:<16}  {r.provenance}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    _, net = _load(args)
    from .report import analysis_section

    lora = None
    if args.lora_layer is not None:
        lora = _random_lora(net, args.lora_layer, args.lora_rank, args.lora_target)
    mask = None
    if args.prune_layer is not None:
        channels = None
        if args.prune_channels is not None:
            channels = tuple(int(c) for c in args.prune_channels.split(",") if c.strip())
        mask = PruneMask(
            layer=args.prune_layer, channels=channels, threshold=args.prune_threshold
        )
    doc = analysis_section(net, lora=lora, prune_mask=mask, impact_inputs=args.trials)
    sys.stdout.write(report_json(doc))
    return EXIT_OK


def _cmd_report(args) -> int:
    _, net = _load(args)
    doc = build_report(net, trials=args.trials, tol=args.tol)
    text = report_json(doc)
    if args.out:
        args.out.write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
        if args.format == "latex":
            sidecar = args.out.with_suffix(".tex")
            sidecar.write_text(report_latex(doc), encoding="utf-8")
            print(f"wrote {sidecar}")
    else:
        sys.stdout.write(text)
        if args.format == "latex":
            sys.stdout.write(report_latex(doc))
    return EXIT_OK


_COMMANDS = {
    "lower": _cmd_lower,
    "verify": _cmd_verify,
    "expand": _cmd_expand,
    "classify": _cmd_classify,
    "analyze": _cmd_analyze,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ParseError, ValidationError) as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except VerificationError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except UatcvError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
