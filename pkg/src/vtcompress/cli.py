"""Command-line entry point.

Subcommands: gen (synthetic fixtures), compress (run the samplers and emit a
report), train (fit the scale selector), gradcheck (analytic vs numeric
gradients), evolution (per-layer importance heatmaps), report (re-profile an
existing report under a different insertion layer).

Every failure exits nonzero with one JSON line on stderr of the form
{"error": <class>, "message": <text>}; exit codes are 2 usage, 3 missing
file, 4 tensor-file format, 5 invalid input or inconsistent dimensions,
6 training divergence, 7 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .formats import (
    MAGIC_ATTENTION,
    MAGIC_FEATURE_MAP,
    MAGIC_SELECTOR,
    SyntheticConfig,
    TensorFileError,
    export_heatmap,
    gen_synthetic,
    read_tensor,
    write_tensor,
)
from .heuristic import heuristic_importance, heuristic_topk
from .report import build_report, effective_token_count, report_to_json
from .textsampler import attention_scores, cumulative_topk, importance, per_layer_importance
from .training import (
    SCALE_INDIFFERENT_LEARNING_RATE,
    MeanTokenTarget,
    TrainConfig,
    TrainingDiverged,
    gradient_check,
    make_scale_indifferent_task,
    prepare_batch,
    random_gradcheck_instance,
    train_selector,
)
from .vision import (
    RegionSelection,
    compress_inference,
    default_menu,
    flatten_grid,
    init_selector_params,
    params_from_array,
    params_to_array,
    selection_heatmap,
    seven_branch_menu,
)

EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_FORMAT = 4
EXIT_INVALID = 5
EXIT_DIVERGED = 6
EXIT_GRADCHECK = 7


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _emit(payload: dict, out: str | None) -> None:
    text = report_to_json(payload)
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _read_checked(path: str, expected_magic: str) -> np.ndarray:
    tensor, magic = read_tensor(path)
    if magic != expected_magic:
        raise TensorFileError(f"{path}: expected magic {expected_magic!r}, found {magic!r}")
    return tensor


def _build_menu(name: str, window: int):
    if name == "3branch":
        return default_menu(window)
    if name == "7branch":
        return seven_branch_menu(window)
    raise ValueError(f"unknown menu {name!r} (use '3branch' or '7branch')")


def _project_keys(tokens: np.ndarray, heads: int, head_dim: int, seed: int) -> np.ndarray:
    """Seeded per-head projection of emitted tokens to (h, N, d) keys.

    Stands in for the key projection the tokens would receive inside a model;
    used by the combined strategy, where the vision stage emits pooled tokens
    that have no precomputed keys.
    """
    channels = tokens.shape[1]
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((heads, channels, head_dim)) / math.sqrt(channels)
    return np.stack([tokens @ proj[h] for h in range(heads)])


def _region_importance_grid(
    selections: list[RegionSelection], scores: np.ndarray, menu, region_grid
) -> np.ndarray:
    """Mean emitted-token importance per region, upsampled to the map grid."""
    rows, cols = region_grid
    w = menu.window
    grid = np.zeros((rows * w, cols * w))
    offset = 0
    for sel in selections:
        count = sel.token_count
        value = float(scores[offset : offset + count].mean()) if count else 0.0
        offset += count
        bi, bj = divmod(sel.region, cols)
        grid[bi * w : (bi + 1) * w, bj * w : (bj + 1) * w] = value
    return grid


def cmd_gen(args) -> int:
    cfg = SyntheticConfig(
        height=args.height,
        width=args.width,
        channels=args.channels,
        global_height=args.global_height,
        global_width=args.global_width,
        heads=args.heads,
        text_tokens=args.text_tokens,
        head_dim=args.head_dim,
        seed=args.seed,
        structure=args.structure,
    )
    meta = gen_synthetic(cfg, args.out)
    _emit(meta, "-")
    return 0


def cmd_compress(args) -> int:
    feature_map = _read_checked(args.map, MAGIC_FEATURE_MAP)
    height, width, _ = feature_map.shape
    input_tokens = height * width

    selections = None
    menu = None
    vision_tokens = None
    if args.strategy in ("vision", "both"):
        if args.global_map is None:
            raise ValueError(f"strategy {args.strategy!r} needs --global")
        global_tokens = flatten_grid(_read_checked(args.global_map, MAGIC_FEATURE_MAP))
        menu = _build_menu(args.menu, args.window)
        if args.params is not None:
            params = params_from_array(_read_checked(args.params, MAGIC_SELECTOR))
        else:
            params = init_selector_params(len(menu), global_tokens.shape[0], seed=args.seed)
        vision_tokens, selections = compress_inference(
            feature_map, global_tokens, params, menu, pool=args.pool
        )

    text_selection = None
    text_scores = None
    if args.strategy == "text":
        if args.q is None or args.k is None:
            raise ValueError("strategy 'text' needs --q and --k")
        q = _read_checked(args.q, MAGIC_ATTENTION)
        k = _read_checked(args.k, MAGIC_ATTENTION)
        if k.ndim != 3 or q.ndim != 3:
            raise ValueError("--q and --k must be 3-d (heads, tokens, head dim) tensors")
        if k.shape[1] != input_tokens:
            raise ValueError(
                f"key file covers {k.shape[1]} visual tokens but the map has {input_tokens}"
            )
        text_scores = importance(attention_scores(q, k))
        text_selection = cumulative_topk(text_scores, args.gamma)
    elif args.strategy == "both":
        if args.q is None:
            raise ValueError("strategy 'both' needs --q")
        q = _read_checked(args.q, MAGIC_ATTENTION)
        if q.ndim != 3:
            raise ValueError("--q must be a 3-d (heads, tokens, head dim) tensor")
        if vision_tokens.shape[0] == 0:
            raise ValueError("vision stage emitted no tokens; nothing for the text stage")
        keys = _project_keys(vision_tokens, q.shape[0], q.shape[2], args.seed)
        text_scores = importance(attention_scores(q, keys))
        text_selection = cumulative_topk(text_scores, args.gamma)

    heuristic_kept = None
    heuristic_scores = None
    if args.strategy == "heuristic":
        if args.global_map is None:
            raise ValueError("strategy 'heuristic' needs --global")
        global_tokens = flatten_grid(_read_checked(args.global_map, MAGIC_FEATURE_MAP))
        heuristic_scores = heuristic_importance(feature_map, global_tokens)
        heuristic_kept = int(heuristic_topk(heuristic_scores, args.keep_fraction).size)

    report = build_report(
        strategy=args.strategy,
        input_tokens=input_tokens,
        menu=menu,
        selections=selections,
        text_selection=text_selection,
        text_layer=args.layer if text_selection is not None else None,
        total_layers=args.total_layers,
        heuristic_kept=heuristic_kept,
        heuristic_keep_fraction=args.keep_fraction if args.strategy == "heuristic" else None,
    )
    _emit(report, args.out)

    if args.heatmap_prefix:
        prefix = args.heatmap_prefix
        if selections is not None:
            region_grid = (height // menu.window, width // menu.window)
            export_heatmap(
                selection_heatmap(selections, menu, region_grid), "pgm", f"{prefix}vision.pgm"
            )
            if text_scores is not None:
                export_heatmap(
                    _region_importance_grid(selections, text_scores, menu, region_grid),
                    "pgm",
                    f"{prefix}text.pgm",
                )
        elif text_scores is not None:
            export_heatmap(text_scores.reshape(height, width), "pgm", f"{prefix}text.pgm")
        if heuristic_scores is not None:
            export_heatmap(
                heuristic_scores.reshape(height, width), "pgm", f"{prefix}heuristic.pgm"
            )
    return 0


def cmd_train(args) -> int:
    menu = _build_menu(args.menu, args.window)
    if args.task == "scale-indifferent":
        dataset, downstream = make_scale_indifferent_task(args.seed, window=args.window)
    else:
        if not args.map or args.global_map is None:
            raise ValueError("train needs --task scale-indifferent or --map/--global files")
        global_tokens = flatten_grid(_read_checked(args.global_map, MAGIC_FEATURE_MAP))
        dataset = [
            (_read_checked(path, MAGIC_FEATURE_MAP), global_tokens) for path in args.map
        ]
        downstream = None
        if args.target is not None:
            downstream = MeanTokenTarget(np.array([float(v) for v in args.target.split(",")]))

    weights = None
    if args.imbalance is not None:
        weights = tuple(float(v) for v in args.imbalance.split(","))

    init_params = None
    if args.resume is not None:
        init_params = params_from_array(_read_checked(args.resume, MAGIC_SELECTOR))

    config = TrainConfig(
        steps=args.steps,
        learning_rate=args.lr,
        alpha=args.alpha,
        seed=args.seed,
        imbalance_weights=weights,
        pool=args.pool,
    )
    run = train_selector(
        dataset, config, menu=menu, downstream=downstream, init_params=init_params
    )

    if args.out_params:
        write_tensor(args.out_params, params_to_array(run.params), MAGIC_SELECTOR)

    summary = {
        "steps": config.steps,
        "learningRate": config.learning_rate,
        "alpha": config.alpha,
        "seed": config.seed,
        "finalLoss": float(run.losses[-1]),
        "finalF": [float(v) for v in run.final_f],
        "finalP": [float(v) for v in run.final_p],
        "collapsed": run.collapsed,
    }
    if args.log:
        log = dict(summary)
        log["history"] = [
            {
                "step": i,
                "loss": float(run.losses[i]),
                "f": [float(v) for v in run.f_history[i]],
                "p": [float(v) for v in run.p_history[i]],
            }
            for i in range(config.steps)
        ]
        Path(args.log).write_text(json.dumps(log, indent=2) + "\n")
    summary["paramsFile"] = args.out_params
    _emit(summary, "-")
    return 0


def cmd_gradcheck(args) -> int:
    menu = _build_menu(args.menu, args.window)
    checked = []
    skipped = 0
    seed = args.seed
    attempts = 0
    max_attempts = max(50, args.instances * 50)
    while len(checked) < args.instances:
        if attempts >= max_attempts:
            raise ValueError(
                f"could not find {args.instances} tie-free instances in {max_attempts} attempts"
            )
        attempts += 1
        dataset, params, downstream = random_gradcheck_instance(seed)
        seed += 1
        margin = prepare_batch(dataset, menu).argmax_margin(params)
        if margin <= args.margin:
            skipped += 1
            print(
                f"notice: skipped tie-adjacent instance seed={seed - 1} "
                f"(margin {margin:.2e} <= {args.margin:.2e})"
            )
            continue
        chk = gradient_check(dataset, params, menu, downstream=downstream, alpha=args.alpha)
        rel = chk.rel_error
        if args.corrupt:
            corrupted = chk.analytic.copy()
            corrupted[0] += max(1.0, float(np.abs(corrupted).max())) * 1e-2
            denom = max(
                float(np.linalg.norm(corrupted)), float(np.linalg.norm(chk.numeric)), 1e-12
            )
            rel = float(np.linalg.norm(corrupted - chk.numeric)) / denom
        checked.append(rel)

    worst = max(checked)
    passed = worst <= args.tolerance
    _emit(
        {
            "instances": len(checked),
            "skipped": skipped,
            "tolerance": args.tolerance,
            "worstRelError": worst,
            "passed": passed,
        },
        "-",
    )
    return 0 if passed else EXIT_GRADCHECK


def cmd_evolution(args) -> int:
    stack = _read_checked(args.attn, MAGIC_ATTENTION)
    if stack.ndim != 4:
        raise ValueError(
            f"evolution needs a layer-major 4-d attention stack, got {stack.ndim} dims"
        )
    layers, _, _, n = stack.shape
    if args.grid:
        rows, cols = (int(v) for v in args.grid.lower().split("x"))
    else:
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"{n} tokens is not square; pass --grid HxW")
        rows = cols = side
    if rows * cols != n:
        raise ValueError(f"grid {rows}x{cols} does not hold {n} tokens")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = per_layer_importance(stack)
    files = []
    for layer in range(layers):
        path = out_dir / f"layer_{layer:02d}.{args.format}"
        export_heatmap(maps[layer].reshape(rows, cols), args.format, path)
        files.append(str(path))
    _emit({"layers": layers, "grid": f"{rows}x{cols}", "files": files}, "-")
    return 0


def cmd_report(args) -> int:
    report = json.loads(Path(args.infile).read_text())
    if report.get("reportVersion") != 1:
        raise ValueError(f"unsupported reportVersion {report.get('reportVersion')!r}")
    total_layers = args.total_layers if args.total_layers is not None else report["totalLayers"]
    text = report.get("textSelection")
    if text is not None:
        layer = args.layer if args.layer is not None else text["layer"]
        entering = report["afterVision"]
        removed = entering - text["k"]
        report["effectiveTokens"] = effective_token_count(entering, removed, layer, total_layers)
        text["layer"] = layer
    elif args.layer is not None:
        raise ValueError("report has no text selection; --layer does not apply")
    report["totalLayers"] = total_layers
    if report["inputTokens"]:
        report["effectivePercent"] = 100.0 * report["effectiveTokens"] / report["inputTokens"]
    _emit(report, args.out)
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="vtcompress",
        description="Coarse-to-fine visual token compression on encoded feature maps.",
    )
    parser.add_argument("--config", help="JSON file of default flag values (flags override)")
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("gen", help="generate synthetic fixture files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--height", type=int, default=24)
    p.add_argument("--width", type=int, default=24)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--global-height", type=int, default=6)
    p.add_argument("--global-width", type=int, default=6)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--text-tokens", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--structure", choices=["uniform-noise", "block-structured"],
                   default="uniform-noise")
    p.set_defaults(func=cmd_gen)
    commands["gen"] = p

    p = sub.add_parser("compress", help="run the samplers and emit a report")
    p.add_argument("--strategy", choices=["vision", "text", "both", "heuristic"], default="both")
    p.add_argument("--map", required=True, help="feature map file (FMAP)")
    p.add_argument("--global", dest="global_map", help="global feature map file (FMAP)")
    p.add_argument("--params", help="selector parameters file (SELW)")
    p.add_argument("--q", help="projected text queries (ATTN, heads x T x d)")
    p.add_argument("--k", help="projected visual keys (ATTN, heads x N x d)")
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--menu", choices=["3branch", "7branch"], default="3branch")
    p.add_argument("--pool", choices=["mean", "max"], default="mean")
    p.add_argument("--gamma", type=float, default=0.85)
    p.add_argument("--layer", type=int, default=8)
    p.add_argument("--total-layers", type=int, default=32)
    p.add_argument("--keep-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0,
                   help="seed for fallback params and combined-strategy key projection")
    p.add_argument("--out", default="-", help="report path, '-' for stdout")
    p.add_argument("--heatmap-prefix", help="write PGM heatmaps with this path prefix")
    p.set_defaults(func=cmd_compress)
    commands["compress"] = p

    p = sub.add_parser("train", help="train the scale selector")
    p.add_argument("--task", choices=["scale-indifferent"],
                   help="built-in synthetic task (alternative to --map/--global)")
    p.add_argument("--map", action="append", help="feature map file; repeatable")
    p.add_argument("--global", dest="global_map", help="global feature map file")
    p.add_argument("--target", help="comma-separated downstream target vector")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=SCALE_INDIFFERENT_LEARNING_RATE)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--imbalance", help="comma-separated per-scale penalty weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--menu", choices=["3branch", "7branch"], default="3branch")
    p.add_argument("--pool", choices=["mean", "max"], default="mean")
    p.add_argument("--resume", help="SELW file to continue from")
    p.add_argument("--out-params", help="write final parameters to this SELW file")
    p.add_argument("--log", help="write the full JSON training log here")
    p.set_defaults(func=cmd_train)
    commands["train"] = p

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--margin", type=float, default=1e-3,
                   help="skip instances whose argmax margin is at most this")
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--menu", choices=["3branch", "7branch"], default="3branch")
    p.add_argument("--corrupt", action="store_true",
                   help="perturb the analytic gradient to exercise the failure path")
    p.set_defaults(func=cmd_gradcheck)
    commands["gradcheck"] = p

    p = sub.add_parser("evolution", help="per-layer importance heatmaps from an attention stack")
    p.add_argument("--attn", required=True, help="layer-major 4-d ATTN file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--grid", help="HxW token grid (default: square root of N)")
    p.add_argument("--format", choices=["pgm", "csv"], default="pgm")
    p.set_defaults(func=cmd_evolution)
    commands["evolution"] = p

    p = sub.add_parser("report", help="re-profile an existing report")
    p.add_argument("--in", dest="infile", required=True, help="report JSON file")
    p.add_argument("--layer", type=int, help="what-if text insertion layer")
    p.add_argument("--total-layers", type=int)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_report)
    commands["report"] = p

    return parser, commands


def _apply_config_file(argv: list[str], parser, commands) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    overrides = json.loads(Path(known.config).read_text())
    if not isinstance(overrides, dict):
        raise ValueError("config file must hold a JSON object")
    command = next((tok for tok in rest if not tok.startswith("-")), None)
    target = commands.get(command)
    if target is None:
        return
    valid = {action.dest for action in target._actions}
    mapped = {}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in valid:
            raise ValueError(f"config key {key!r} is not a flag of {command!r}")
        mapped[dest] = value
    target.set_defaults(**mapped)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = build_parser()
    try:
        _apply_config_file(argv, parser, commands)
        args = parser.parse_args(argv)
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING_FILE, "file-not-found", str(exc))
    except TensorFileError as exc:
        return _fail(EXIT_FORMAT, "format-error", str(exc))
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, "training-diverged", str(exc))
    except ValueError as exc:
        return _fail(EXIT_INVALID, "invalid-input", str(exc))


if __name__ == "__main__":
    sys.exit(main())
