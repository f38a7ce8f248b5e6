"""Command line entry point: ``arbkp <command> [options]``.

Every command accepts ``--config FILE`` with ``key = value`` lines (keys are
option names, dashes or underscores); explicit flags win over the file.
Data directories default to ``$ARBKP_DATA`` when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

DATA_ENV = "ARBKP_DATA"

log = logging.getLogger("arbkp")


class CliError(Exception):
    pass


def _default_data():
    return os.environ.get(DATA_ENV)


def read_config(path):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _write_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _data_dir(args, attr="data"):
    d = getattr(args, attr, None) or _default_data()
    if not d:
        raise CliError(f"--{attr} not given and ${DATA_ENV} not set")
    return Path(d)


# commands


def cmd_gen_synth(args):
    from .dataset import write_synthetic_dataset

    out = args.out or _default_data()
    if not out:
        raise CliError(f"--out not given and ${DATA_ENV} not set")
    anns = write_synthetic_dataset(out, args.count, args.seed, mask_fraction=args.mask_fraction)
    print(f"wrote {len(anns)} figures to {out}")


def _query_record(image_id, qid, spec, point):
    return {"image_id": image_id, "query_id": qid, **spec.to_record(), "x": float(point[0]), "y": float(point[1])}


def cmd_gen_gt(args):
    from .datamodel import load_annotations, load_masks
    from .evaluate import EVAL_KEYPOINTS, image_rng, standard_queries
    from .geometry import sample_gt_keypoints

    anns = load_annotations(args.annotations)
    records = []
    for ann in anns:
        rng = image_rng(args.seed, ann.image_id)
        qid = 0
        if args.standard:
            specs, pts = standard_queries(ann)
            for s, p in zip(specs, pts):
                records.append(_query_record(ann.image_id, qid, s, p))
                qid += 1
        masks = load_masks(args.masks, ann.image_id) if args.masks else {}
        if not masks:
            continue
        if args.eval:
            k = EVAL_KEYPOINTS
        elif args.per_image is not None:
            k = args.per_image
        else:
            k = int(rng.integers(5, 51))
        for s, p in sample_gt_keypoints(ann, masks, k, rng):
            records.append(_query_record(ann.image_id, qid, s, p))
            qid += 1
    _write_jsonl(args.out, records)
    print(f"wrote {len(records)} keypoints for {len(anns)} images to {args.out}")


def _spec_from_text(text):
    from .geometry import ArbitraryKeypointSpec

    text = text.strip()
    if text.startswith("{"):
        return ArbitraryKeypointSpec.from_record(json.loads(text))
    rec = {}
    for part in text.split():
        if "=" not in part:
            raise CliError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        rec[k] = v
    return ArbitraryKeypointSpec.from_record(rec)


def cmd_encode_token(args):
    from .token_codec import encode

    lines = [" ".join(args.spec)] if args.spec else [line for line in sys.stdin if line.strip()]
    for line in lines:
        print(encode(_spec_from_text(line)).to_text())


def cmd_decode_token(args):
    from .token_codec import QueryToken, decode

    lines = [" ".join(args.token)] if args.token else [line for line in sys.stdin if line.strip()]
    for line in lines:
        spec = decode(QueryToken.from_text(line))
        print(json.dumps(spec.to_record(), sort_keys=True))


def cmd_train(args):
    import torch

    from .dataset import load_dataset
    from .training import StrategyConfig, run_strategy

    torch.set_num_threads(1)
    over = {}
    if args.steps is not None:
        over["steps"] = args.steps
    if args.seed is not None:
        over["seed"] = args.seed
    if args.init is not None:
        over["init_checkpoint"] = args.init
    if args.pseudo_labels is not None:
        over["pseudo_label_pool"] = args.pseudo_labels
    strategy = StrategyConfig.from_file(args.strategy, **over)
    config = strategy.model_config()
    train = load_dataset(_data_dir(args), config.input_size)
    val = load_dataset(args.val, config.input_size) if args.val else None
    state, records = run_strategy(strategy, train, val, args.out)
    print(f"trained {state.step} steps; final loss {records[-1]['loss'] if records else 'n/a'}")


def _group_queries(records):
    from .geometry import ArbitraryKeypointSpec

    by_image = defaultdict(list)
    for rec in records:
        by_image[rec["image_id"]].append(rec)
    return {
        k: (
            [ArbitraryKeypointSpec.from_record(r) for r in v],
            [r.get("query_id", i) for i, r in enumerate(v)],
        )
        for k, v in by_image.items()
    }


def cmd_predict(args):
    import torch

    from .dataset import load_dataset
    from .evaluate import predict_points, standard_queries
    from .transformer import load_model

    torch.set_num_threads(1)
    model, _ = load_model(args.model)
    samples = load_dataset(_data_dir(args), model.config.input_size)
    queries = _group_queries(_read_jsonl(args.queries)) if args.queries else None
    out = []
    for sample in samples:
        if queries is None:
            specs, _ = standard_queries(sample.annotation)
            qids = list(range(len(specs)))
        elif sample.image_id in queries:
            specs, qids = queries[sample.image_id]
        else:
            continue
        if not specs:
            continue
        pts, scores = predict_points(model, sample, specs)
        for q, s, p, sc in zip(qids, specs, pts, scores):
            rec = _query_record(sample.image_id, q, s, p)
            rec["score"] = float(sc)
            out.append(rec)
    _write_jsonl(args.out, out)
    print(f"wrote {len(out)} detections to {args.out}")


def cmd_eval(args):
    from .datamodel import load_annotations, load_masks
    from .geometry import ArbitraryKeypointSpec
    from .metrics import UndefinedTorsoError, aggregate
    from .evaluate import score_points
    from .render import render_report_figure

    data = Path(args.data) if args.data else (Path(_default_data()) if _default_data() else None)
    ann_path = args.annotations or (data / "annotations.jsonl" if data else None)
    mask_dir = args.masks or (data / "masks" if data else None)
    if ann_path is None:
        raise CliError("--annotations not given")
    anns = {a.image_id: a for a in load_annotations(ann_path)}
    gt = defaultdict(dict)
    for r in _read_jsonl(args.gt):
        gt[r["image_id"]][r["query_id"]] = r
    pred = defaultdict(dict)
    for r in _read_jsonl(args.pred):
        pred[r["image_id"]][r["query_id"]] = r
    results, excluded = [], {
        "degenerate_torso": 0, "failed_geometry": 0, "missing_prediction": 0, "unknown_image": 0,
    }
    for image_id in sorted(gt):
        if image_id not in anns:
            excluded["unknown_image"] += len(gt[image_id])
            continue
        masks = load_masks(mask_dir, image_id) if mask_dir and Path(mask_dir).exists() else {}
        qids = [q for q in sorted(gt[image_id]) if q in pred[image_id]]
        excluded["missing_prediction"] += len(gt[image_id]) - len(qids)
        specs = [ArbitraryKeypointSpec.from_record(gt[image_id][q]) for q in qids]
        g = np.array([[gt[image_id][q]["x"], gt[image_id][q]["y"]] for q in qids]).reshape(-1, 2)
        d = np.array([[pred[image_id][q]["x"], pred[image_id][q]["y"]] for q in qids]).reshape(-1, 2)
        try:
            results += score_points(anns[image_id], masks, specs, g, d, bool(masks), excluded=excluded)
        except UndefinedTorsoError:
            excluded["degenerate_torso"] += 1
    report = aggregate(results, excluded=excluded)
    Path(args.report).write_text(report.to_text())
    fig = Path(args.report).with_suffix(".png")
    render_report_figure(report, fig)
    print(report.to_text(), end="")
    print(f"report: {args.report}  figure: {fig}")


def cmd_filter_pl(args):
    import torch

    from .dataset import load_dataset
    from .pseudolabels import build_pool, select_balanced, write_pseudo_labels
    from .transformer import load_model

    torch.set_num_threads(1)
    model, _ = load_model(args.model)
    samples = load_dataset(_data_dir(args), model.config.input_size)
    if args.unlabelled_only:
        samples = [s for s in samples if not s.has_masks()]
    pool, rejected = build_pool(
        model, samples, args.per_image, args.seed, args.min_score, args.min_views
    )
    sel = select_balanced(pool, args.keep)
    write_pseudo_labels(args.out, sel.selected)
    print(
        f"pool {len(pool)} (rejected {sum(rejected.values())}), kept {len(sel.selected)} "
        f"over {len(sel.per_part)} parts -> {args.out}"
    )
    if sel.imbalance:
        print(f"imbalanced parts: {json.dumps(sel.imbalance, sort_keys=True)}")


def cmd_render(args):
    from .dataset import load_dataset
    from .render import RenderSpec, render_overlay

    data = _data_dir(args)
    spec = RenderSpec(lines=args.lines)
    if args.model:
        import torch

        from .transformer import load_model

        torch.set_num_threads(1)
        model, _ = load_model(args.model)
        size = model.config.input_size
    else:
        model, size = None, (48, 64)
    samples = load_dataset(data, size)
    if args.image:
        samples = [s for s in samples if s.image_id in set(args.image)]
        if not samples:
            raise CliError(f"no image with id {args.image}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        path = out / f"{s.image_id}.png"
        if model is not None:
            render_overlay(s.image, path, model=model, sample=s, spec=spec)
        else:
            if not s.has_masks():
                log.warning("%s: no masks, skipped", s.image_id)
                continue
            render_overlay(s.image, path, s.annotation, s.masks, spec=spec)
        print(path)


# parser


def build_parser():
    p = argparse.ArgumentParser(prog="arbkp", description="Arbitrary keypoints on figures with skis.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="key = value file with defaults for the options below")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-synth", cmd_gen_synth, "generate a synthetic dataset (images, annotations, masks)")
    sp.add_argument("--count", type=int, required=True, help="number of figures")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help=f"output directory (default ${DATA_ENV})")
    sp.add_argument("--mask-fraction", type=float, default=1.0, help="share of images that get masks")

    sp = add("gen-gt", cmd_gen_gt, "sample ground-truth arbitrary keypoints from masks")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--masks", help="mask directory")
    sp.add_argument("--per-image", type=int, help="keypoints per image (default: random 5 to 50)")
    sp.add_argument("--eval", action="store_true", help="evaluation set: 200 per image plus standard keypoints")
    sp.add_argument("--standard", action="store_true", help="also emit the visible standard keypoints")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("encode-token", cmd_encode_token, "print the query token of a keypoint spec")
    sp.add_argument(
        "spec", nargs="*",
        help="spec as JSON or key=value pairs, e.g. 'kind=limb segment=l_forearm alpha=0.3 side=c1 beta=0.5'; "
        "reads stdin lines when omitted",
    )

    sp = add("decode-token", cmd_decode_token, "print the keypoint spec of a 20-number query token")
    sp.add_argument("token", nargs="*", help="20 numbers; reads stdin lines when omitted")

    sp = add("train", cmd_train, "train a model with a strategy file")
    sp.add_argument("--strategy", help="JSON strategy file (objectives, steps, lr, ...)")
    sp.add_argument("--data", help=f"training data directory (default ${DATA_ENV})")
    sp.add_argument("--val", help="validation data directory")
    sp.add_argument("--out", required=True, help="output directory for checkpoints and log.jsonl")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--init", help="checkpoint to start from")
    sp.add_argument("--pseudo-labels", help="pseudo-label file for the pseudo_labels objective")

    sp = add("predict", cmd_predict, "run a model on a dataset's queries")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", help=f"data directory (default ${DATA_ENV})")
    sp.add_argument("--queries", help="gen-gt file; standard keypoints when omitted")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score detections: Std PCK, Full PCK, MTE, PCT")
    sp.add_argument("--pred", required=True, help="predict output")
    sp.add_argument("--gt", required=True, help="gen-gt output")
    sp.add_argument("--annotations", help="annotation file (default <data>/annotations.jsonl)")
    sp.add_argument("--masks", help="mask directory (default <data>/masks)")
    sp.add_argument("--data", help=f"data directory (default ${DATA_ENV})")
    sp.add_argument("--report", required=True, help="TSV report; a PNG figure is written next to it")

    sp = add("filter-pl", cmd_filter_pl, "build and filter a pseudo-label pool")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", help=f"data directory (default ${DATA_ENV})")
    sp.add_argument("--keep", type=float, default=0.8)
    sp.add_argument("--per-image", type=int, default=1000)
    sp.add_argument("--min-score", type=float, default=0.25)
    sp.add_argument("--min-views", type=int, default=4)
    sp.add_argument("--unlabelled-only", action="store_true", help="skip images that have masks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "draw equally spaced keypoint lines per part")
    sp.add_argument("--data", help=f"data directory (default ${DATA_ENV})")
    sp.add_argument("--model", help="checkpoint; ground-truth geometry when omitted")
    sp.add_argument("--image", action="append", help="image id (repeatable); all images when omitted")
    sp.add_argument("--lines", type=int, default=4)
    sp.add_argument("--out", required=True, help="output directory")
    return p


def _config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse ``argv`` with config-file values installed as defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    if path and command in subs:
        sub = subs[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in read_config(path).items():
            if key not in actions or key in ("help", "config", "func"):
                raise CliError(f"{path}: unknown option {key!r} for {command}")
            action = actions[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            elif action.nargs in ("*", "+") or isinstance(action, argparse._AppendAction):
                defaults[key] = raw.split()
            else:
                defaults[key] = action.type(raw) if action.type else raw
            action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except CliError as e:
        print(f"arbkp: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except (CliError, OSError, ValueError, KeyError) as e:
        print(f"arbkp: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
