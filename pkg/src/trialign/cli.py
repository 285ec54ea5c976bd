"""Command-line entry point.

Every subcommand resolves one flat configuration (dotted keys such as
``train.epochs``) from built-in defaults, an optional JSON ``--config`` file,
``--override key=value`` pairs and finally explicit flags, in that order of
precedence. The resolved configuration is echoed to ``<out>/config.json``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .anchors import AnchorSet, load_table, oracle_anchor_gen, save_table, stand_in_image_table, stand_in_text_table
from .dataset import Dataset, load_manifest, make_synthetic, save_manifest
from .encoder import Checkpoint, load_checkpoint, save_checkpoint
from .errors import BadFlag, FormatError, MissingModality, UnknownCommand, ValidationError
from .evaluate import (
    ABLATION_CONFIGS,
    CategoryAnchors,
    FinetuneConfig,
    data_efficiency_sweep,
    embed_records,
    filter_category_set,
    finetune,
    modality_ablation,
    retrieve,
    stratified_subsample,
    write_rows,
    zeroshot_eval,
)
from .pointcloud import normalize_unit_sphere
from .renderer import CameraRing, export_depth, render_depth
from .train import TrainConfig, pretrain

log = logging.getLogger("trialign")

OUT_ENV = "TRIALIGN_OUT"


# config plumbing

def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.update(flatten(v, key))
        else:
            out[key] = v
    return out


def unflatten(flat: dict[str, Any]) -> dict:
    out: dict = {}
    for key, v in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return out


def section(cfg: dict, name: str) -> dict:
    n = len(name) + 1
    return unflatten({k[n:]: v for k, v in cfg.items() if k.startswith(name + ".")})


def _train_defaults() -> dict:
    d = TrainConfig().to_dict()
    d.pop("seed")
    return flatten(d, "train")


def _finetune_defaults() -> dict:
    d = FinetuneConfig().to_dict()
    for k in ("seed", "widths", "embed_dim"):
        d.pop(k)
    d["fraction"] = 1.0
    return flatten(d, "finetune")


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**section(cfg, "train"), seed=int(cfg["seed"]))


def finetune_config(cfg: dict, widths=None, embed_dim=None) -> FinetuneConfig:
    d = section(cfg, "finetune")
    d.pop("fraction", None)
    for k, v in (("widths", widths), ("embed_dim", embed_dim)):
        if v is not None:
            d[k] = v
    return FinetuneConfig(**d, seed=int(cfg["seed"]))


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None

    return parse


@dataclass
class Opt:
    flag: str
    key: str
    type: Callable | None = None
    help: str = ""
    action: str | None = None
    choices: tuple | None = None


COMMON = [Opt("--seed", "seed", int, "top-level seed; every random stream derives from it")]
TRAIN_OPTS = [
    Opt("--epochs", "train.epochs", int),
    Opt("--batch-size", "train.batch_size", int),
    Opt("--lr", "train.learning_rate", float),
    Opt("--weight-decay", "train.weight_decay", float),
    Opt("--n-points", "train.n_points", int),
    Opt("--alpha", "train.alpha", float, "weight of the image-text term"),
    Opt("--beta", "train.beta", float, "weight of the image-point term"),
    Opt("--theta", "train.theta", float, "weight of the point-text term"),
    Opt("--schedule", "train.schedule", str, choices=("constant", "cosine")),
    Opt("--reduction", "train.reduction", str, choices=("sum", "mean")),
    Opt("--widths", "train.widths", _csv_list(int), "per-point MLP widths, e.g. 64,128,256"),
]
FINETUNE_OPTS = [
    Opt("--epochs", "finetune.epochs", int),
    Opt("--batch-size", "finetune.batch_size", int),
    Opt("--lr", "finetune.learning_rate", float),
    Opt("--head-lr", "finetune.head_learning_rate", float),
    Opt("--n-points", "finetune.n_points", int),
    Opt("--freeze-encoder", "finetune.freeze_encoder", action="store_true", help="linear probe"),
]


@dataclass
class Command:
    name: str
    help: str
    run: Callable[[dict], int]
    defaults: dict
    opts: list[Opt]
    required: tuple[str, ...] = ()


def _positive(cfg: dict, *keys: str):
    for k in keys:
        if cfg.get(k) is None or cfg[k] <= 0:
            raise ValidationError(f"{k} must be positive")


# subcommands

def cmd_gen_synthetic(cfg: dict) -> int:
    d = section(cfg, "data")
    ds = make_synthetic(d["categories"], d["per_class"], d["test_per_class"], d["n_points"], d["noise_sigma"], cfg["seed"])
    save_manifest(ds, Path(cfg["out"]) / "manifest.json")
    print(f"wrote {len(ds.records)} clouds over {len(ds.categories)} categories")
    return 0


def cmd_render(cfg: dict) -> int:
    ds = load_manifest(cfg["data"])
    ring = CameraRing()
    views = cfg["render.views"] or list(range(ring.view_count))
    records = ds.split(cfg["render.split"]) if cfg["render.split"] else ds.records
    if cfg["render.limit"] is not None:
        records = records[: cfg["render.limit"]]
    out = Path(cfg["out"]) / "depth"
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for r in records:
        pc = normalize_unit_sphere(r.cloud)
        for v in views:
            if not 0 <= v < ring.view_count:
                raise ValidationError(f"view {v} outside 0..{ring.view_count - 1}")
            dm = render_depth(pc, ring, v, cfg["render.res"])
            path = export_depth(dm, out / f"{r.id}_v{v:02d}.pgm")
            index.append({"id": r.id, "view": v, "path": str(path.relative_to(cfg["out"])), "foreground": int(dm.foreground.sum())})
    (Path(cfg["out"]) / "renders.json").write_text(json.dumps(index, indent=1))
    print(f"rendered {len(index)} depth maps")
    return 0


def _category_words(ds: Dataset) -> dict[str, list[str]]:
    words = {c: [c] for c in ds.categories}
    for r in ds.records:
        words[ds.categories[r.label]].extend(w for w in r.words if w not in words[ds.categories[r.label]])
    return words


def cmd_embed_anchors(cfg: dict) -> int:
    a = section(cfg, "anchors")
    out = Path(cfg["out"])
    mode = a["mode"]
    if mode == "ingest":
        if not cfg.get("text") or not cfg.get("image"):
            raise BadFlag("ingest mode needs --text and --image embedding tables")
        anchors = AnchorSet(load_table(cfg["text"]), load_table(cfg["image"]))
    else:
        if not cfg.get("data"):
            raise BadFlag(f"{mode} mode needs --data")
        ds = load_manifest(cfg["data"])
        _positive(a, "dim")
        if mode == "oracle":
            text, image = oracle_anchor_gen(
                ds.categories,
                a["dim"],
                cfg["seed"],
                a["image_noise"],
                a["prompt_jitter"],
                words=_category_words(ds),
                objects=[(r.id, r.label) for r in ds.records],
            )
        else:
            text = stand_in_text_table(ds.words(), a["dim"], cfg["seed"])
            image = stand_in_image_table(ds.records, a["dim"], cfg["seed"], res=a["res"])
        anchors = AnchorSet(text, image)
    save_table(anchors.text, out / "text.emb")
    save_table(anchors.image, out / "image.emb")
    print(f"{mode} anchors: {len(anchors.text)} text rows, {len(anchors.image)} image rows, dim {anchors.dim}")
    return 0


def cmd_pretrain(cfg: dict) -> int:
    ds = load_manifest(cfg["data"])
    anchors = AnchorSet.load(cfg["anchors"])
    tcfg = train_config(cfg)
    out = Path(cfg["out"])
    res = pretrain(ds, anchors, tcfg, trace_path=out / "trace.csv")
    res.checkpoint.metadata.update({"anchors": str(Path(cfg["anchors"]).resolve()), "data": str(Path(cfg["data"]).resolve())})
    save_checkpoint(out / "checkpoint.ckpt", res.checkpoint)
    last = res.trace[-1]["L_final"] if res.trace else float("nan")
    summary = {"iterations": res.iterations, "skipped": res.skipped, "final_loss": last}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(f"{res.iterations} iterations, final loss {last:.4f}, {len(res.skipped)} records skipped")
    return 0


def _anchors_for(cfg: dict, ckpt: Checkpoint) -> AnchorSet:
    path = cfg.get("anchors") or ckpt.metadata.get("anchors")
    if not path:
        raise BadFlag("no --anchors given and the checkpoint does not record one")
    return AnchorSet.load(path)


def _eval_points(cfg: dict, ckpt: Checkpoint) -> int:
    n = cfg["eval.n_points"] or ckpt.metadata.get("config", {}).get("n_points") or 1024
    return int(n)


def cmd_zeroshot(cfg: dict) -> int:
    ckpt = load_checkpoint(cfg["checkpoint"])
    ds = load_manifest(cfg["data"])
    anchors = _anchors_for(cfg, ckpt)
    cats = CategoryAnchors.from_anchor_set(anchors, ds.categories)
    filt = filter_category_set(ds.categories, cfg["eval.set"])
    report = zeroshot_eval(
        ckpt.params, ds.split(cfg["eval.split"]), ds.categories, cats, filt, _eval_points(cfg, ckpt), cfg["seed"]
    )
    report.to_json(Path(cfg["out"]) / "metrics.json")
    print(f"zero-shot [{filt.name}] top1 {report.top1:.2f}  top5 {report.top5:.2f}  mAcc {report.class_mean_accuracy:.2f}")
    return 0


def cmd_finetune(cfg: dict) -> int:
    ds = load_manifest(cfg["data"])
    ckpt = load_checkpoint(cfg["checkpoint"]) if cfg.get("checkpoint") else None
    params = ckpt.params if ckpt else None
    fcfg = finetune_config(
        cfg,
        widths=params.widths if params else cfg["finetune.widths"],
        embed_dim=params.embed_dim if params else cfg["finetune.embed_dim"],
    )
    train = stratified_subsample(ds.split("train"), cfg["finetune.fraction"], cfg["seed"])
    res = finetune(params, train, ds.split("test"), ds.categories, fcfg)
    out = Path(cfg["out"])
    res.report.to_json(out / "metrics.json")
    meta = {"protocol": "finetune", "init": "pretrained" if ckpt else "random", "categories": ds.categories}
    log_inv_tau = ckpt.log_inv_tau if ckpt else float(np.log(1 / 0.07))
    save_checkpoint(out / "finetuned.ckpt", Checkpoint(res.params, log_inv_tau, 100.0, meta, res.head))
    write_rows([{"step": i, "loss": v} for i, v in enumerate(res.losses)], out / "losses.csv", ("step", "loss"))
    print(f"fine-tune OA {res.report.overall_accuracy:.2f}  mAcc {res.report.class_mean_accuracy:.2f}")
    return 0


def cmd_retrieve(cfg: dict) -> int:
    ckpt = load_checkpoint(cfg["checkpoint"])
    ds = load_manifest(cfg["data"])
    split = cfg["retrieve.gallery_split"]
    gallery_recs = ds.records if split == "all" else ds.split(split)
    n_points = _eval_points(cfg, ckpt)
    emb = embed_records(ckpt.params, gallery_recs, n_points, cfg["seed"])
    gallery = {r.id: e for r, e in zip(gallery_recs, emb)}
    by_id = {r.id: r for r in ds.records}
    queries = cfg["retrieve.queries"] or [r.id for r in ds.split("test")]
    unknown = [q for q in queries if q not in by_id]
    if unknown:
        raise ValidationError(f"unknown query ids: {unknown[:5]}")
    q_emb = {q: gallery[q] for q in queries if q in gallery}
    missing = [by_id[q] for q in queries if q not in gallery]
    if missing:
        q_emb.update({r.id: e for r, e in zip(missing, embed_records(ckpt.params, missing, n_points, cfg["seed"]))})
    results = []
    for q in queries:
        hits = retrieve(q_emb[q], gallery, cfg["retrieve.k"])
        results.append(
            {
                "query": q,
                "label": ds.categories[by_id[q].label],
                "hits": [{"id": i, "score": s, "label": ds.categories[by_id[i].label]} for i, s in hits],
            }
        )
    (Path(cfg["out"]) / "retrieval.json").write_text(json.dumps(results, indent=1))
    agree = np.mean([sum(h["label"] == r["label"] for h in r["hits"]) / max(1, len(r["hits"])) for r in results])
    print(f"{len(results)} queries, mean label precision@{cfg['retrieve.k']} {100 * agree:.2f}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    ds = load_manifest(cfg["data"])
    anchors = AnchorSet.load(cfg["anchors"])
    res = modality_ablation(ds, anchors, train_config(cfg), cfg["ablation.seeds"])
    out = Path(cfg["out"])
    write_rows(res.table, out / "ablation.csv", ("modalities", "top1", "top5"))
    write_rows(res.runs, out / "ablation_runs.csv", ("modalities", "seed", "top1", "top5"))
    (out / "ablation.json").write_text(json.dumps({"table": res.table, "runs": res.runs}, indent=1, sort_keys=True))
    for row in res.table:
        print(f"{row['modalities']:6s} top1 {row['top1']:.2f}  top5 {row['top5']:.2f}")
    return 0


def cmd_sweep(cfg: dict) -> int:
    ckpt = load_checkpoint(cfg["checkpoint"])
    ds = load_manifest(cfg["data"])
    fcfg = finetune_config(cfg, ckpt.params.widths, ckpt.params.embed_dim)
    rows = data_efficiency_sweep(
        ckpt.params, ds, cfg["sweep.fractions"], cfg["sweep.seeds"], fcfg, Path(cfg["out"]) / "sweep.csv"
    )
    for frac in cfg["sweep.fractions"]:
        for init in ("pretrained", "random"):
            oa = [r["overall_accuracy"] for r in rows if r["fraction"] == frac and r["init"] == init]
            print(f"fraction {frac:<5} {init:10s} mean OA {np.mean(oa):.2f}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    from .gradcheck import run_suite

    g = section(cfg, "gradcheck")
    worst = run_suite(range(g["seeds"]), g["h"], g["encoder"])
    for name, err in worst.items():
        print(f"{name:28s} {err:.3e}")
    top = max(worst.values())
    print(f"max relative error {top:.3e} (tolerance {g['tolerance']:g})")
    (Path(cfg["out"]) / "gradcheck.json").write_text(json.dumps({"cases": worst, "max": top}, indent=1, sort_keys=True))
    return 0 if top < g["tolerance"] else 2


DATA = Opt("--data", "data", str, "dataset manifest (JSON)")
ANCHORS = Opt("--anchors", "anchors", str, "directory holding text.emb and image.emb")
CKPT = Opt("--checkpoint", "checkpoint", str, "encoder checkpoint")
EVAL_OPTS = [
    Opt("--n-points", "eval.n_points", int, "points per evaluated cloud (default: the checkpoint's)"),
]

COMMANDS = [
    Command(
        "gen-synthetic",
        "generate the synthetic shape benchmark",
        cmd_gen_synthetic,
        {"data.categories": 8, "data.per_class": 40, "data.test_per_class": 10, "data.n_points": 1024, "data.noise_sigma": 0.01},
        [
            Opt("--categories", "data.categories", int),
            Opt("--per-class", "data.per_class", int, "training objects per class"),
            Opt("--test-per-class", "data.test_per_class", int),
            Opt("--n-points", "data.n_points", int),
            Opt("--noise-sigma", "data.noise_sigma", float),
        ],
    ),
    Command(
        "render",
        "render depth maps of a dataset to 16-bit PGM",
        cmd_render,
        {"data": None, "render.res": 64, "render.views": None, "render.split": None, "render.limit": None},
        [
            DATA,
            Opt("--res", "render.res", int),
            Opt("--views", "render.views", _csv_list(int), "comma-separated view indices (default: all)"),
            Opt("--split", "render.split", str, choices=("train", "test")),
            Opt("--limit", "render.limit", int, "render at most this many objects"),
        ],
        ("data",),
    ),
    Command(
        "embed-anchors",
        "build or ingest the frozen text and image anchor tables",
        cmd_embed_anchors,
        {
            "data": None,
            "text": None,
            "image": None,
            "anchors.mode": "oracle",
            "anchors.dim": 32,
            "anchors.image_noise": 0.2,
            "anchors.prompt_jitter": 0.3,
            "anchors.res": 64,
        },
        [
            DATA,
            Opt("--mode", "anchors.mode", str, choices=("oracle", "stand-in", "ingest")),
            Opt("--dim", "anchors.dim", int),
            Opt("--image-noise", "anchors.image_noise", float),
            Opt("--prompt-jitter", "anchors.prompt_jitter", float),
            Opt("--res", "anchors.res", int, "render resolution for stand-in image anchors"),
            Opt("--text", "text", str, "text table to ingest"),
            Opt("--image", "image", str, "image table to ingest"),
        ],
    ),
    Command(
        "pretrain",
        "align the point encoder to frozen anchors",
        cmd_pretrain,
        {"data": None, "anchors": None, **_train_defaults()},
        [DATA, ANCHORS, *TRAIN_OPTS],
        ("data", "anchors"),
    ),
    Command(
        "zeroshot",
        "zero-shot classification against category text anchors",
        cmd_zeroshot,
        {"checkpoint": None, "data": None, "anchors": None, "eval.set": "ALL", "eval.split": "test", "eval.n_points": None},
        [CKPT, DATA, ANCHORS, Opt("--set", "eval.set", str, "ALL, Medium, Hard or a category-list file"), *EVAL_OPTS],
        ("checkpoint", "data"),
    ),
    Command(
        "finetune",
        "fine-tune a classifier from a checkpoint (or from scratch)",
        cmd_finetune,
        {"data": None, "checkpoint": None, **_finetune_defaults(), "finetune.widths": [64, 128, 256], "finetune.embed_dim": 512},
        [DATA, CKPT, *FINETUNE_OPTS, Opt("--fraction", "finetune.fraction", float, "stratified training fraction")],
        ("data",),
    ),
    Command(
        "retrieve",
        "point-cloud to point-cloud retrieval",
        cmd_retrieve,
        {
            "checkpoint": None,
            "data": None,
            "retrieve.k": 5,
            "retrieve.queries": None,
            "retrieve.gallery_split": "all",
            "eval.n_points": None,
        },
        [
            CKPT,
            DATA,
            Opt("--k", "retrieve.k", int),
            Opt("--queries", "retrieve.queries", _csv_list(str), "query ids (default: the test split)"),
            Opt("--gallery", "retrieve.gallery_split", str, choices=("all", "train", "test")),
            *EVAL_OPTS,
        ],
        ("checkpoint", "data"),
    ),
    Command(
        "ablate-modalities",
        "pretrain with " + ", ".join(n for n, _, _ in ABLATION_CONFIGS) + " and zero-shot each",
        cmd_ablate,
        {"data": None, "anchors": None, "ablation.seeds": [0, 1, 2], **_train_defaults()},
        [DATA, ANCHORS, Opt("--seeds", "ablation.seeds", _csv_list(int)), *TRAIN_OPTS],
        ("data", "anchors"),
    ),
    Command(
        "sweep-data-efficiency",
        "fine-tune pretrained and random encoders over training fractions",
        cmd_sweep,
        {
            "checkpoint": None,
            "data": None,
            "sweep.fractions": [0.1, 0.25, 0.5, 1.0],
            "sweep.seeds": [0, 1, 2],
            **_finetune_defaults(),
        },
        [
            CKPT,
            DATA,
            Opt("--fractions", "sweep.fractions", _csv_list(float)),
            Opt("--seeds", "sweep.seeds", _csv_list(int)),
            *FINETUNE_OPTS,
        ],
        ("checkpoint", "data"),
    ),
    Command(
        "gradcheck",
        "finite-difference check of every analytic gradient",
        cmd_gradcheck,
        {"gradcheck.seeds": 10, "gradcheck.h": 1e-3, "gradcheck.tolerance": 1e-3, "gradcheck.encoder": True},
        [
            Opt("--seeds", "gradcheck.seeds", int, "number of seeds"),
            Opt("--h", "gradcheck.h", float, "finite-difference step"),
            Opt("--no-encoder", "gradcheck.encoder", action="store_false", help="skip the encoder case"),
        ],
    ),
]
_BY_NAME = {c.name: c for c in COMMANDS}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise BadFlag(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trialign", description="Align a point-cloud encoder with frozen text and image anchors.")
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    parser.subcommands = {}
    for c in COMMANDS:
        p = sub.add_parser(c.name, help=c.help, description=c.help)
        parser.subcommands[c.name] = p
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command> or runs/<command>)")
        p.add_argument("--config", help="JSON file of dotted keys")
        p.add_argument("--override", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        for o in COMMON + c.opts:
            kw: dict[str, Any] = {"dest": o.key, "default": None, "help": o.help or None}
            if o.action:
                kw["action"] = o.action
            else:
                kw["type"] = o.type
                kw["metavar"] = o.key.rsplit(".", 1)[-1].upper()
                if o.choices:
                    kw["choices"] = o.choices
            p.add_argument(o.flag, **kw)
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(cmd: Command, ns: argparse.Namespace, usage: str = "") -> dict:
    cfg = {"seed": 0, **cmd.defaults}
    layers = []
    if ns.config:
        try:
            doc = json.loads(Path(ns.config).read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"{ns.config}: {e}") from None
        if not isinstance(doc, dict):
            raise ValidationError(f"{ns.config}: expected a JSON object of dotted keys")
        layers.append(("config file", flatten(doc)))
    pairs = {}
    for item in ns.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise BadFlag(f"--override expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = _parse_value(value)
    layers.append(("--override", pairs))
    flags = {o.key: getattr(ns, o.key) for o in COMMON + cmd.opts if getattr(ns, o.key) is not None}
    layers.append(("flags", flags))
    for origin, layer in layers:
        unknown = sorted(k for k in layer if k not in cfg and k != "out")
        if unknown:
            raise BadFlag(f"{origin}: unknown keys for {cmd.name}: {', '.join(unknown)}")
        cfg.update(layer)
    missing = [k for k in cmd.required if not cfg.get(k)]
    if missing:
        raise BadFlag(f"{usage}trialign {cmd.name}: error: missing " + ", ".join("--" + k for k in missing))
    out = ns.out or cfg.get("out") or str(Path(os.environ.get(OUT_ENV, "runs")) / cmd.name)
    cfg["out"] = out
    return cfg


def dispatch(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UnknownCommand(parser.format_usage() + "trialign: error: a command is required")
        logging.basicConfig(level=ns.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cmd = _BY_NAME[ns.command]
        cfg = resolve_config(cmd, ns, parser.subcommands[cmd.name].format_usage())
    except (BadFlag, UnknownCommand, ValidationError) as e:
        print(str(e), file=sys.stderr)
        return 1
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({"command": cmd.name, **cfg}, indent=1, sort_keys=True))
        return cmd.run(cfg)
    except (ValidationError, FormatError, MissingModality, FileNotFoundError) as e:
        print(f"trialign {cmd.name}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"trialign {cmd.name}: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
