"""Command-line entry point: ``rstpm <command> [options]``.

Commands: gen-corpus, pretrain, train, eval, ablate, infer.

Every run-level knob is a field of :class:`~rstpm.pipeline.RunConfig`. Values
resolve as built-in defaults < ``--config FILE`` < command-line flags, and the
resolved config is written to ``<out>/resolved_config.txt``. The config file is
flat ``key = value`` text (``#`` starts a comment; keys are RunConfig field
names, dashes and underscores interchangeable).

Exit codes: 0 success, 1 some input files failed, 2 usage or config error,
3 data or bundle contract violation, 4 threshold gate failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import warnings
from pathlib import Path

from .anomaly import dump_raw_maps, infer, save_heatmap_png
from .bundle import ModelBundle, load_bundle, save_bundle
from .data import (LabeledCorpus, assert_normal_only, export_mvtec_layout, load_mvtec_layout,
                   read_image)
from .errors import (ConfigError, FormatError, IngestionError, InputError, ShapeError,
                     StateError, UndefinedMetricError)
from .evaluate import AblationPlan, evaluate, write_report_csv
from .pipeline import RunConfig, make_corpus, make_teacher, run_desk, train_bundle

log = logging.getLogger("rstpm")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_DATA, EXIT_GATE = 0, 1, 2, 3, 4
OUTPUT_ROOT_ENV = "RSTPM_OUTPUT_ROOT"

# short flag names kept for the common training knobs
ALIASES = {"wd": "weight_decay", "batch": "batch_size", "size": "image_size"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class UsageError(Exception):
    pass


def parse_bool(s: str | bool) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ConfigError(f"not a boolean: {s!r} (use on/off, true/false, 1/0)")


def coerce(name: str, raw) -> object:
    types = RunConfig.field_types()
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    t = types[name]
    try:
        if t is bool:
            return parse_bool(raw)
        return t(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def read_config_file(path: str | Path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        out[key] = coerce(key, val)
    return out


def write_config_file(values: dict, path: str | Path, notes: dict | None = None) -> None:
    """``notes`` go in as comments so the file stays loadable with --config."""
    with open(path, "w") as fh:
        for k, v in sorted((notes or {}).items()):
            fh.write(f"# {k}: {v}\n")
        for k in sorted(values):
            v = values[k]
            fh.write(f"{k} = {('on' if v else 'off') if isinstance(v, bool) else v}\n")


def resolve_config(args) -> RunConfig:
    values = dataclasses.asdict(RunConfig())
    if args.config:
        values.update(read_config_file(args.config))
    for name in RunConfig.field_types():
        v = getattr(args, "cfg_" + name, None)
        if v is not None:
            values[name] = coerce(name, v)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def out_dir(args) -> Path:
    if args.out:
        d = Path(args.out)
    else:
        d = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {d}: {exc}") from exc
    if not os.access(d, os.W_OK):
        raise UsageError(f"output directory {d} is not writable")
    return d


def echo_config(cfg: RunConfig, args, d: Path) -> None:
    extra = {k: str(v) for k, v in (("command", args.command),
                                     ("data", getattr(args, "data", None)),
                                     ("teachers", getattr(args, "teachers", None)),
                                     ("bundle", getattr(args, "bundle", None))) if v}
    write_config_file(cfg.to_dict(), d / "resolved_config.txt", extra)


def load_corpora(cfg: RunConfig, args) -> tuple[LabeledCorpus, LabeledCorpus]:
    if getattr(args, "data", None):
        return load_mvtec_layout(args.data, cfg.category, cfg.image_size)
    return make_corpus(cfg)


def _teachers(cfg: RunConfig, args):
    if getattr(args, "teachers", None):
        d = Path(args.teachers)
        ta, tb = load_bundle(d / "teacher_a.bnd").teacher_a, load_bundle(d / "teacher_b.bnd").teacher_b
        if ta is None or tb is None:
            raise FormatError(f"{d}: teacher bundles are missing a teacher slot")
        return ta, tb
    return make_teacher(cfg, "A"), make_teacher(cfg, "B")


def _bundle_size(bundle: ModelBundle, cfg: RunConfig) -> int:
    return bundle.config.image_size if bundle.config else cfg.image_size


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = resolve_config(args)
    d = out_dir(args)
    train, test = make_corpus(cfg)
    try:
        export_mvtec_layout(d, train, test)
    except OSError as exc:
        raise UsageError(f"cannot write corpus to {d}: {exc}") from exc
    echo_config(cfg, args, d)
    print(f"wrote {len(train)} train and {len(test)} test images to {d / train.category}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    d = out_dir(args)
    rows = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        for which, slot in (("A", "teacher_a"), ("B", "teacher_b")):
            net = make_teacher(cfg, which)
            save_bundle(ModelBundle(**{slot: net}, meta={"run_config": cfg.to_dict()}),
                        d / f"{slot}.bnd")
            acc = net.meta.get("pretext_accuracy")
            rows.append((slot, "" if acc is None else repr(acc)))
    with open(d / "pretext_report.csv", "w") as fh:
        fh.write("teacher,pretext_accuracy,chance\n")
        for slot, acc in rows:
            fh.write(f"{slot},{acc},{1.0 / cfg.pretext_k!r}\n")
        for w in caught:
            fh.write(f"# warning: {w.message}\n")
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    echo_config(cfg, args, d)
    for slot, acc in rows:
        print(f"{slot}: pretext accuracy {acc or 'skipped'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    d = out_dir(args)
    train, _ = load_corpora(cfg, args)
    assert_normal_only(train)
    ta, tb = _teachers(cfg, args)
    bundle, reports = train_bundle(cfg, ta, tb, train)
    save_bundle(bundle, d / "bundle.bnd")
    for pair, rep in reports.items():
        rep.write_csv(d / f"loss_{pair}.csv")
        rep.write_timing_csv(d / f"timing_{pair}.csv")
    echo_config(cfg, args, d)
    last = {p: r.totals[-1] if r.totals else float("nan") for p, r in reports.items()}
    print("trained " + ", ".join(f"student-{p} final loss {v:.5f}" for p, v in last.items()))
    return EXIT_OK


def _check_gate(cfg: RunConfig, pixel: float, image: float) -> int:
    failed = []
    if pixel < cfg.min_pixel_auc:
        failed.append(f"pixel AUC {pixel:.4f} < {cfg.min_pixel_auc}")
    if image < cfg.min_image_auc:
        failed.append(f"image AUC {image:.4f} < {cfg.min_image_auc}")
    for f in failed:
        print(f"threshold failed: {f}", file=sys.stderr)
    return EXIT_GATE if failed else EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    d = out_dir(args)
    bundle = load_bundle(args.bundle)
    size = _bundle_size(bundle, cfg)
    _, test = load_corpora(cfg, args)
    if test.image_size != size:
        raise InputError(f"bundle was trained at {size}px but the corpus is {test.image_size}px")
    dual = None if not cfg.baseline_only else False
    res = infer(bundle, test.images, dual=dual, normalize_maps=cfg.normalize_maps)
    rep = evaluate(res, test, cfg.per_image_pixel_auc,
                   {"mode": res.mode, "fusion": res.mode,
                    "attention": "on" if bundle.attention else "off",
                    "teacher_b": bundle.meta.get("teacher_b", "")})
    write_report_csv([rep], d / "eval.csv")
    echo_config(cfg, args, d)
    print(f"{rep.category}: pixel AUC {rep.pixel_auc:.4f}, image AUC {rep.image_auc:.4f}")
    return _check_gate(cfg, rep.pixel_auc, rep.image_auc)


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    d = out_dir(args)
    plan = AblationPlan.desk() if args.plan == "desk" else AblationPlan()
    if args.data:
        raise UsageError("ablate runs on the synthetic corpus; use train + eval for external data")
    run = run_desk(cfg, plan)
    write_report_csv(run.reports, d / "ablation.csv")
    echo_config(cfg, args, d)
    for r in run.reports:
        print(f"{r.tags['mode']}: pixel AUC {r.pixel_auc:.4f}, image AUC {r.image_auc:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = resolve_config(args)
    d = out_dir(args)
    bundle = load_bundle(args.bundle)
    size = _bundle_size(bundle, cfg)
    dual = None if not cfg.baseline_only else False
    failures = 0
    records = []
    for path in args.images:
        p = Path(path)
        try:
            x = read_image(p, size)[None]
        except IngestionError as exc:
            print(f"error: {exc}", file=sys.stderr)
            failures += 1
            continue
        res = infer(bundle, x, dual=dual, normalize_maps=cfg.normalize_maps)
        sub = d / p.stem
        sub.mkdir(parents=True, exist_ok=True)
        save_heatmap_png(res.final[0], sub / "final.png")
        for name, m in res.per_level_maps().items():
            save_heatmap_png(m[0], sub / f"{name}.png")
        for pair, att in (("A", res.attention_a), ("B", res.attention_b)):
            for l, a in att.items():
                save_heatmap_png(a[0], sub / f"attention_{pair}_1_{l}.png")
        dump_raw_maps(res, 0, sub / "maps.rarc", {"image": str(p)})
        score = float(res.scores[0])
        records.append(f"{p}\t{score!r}")
        print(f"{p}\t{score!r}")
    with open(d / "scores.tsv", "w") as fh:
        fh.write("".join(r + "\n" for r in records))
    echo_config(cfg, args, d)
    return EXIT_PARTIAL if failures else EXIT_OK


COMMANDS = {"gen-corpus": cmd_gen_corpus, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "infer": cmd_infer}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run config (overrides --config)")
    short = {v: k for k, v in ALIASES.items()}
    for name, t in RunConfig.field_types().items():
        flags = [f"--{name.replace('_', '-')}"]
        if name in short:
            flags.insert(0, f"--{short[name]}")
        if t is bool:
            g.add_argument(*flags, dest="cfg_" + name, nargs="?", const="on", default=None,
                           metavar="on|off")
        else:
            g.add_argument(*flags, dest="cfg_" + name, default=None, metavar=t.__name__.upper())


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rstpm", description="Student-teacher feature-pyramid anomaly detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, out_required=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", required=out_required,
                       help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command> or runs/<command>)")
        _add_config_flags(p)
        return p

    add("gen-corpus", "write the synthetic corpus in MVTec layout", out_required=True)
    add("pretrain", "pretrain and freeze both teachers on the texture pretext task")
    p = add("train", "train student-A and (unless --baseline-only) student-B")
    p.add_argument("--data", help="MVTec-layout root; the synthetic corpus when omitted")
    p.add_argument("--teachers", help="directory with teacher_a.bnd and teacher_b.bnd")
    p = add("eval", "pixel and image AUC of a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data")
    p = add("ablate", "train and score the ablation grid on the synthetic corpus")
    p.add_argument("--plan", choices=("desk", "full"), default="desk")
    p.add_argument("--data")
    p = add("infer", "anomaly maps, heatmaps and scores for individual images")
    p.add_argument("--bundle", required=True)
    p.add_argument("images", nargs="+")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"rstpm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"rstpm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, IngestionError, FormatError, StateError, ShapeError,
            UndefinedMetricError) as exc:
        print(f"rstpm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"rstpm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
