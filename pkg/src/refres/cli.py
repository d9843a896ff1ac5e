"""Command-line entry point: generate corpora, train, evaluate, compare.

Every command writes its artifacts plus a manifest.json into one output
directory.  The manifest records the command line, the fully resolved
config, input paths with content hashes, produced files, and seeds; re-running
with the same config and seeds reproduces every artifact bitwise (the
manifest's started_at / wall_clock_s fields are the only volatile parts).

Config precedence: key=value config file, then repeatable --set overrides,
then explicit flags.  Exit codes: 0 success, 2 usage or input problems,
1 internal failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
import traceback
import types
import typing
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .datamodel import LABELS, SchemaError, load_corpus
from .encoder import EncoderConfig, Vocab
from .evaluation import (
    EvalConfig,
    EvalReport,
    EvaluationError,
    evaluate_mrr,
    format_report,
    load_report,
    utterance_length_ablation,
    write_report,
)
from .checkpoint import CheckpointError
from .fusion import FusionConfig
from .presets import full_scale, toy_scale
from .synthgen import GenerationError, SynthConfig, generate_to_dir, resolvability_audit
from .training import (
    TrainConfig,
    labels_for,
    restore_model,
    summarize_seeds,
    train_mrr,
    train_trr,
)

ENV_OUTPUT_ROOT = "REFRES_OUTPUT_ROOT"


class CliError(ValueError):
    """User-facing input problem; maps to exit code 2."""


# ----------------------------------------------------------- config files

def parse_kv_file(path: Path) -> dict[str, str]:
    """Key=value lines; '#' starts a comment; blank lines ignored."""
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _convert(text: str, ann) -> object:
    if ann is int:
        return int(text)
    if ann is float:
        return float(text)
    if ann is bool:
        return text.lower() in ("1", "true", "yes", "on")
    if ann is str:
        return text
    origin = typing.get_origin(ann)
    if origin is tuple:
        inner = typing.get_args(ann)
        elem = inner[0] if inner else str
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(_convert(p, elem) for p in parts)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(ann) if a is not type(None)]
        if text.lower() in ("none", "null", ""):
            return None
        return _convert(text, args[0])
    raise CliError(f"cannot parse a value of type {ann}")


def coerce_config(cls, raw: dict[str, str], base=None):
    """Build (or update) a config dataclass from string key=value pairs."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise CliError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    converted = {}
    for key, value in raw.items():
        try:
            converted[key] = _convert(value, hints[key])
        except (ValueError, TypeError) as exc:
            raise CliError(f"bad value for {key}: {value!r} ({exc})") from exc
    if base is not None:
        return dataclasses.replace(base, **converted)
    return cls(**converted)


def split_namespaces(raw: dict[str, str]) -> tuple[dict, dict, dict]:
    """Split 'encoder.*' and 'fusion.*' keys from plain training keys."""
    plain, enc, fus = {}, {}, {}
    for key, value in raw.items():
        if key.startswith("encoder."):
            enc[key[len("encoder."):]] = value
        elif key.startswith("fusion."):
            fus[key[len("fusion."):]] = value
        else:
            plain[key] = value
    return plain, enc, fus


# -------------------------------------------------------------- manifest

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, argv: list[str], config: dict,
                   inputs: dict, outputs: list[Path], seeds: list[int],
                   t0: float) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(str(p.relative_to(out_dir)) for p in outputs),
        "seeds": seeds,
        "version": __version__,
        "started_at": datetime.fromtimestamp(t0, tz=timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - t0, 3),
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def resolve_out(arg_out: str | None, command: str) -> Path:
    root = Path(os.environ.get(ENV_OUTPUT_ROOT, "runs"))
    out = Path(arg_out) if arg_out else root / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


# -------------------------------------------------------------- commands

def cmd_synth(args, argv: list[str]) -> int:
    t0 = time.time()
    raw: dict[str, str] = {}
    if args.config:
        raw.update(parse_kv_file(Path(args.config)))
    raw.update(parse_overrides(args.set))
    if args.dialogues is not None:
        raw["dialogues"] = str(args.dialogues)
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    config = coerce_config(SynthConfig, raw)
    out = resolve_out(args.out, "synth")
    corpus_path, stats = generate_to_dir(config, out)
    docs = load_corpus(corpus_path)
    audit = resolvability_audit(docs, window_utterances=args.audit_window)
    audit_path = out / "audit.json"
    with open(audit_path, "w", encoding="utf-8") as fh:
        json.dump({"ok": audit.ok, "problems": audit.problems,
                   "chain_lengths": audit.chain_lengths},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not audit.ok:
        for problem in audit.problems:
            print(f"audit: {problem}", file=sys.stderr)
        print(f"audit failed with {len(audit.problems)} problems", file=sys.stderr)
        return 1
    outputs = [corpus_path, out / "stats.json", audit_path]
    outputs += sorted((out / "features").glob("*"))
    write_manifest(out, "synth", argv, dataclasses.asdict(config),
                   inputs={}, outputs=outputs, seeds=[config.seed], t0=t0)
    print(f"wrote {stats.dialogues} dialogues, {stats.mentions} mentions "
          f"to {corpus_path}")
    return 0


def cmd_train(args, argv: list[str]) -> int:
    t0 = time.time()
    corpus_path = _require_file(args.corpus, "corpus")
    docs = load_corpus(corpus_path)
    vocab = Vocab.build(docs)

    if args.preset == "full":
        enc_cfg, fus_cfg, train_cfg = full_scale()
    else:
        enc_cfg, fus_cfg, train_cfg = toy_scale()
    raw: dict[str, str] = {}
    if args.config:
        raw.update(parse_kv_file(Path(args.config)))
    raw.update(parse_overrides(args.set))
    plain, enc_raw, fus_raw = split_namespaces(raw)
    if args.seed is not None:
        plain["seed"] = str(args.seed)
    train_cfg = coerce_config(TrainConfig, plain, base=train_cfg)
    enc_cfg = coerce_config(EncoderConfig, enc_raw, base=enc_cfg)
    fus_cfg = coerce_config(FusionConfig, fus_raw, base=fus_cfg)

    preset_name = args.labels or ("trr" if args.task == "trr" else "full")
    active = labels_for(args.task, preset_name)
    out = resolve_out(args.out, "train")

    inputs: dict = {"corpus": {"path": str(corpus_path),
                               "sha256": _sha256(corpus_path)}}
    init_encoder = None
    if args.init_encoder:
        if args.task != "mrr":
            raise CliError("--init-encoder only applies to the mrr task")
        init_path = _require_file(args.init_encoder, "init checkpoint")
        init_encoder = str(init_path)
        inputs["init_encoder"] = {"path": str(init_path),
                                  "sha256": _sha256(init_path)}

    if args.seeds < 1:
        raise CliError(f"--seeds must be >= 1, got {args.seeds}")
    seeds = [train_cfg.seed + i for i in range(args.seeds)]
    outputs: list[Path] = []
    final_losses: list[float] = []
    per_seed: dict[str, dict] = {}
    for seed in seeds:
        cfg = dataclasses.replace(train_cfg, seed=seed)
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        ckpt = seed_dir / "checkpoint.rfck"
        log_path = seed_dir / "train_log.jsonl"
        if args.task == "trr":
            result = train_trr(docs, vocab, enc_cfg, cfg, active_labels=active,
                               checkpoint_path=ckpt, log_path=log_path)
        else:
            result = train_mrr(docs, vocab, enc_cfg, fus_cfg, cfg,
                               init_encoder=init_encoder, active_labels=active,
                               checkpoint_path=ckpt, log_path=log_path)
        loss = result.history[-1]["loss"]
        final_losses.append(loss)
        per_seed[str(seed)] = {"final_loss": loss,
                               "steps": result.steps,
                               "checkpoint": str(ckpt.relative_to(out))}
        outputs += [ckpt, log_path]
        print(f"seed {seed}: {result.steps} steps, final loss {loss:.6f}")

    summary = {"task": args.task, "labels": preset_name, "seeds": seeds,
               "final_loss": summarize_seeds(final_losses),
               "per_seed": per_seed}
    summary_path = out / "summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(summary_path)

    config_snapshot = {
        "task": args.task, "preset": args.preset, "labels": preset_name,
        "active_labels": [l.value for l in active],
        "train": dataclasses.asdict(train_cfg),
        "encoder": dataclasses.asdict(enc_cfg),
        "fusion": dataclasses.asdict(fus_cfg) if args.task == "mrr" else None,
        "init_encoder": init_encoder,
    }
    write_manifest(out, "train", argv, config_snapshot, inputs, outputs,
                   seeds, t0)
    return 0


def _parse_int_list(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.replace(",", " ").split() if p)
    except ValueError as exc:
        raise CliError(f"bad {what}: {text!r}") from exc


def cmd_eval(args, argv: list[str]) -> int:
    t0 = time.time()
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    corpus_path = _require_file(args.corpus, "corpus")
    model, meta = restore_model(ckpt_path)
    task = meta.config.get("task")
    if task != "mrr":
        raise CliError(f"grounding evaluation needs an mrr checkpoint, "
                       f"got task {task!r}")
    docs = load_corpus(corpus_path)
    config = EvalConfig(k_values=_parse_int_list(args.k, "--k"),
                        iou_threshold=args.iou,
                        window_utterances=args.window)
    report = evaluate_mrr(model, docs, config)
    out = resolve_out(args.out, "eval")
    outputs = [write_report(report, out / "report.json",
                            out / "report.csv" if args.csv else None)]
    if args.csv:
        outputs.append(out / "report.csv")
    table_path = out / "report.txt"
    table_path.write_text(format_report(report) + "\n", encoding="utf-8")
    outputs.append(table_path)
    print(format_report(report))

    if args.ablate_utterance_length:
        lengths = _parse_int_list(args.ablate_utterance_length,
                                  "--ablate-utterance-length")
        sweep = utterance_length_ablation(model, docs, lengths, config,
                                          relations=LABELS)
        data = {"lengths": list(lengths),
                "reports": {str(l): r.as_dict() for l, r in sweep.items()}}
        ablation_path = out / "ablation.json"
        with open(ablation_path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        blocks = [f"window={l}\n{format_report(sweep[l])}" for l in lengths]
        (out / "ablation.txt").write_text("\n\n".join(blocks) + "\n",
                                          encoding="utf-8")
        outputs += [ablation_path, out / "ablation.txt"]

    if args.confidence:
        conf_path = out / "confidence.json"
        with open(conf_path, "w", encoding="utf-8") as fh:
            json.dump(report.confidence, fh, indent=2, sort_keys=True)
            fh.write("\n")
        outputs.append(conf_path)

    inputs = {"checkpoint": {"path": str(ckpt_path), "sha256": _sha256(ckpt_path)},
              "corpus": {"path": str(corpus_path), "sha256": _sha256(corpus_path)}}
    write_manifest(out, "eval", argv, config.as_dict(), inputs, outputs,
                   seeds=[meta.seed], t0=t0)
    return 0


def _load_report_checked(path: Path) -> EvalReport:
    try:
        report = load_report(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: not a report file ({exc})") from exc
    if not report.rows:
        raise CliError(f"{path}: report has no rows")
    return report


def cmd_report(args, argv: list[str]) -> int:
    t0 = time.time()
    paths = [_require_file(p, "report") for p in args.reports]
    loaded: list[tuple[str, EvalReport]] = []
    seen: dict[str, int] = {}
    for path in paths:
        key = str(path)
        seen[key] = seen.get(key, 0) + 1
        name = key if seen[key] == 1 else f"{key}#{seen[key]}"
        loaded.append((name, _load_report_checked(path)))
    by_name = dict(loaded)
    baseline_key = args.baseline or loaded[0][0]
    if baseline_key not in by_name:
        baseline_path = _require_file(baseline_key, "baseline report")
        baseline = _load_report_checked(baseline_path)
    else:
        baseline = by_name[baseline_key]
    out = resolve_out(args.out, "report")

    candidates = [(n, r) for n, r in loaded if n != baseline_key]
    if not candidates:
        # a single input compares against itself; deltas are all zero
        candidates = loaded
    names = [n for n, _ in candidates]
    reports = dict(candidates)
    rows = []
    for base_row in baseline.rows:
        entry = {"relation": base_row.relation, "category": base_row.category,
                 "k": base_row.k, "baseline": base_row.recall,
                 "values": {}, "deltas": {}}
        for name in names:
            other = reports[name].row(base_row.relation, base_row.category,
                                      base_row.k)
            if other is None:
                continue
            entry["values"][name] = other.recall
            entry["deltas"][name] = other.recall - base_row.recall
        rows.append(entry)

    comparison = {"baseline": baseline_key, "reports": names, "rows": rows}
    comp_path = out / "comparison.json"
    with open(comp_path, "w", encoding="utf-8") as fh:
        json.dump(comparison, fh, indent=2, sort_keys=True)
        fh.write("\n")

    lines = [f"baseline: {baseline_key}"]
    header = f"{'relation':<10}{'category':<10}{'k':>4}{'base':>9}"
    for i, name in enumerate(names):
        header += f"{'r' + str(i + 1):>9}{'delta' + str(i + 1):>9}"
    lines += [header, "-" * len(header)]
    for entry in rows:
        line = (f"{entry['relation']:<10}{entry['category']:<10}"
                f"{entry['k']:>4}{entry['baseline']:>9.3f}")
        for name in names:
            if name in entry["values"]:
                line += (f"{entry['values'][name]:>9.3f}"
                         f"{entry['deltas'][name]:>+9.3f}")
            else:
                line += f"{'-':>9}{'-':>9}"
        lines.append(line)
    for i, name in enumerate(names):
        lines.append(f"r{i + 1}: {name}")
    txt_path = out / "comparison.txt"
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))

    outputs = [comp_path, txt_path]
    outputs += _plots({baseline_key: baseline, **reports}, baseline_key,
                      args.ablation or [], out)
    inputs = {str(p): {"sha256": _sha256(p)} for p in paths}
    write_manifest(out, "report", argv, {"baseline": baseline_key},
                   inputs, outputs, seeds=[], t0=t0)
    return 0


def _plots(reports: dict[str, EvalReport], baseline_key: str,
           ablation_paths: list[str], out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written: list[Path] = []
    with_conf = {n: r for n, r in reports.items()
                 if r.confidence and r.confidence.get("n", 0) > 0}
    if with_conf:
        fig, ax = plt.subplots(figsize=(7.0, 4.0))
        for name, report in with_conf.items():
            qs = report.confidence["quantiles"]
            xs = sorted(float(q) for q in qs)
            ax.plot(xs, [qs[f"{q:.2f}"] for q in xs], marker="o",
                    label=Path(name).parent.name or name)
        ax.set_xlabel("quantile")
        ax.set_ylabel("confidence")
        ax.set_title("confidence distribution")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / "confidence_distribution.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    curves = {}
    for raw_path in ablation_paths:
        path = _require_file(raw_path, "ablation file")
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        series = []
        for length in data["lengths"]:
            rows = data["reports"][str(length)]["rows"]
            pick = None
            for row in rows:
                if row["category"] == "pronoun" and row["k"] == 1:
                    pick = row["recall"]
                    break
            if pick is None:
                for row in rows:
                    if row["category"] == "overall" and row["k"] == 1:
                        pick = row["recall"]
                        break
            series.append((length, pick))
        curves[str(path)] = series
    if curves:
        fig, ax = plt.subplots(figsize=(7.0, 4.0))
        for name, series in curves.items():
            xs = [l for l, _ in series]
            ys = [r for _, r in series]
            ax.plot(xs, ys, marker="o", label=Path(name).parent.name or name)
        ax.set_xlabel("window length (utterances)")
        ax.set_ylabel("R@1")
        ax.set_title("recall vs window length")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out / "recall_vs_length.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


# -------------------------------------------------------------- dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refres",
        description="Reference resolution over synthetic grounded dialogues: "
                    "corpus generation, staged training, recall evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dialogue corpus")
    sp.add_argument("--config", help="key=value config file")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    sp.add_argument("--out", help=f"output dir (default ${ENV_OUTPUT_ROOT}/synth)")
    sp.add_argument("--dialogues", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--audit-window", type=int, default=3)

    tp = sub.add_parser("train", help="train a model, optionally over several seeds")
    tp.add_argument("--task", required=True, choices=("trr", "mrr"))
    tp.add_argument("--corpus", required=True)
    tp.add_argument("--config", help="key=value config file; encoder.* and "
                                     "fusion.* prefixes reach those configs")
    tp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    tp.add_argument("--out")
    tp.add_argument("--preset", choices=("toy", "full"), default="toy")
    tp.add_argument("--labels",
                    choices=("coref", "pas-ba", "trr", "direct-only", "full"),
                    help="label ablation preset (default: all labels of the task)")
    tp.add_argument("--init-encoder", metavar="CHECKPOINT",
                    help="warm-start the encoder from this checkpoint (mrr only)")
    tp.add_argument("--seeds", type=int, default=1,
                    help="train N consecutive seeds and average the summary")
    tp.add_argument("--seed", type=int, help="base seed")

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--corpus", required=True)
    ep.add_argument("--out")
    ep.add_argument("--window", type=int, default=1)
    ep.add_argument("--k", default="1,5,10")
    ep.add_argument("--iou", type=float, default=0.5)
    ep.add_argument("--csv", action="store_true")
    ep.add_argument("--ablate-utterance-length", metavar="LENGTHS",
                    help="comma-separated window lengths to sweep")
    ep.add_argument("--confidence", action="store_true",
                    help="write confidence statistics to their own file")

    rp = sub.add_parser("report", help="compare reports against a baseline")
    rp.add_argument("reports", nargs="+")
    rp.add_argument("--baseline", help="baseline report path (default: first)")
    rp.add_argument("--ablation", action="append",
                    help="ablation.json file to plot (repeatable)")
    rp.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"synth": cmd_synth, "train": cmd_train,
                "eval": cmd_eval, "report": cmd_report}
    try:
        return handlers[args.command](args, argv)
    except (CliError, SchemaError, GenerationError, EvaluationError,
            CheckpointError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
