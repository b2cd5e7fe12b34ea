"""Command-line entry point: ``fgam <subcommand> [options]``.

Subcommands share one run configuration. Values come from built-in defaults,
then an optional flat ``key = value`` config file (``--config``), then
``--set key=value`` pairs and the dedicated flags. All randomness is derived
from the single ``seed`` key.

Output directory layout::

    corpus/            generated executables + manifest.tsv
    models/            image.ckpt, byteseq.ckpt, train.txt
    attack/<method>_<rate>/
                       <id>.adv, <id>.adv.json (injection record),
                       traces.jsonl, summary.txt, images/ (--dump-images)
    reports/           evaluate.txt, evaluate.jsonl, stats.txt
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from fgam import corpus, evaluation, imaging
from fgam.attack import AttackConfig, AttackTrace, StopReason
from fgam.errors import FgamError, MissingArtifact, UsageError
from fgam.manipulations import InjectionRecord, Method
from fgam.neural import ByteSeqNet, ImageConvNet, TrainConfig, load, save, train
from fgam.seeding import derive_seed

log = logging.getLogger("fgam")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    default: object
    parse: Callable[[str], object]
    doc: str


KEYS: dict[str, Key] = {
    "seed": Key(0, int, "root seed; every subsystem seed is derived from it"),
    "corpus.n_malware": Key(200, int, "class-A (malware analogue) file count"),
    "corpus.n_benign": Key(200, int, "class-B (benign analogue) file count"),
    "corpus.min_size": Key(4 * 1024, int, "smallest generated file size in bytes"),
    "corpus.max_size": Key(60 * 1024, int, "largest generated file size in bytes"),
    "corpus.split_ratio": Key(0.7, float, "train fraction of the stratified split"),
    "corpus.pe32_plus_fraction": Key(0.2, float, "fraction of PE32+ files"),
    "corpus.overlay_fraction": Key(0.1, float, "fraction of files carrying an overlay"),
    "image.input_size": Key(64, int, "side of the square model input"),
    "image.channels": Key((8, 16, 16), _ints, "conv channels per block"),
    "image.head": Key("lse", str, "global pooling head: lse, gmp, gap or flatten"),
    "image.beta": Key(4.0, float, "sharpness of the lse head"),
    "image.epochs": Key(30, int, "training epochs"),
    "image.learning_rate": Key(0.01, float, "initial Adam step"),
    "image.weight_decay": Key(1e-4, float, "L2 penalty"),
    "byteseq.max_len": Key(4096, int, "byte sequence length (truncate/pad)"),
    "byteseq.window": Key(32, int, "conv window and stride"),
    "byteseq.filters": Key(16, int, "gated conv filters"),
    "byteseq.epochs": Key(15, int, "training epochs"),
    "byteseq.learning_rate": Key(0.01, float, "initial Adam step"),
    "byteseq.weight_decay": Key(1e-2, float, "L2 penalty"),
    "train.batch_size": Key(16, int, "mini-batch size for both models"),
    "attack.rate": Key(0.1, float, "injection rate (perturbation bytes / file bytes)"),
    "attack.method": Key("padding", str, "padding or inject-section"),
    "attack.epsilon": Key(64.0, float, "FGSM step size in pixel units"),
    "attack.max_iterations": Key(20, int, "gradient rounds T"),
    "attack.stop_threshold": Key(0.5, float, "score under which the attack succeeds"),
    "attack.speed_floor": Key(0.001, float, "early stop when the descent speed falls below"),
    "attack.speed_window": Key(5, int, "recent scores used for the descent speed"),
    "attack.inner_cap": Key(50, int, "FGSM steps allowed per gradient round"),
    "attack.section_name": Key(".rsrc", str, "name of the injected section"),
    "attack.max_samples": Key(60, int, "detected class-A files to attack"),
    "evaluate.rates": Key((0.05, 0.1, 0.2, 0.5), _floats, "sweep rates"),
    "evaluate.methods": Key(("padding", "inject-section"), _words, "sweep methods"),
    "evaluate.checkpoints": Key((0, 5, 10, 20), _ints, "iteration counts k reported as MR(k)"),
    "dump_images": Key(False, _bool, "write PGM images of originals and adversarial files"),
}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, object]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, value, f"{origin}:{lineno}")
    return values


def _coerce(key: str, value: str, where: str) -> object:
    if key not in KEYS:
        raise UsageError(f"{where}: unknown config key {key!r}")
    try:
        return KEYS[key].parse(value)
    except ValueError as exc:
        raise UsageError(f"{where}: bad value for {key}: {exc}") from None


def render_config(values: dict[str, object]) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(map(str, v))
        return str(v).lower() if isinstance(v, bool) else str(v)
    return "".join(f"{k} = {fmt(values[k])}\n" for k in KEYS)


class RunConfig:
    """Resolved key/value configuration plus the output directory."""

    def __init__(self, values: dict[str, object], out: Path):
        self.values = {k: spec.default for k, spec in KEYS.items()}
        self.values.update(values)
        self.out = Path(out)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def text(self) -> str:
        return render_config(self.values)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def seed(self, *parts) -> int:
        return derive_seed(self["seed"], *parts)

    def corpus_spec(self) -> corpus.CorpusSpec:
        return corpus.CorpusSpec(
            n_malware=self["corpus.n_malware"], n_benign=self["corpus.n_benign"],
            min_size=self["corpus.min_size"], max_size=self["corpus.max_size"],
            seed=self.seed("corpus"), split_ratio=self["corpus.split_ratio"],
            pe32_plus_fraction=self["corpus.pe32_plus_fraction"],
            overlay_fraction=self["corpus.overlay_fraction"],
        )

    def attack_config(self, rate: float | None = None, method: str | None = None) -> AttackConfig:
        return AttackConfig(
            rate=self["attack.rate"] if rate is None else rate,
            method=Method(self["attack.method"] if method is None else method),
            epsilon=self["attack.epsilon"], max_iterations=self["attack.max_iterations"],
            stop_threshold=self["attack.stop_threshold"], speed_floor=self["attack.speed_floor"],
            speed_window=self["attack.speed_window"], inner_cap=self["attack.inner_cap"],
            section_name=self["attack.section_name"].encode("latin-1"),
            seed=self.seed("attack"),
        )


# -- shared pipeline steps ----------------------------------------------------

def _corpus_dir(cfg: RunConfig) -> Path:
    return cfg.out / "corpus"


def _load_corpus(cfg: RunConfig) -> list[corpus.Sample]:
    if not (_corpus_dir(cfg) / "manifest.tsv").exists():
        raise MissingArtifact(f"no corpus under {_corpus_dir(cfg)}; run gen-corpus first")
    return corpus.read_corpus(_corpus_dir(cfg))


def _manifest_hash(cfg: RunConfig) -> str:
    path = _corpus_dir(cfg) / "manifest.tsv"
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16] if path.exists() else "-"


def _load_model(cfg: RunConfig, name: str):
    path = cfg.out / "models" / f"{name}.ckpt"
    if not path.exists():
        raise MissingArtifact(f"no checkpoint at {path}; run train first")
    return load(path)


def _targets(cfg: RunConfig, model: ImageConvNet) -> list[corpus.Sample]:
    """Class-A files the image model detects, in id order, capped at attack.max_samples."""
    malware = sorted((s for s in _load_corpus(cfg) if s.label == corpus.MALWARE), key=lambda s: s.id)
    scores = evaluation.score_files(model, [s.data for s in malware])
    detected = [s for s, v in zip(malware, scores) if v >= 0.5]
    return detected[: cfg["attack.max_samples"]]


def _rate_tag(rate: float) -> str:
    return f"{rate:g}".replace(".", "p")


def _cohort_name(rate: float) -> str:
    return f"adv{100 * rate:g}"


def _attack_dir(cfg: RunConfig, method: str, rate: float) -> Path:
    return cfg.out / "attack" / f"{Method(method).value}_{_rate_tag(rate)}"


def _trace_line(sid: str, tr: AttackTrace) -> dict:
    return {
        "sample_id": sid,
        "original_score": tr.original_score,
        "scores": tr.scores,
        "inner_steps": tr.inner_steps,
        "inner_exhausted": tr.inner_exhausted,
        "speeds": tr.speeds,
        "stop_reason": tr.stop_reason.value,
        "t": tr.t,
        "record": tr.record.to_dict(),
    }


def _run_attack_set(cfg: RunConfig, model: ImageConvNet, samples: list[corpus.Sample],
                    method: str, rate: float) -> list[AttackTrace]:
    acfg = cfg.attack_config(rate, method)
    traces = evaluation.run_attacks(model, [s.data for s in samples], [s.id for s in samples], acfg)
    directory = _attack_dir(cfg, method, rate)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for s, tr in zip(samples, traces):
        (directory / f"{s.id}.adv").write_bytes(tr.adversarial)
        tr.record.save(directory / f"{s.id}.adv.json")
        lines.append(json.dumps(_trace_line(s.id, tr), sort_keys=True))
        if cfg["dump_images"]:
            images = directory / "images"
            images.mkdir(exist_ok=True)
            imaging.write_pgm(imaging.binary2img(s.data), images / f"{s.id}.orig.pgm")
            imaging.write_pgm(imaging.binary2img(tr.adversarial), images / f"{s.id}.adv.pgm")
            imaging.write_pgm(imaging.to_model_input(tr.adversarial, model.input_size),
                              images / f"{s.id}.adv.input.pgm")
    (directory / "traces.jsonl").write_text("".join(line + "\n" for line in lines))
    counts = Counter(tr.stop_reason.value for tr in traces)
    summary = [
        f"# config_hash: {cfg.hash}",
        f"# corpus_manifest_hash: {_manifest_hash(cfg)}",
        f"method\t{Method(method).value}",
        f"rate\t{rate:g}",
        f"samples\t{len(traces)}",
        f"MR({acfg.max_iterations})\t{evaluation.mr_at(traces, acfg.max_iterations):.4f}",
        "stop_reasons\t" + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())),
    ]
    (directory / "summary.txt").write_text("\n".join(summary) + "\n")
    return traces


@dataclass
class _StoredTrace:
    """Just enough of an attack trace, reloaded from traces.jsonl, to compute MR(k)."""

    scores: list
    stop_reason: StopReason
    original_score: float
    adversarial: bytes

    t = AttackTrace.t
    success = AttackTrace.success
    final_score = AttackTrace.final_score
    evaded_within = AttackTrace.evaded_within


def _load_attack_set(directory: Path) -> tuple[list[str], list[_StoredTrace]]:
    ids, traces = [], []
    for line in (directory / "traces.jsonl").read_text().splitlines():
        row = json.loads(line)
        InjectionRecord.load(directory / f"{row['sample_id']}.adv.json")
        ids.append(row["sample_id"])
        traces.append(_StoredTrace(row["scores"], StopReason(row["stop_reason"]), row["original_score"],
                                   (directory / f"{row['sample_id']}.adv").read_bytes()))
    return ids, traces


def _report_header(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "config_hash": cfg.hash, "corpus_manifest_hash": _manifest_hash(cfg)}


# -- subcommands --------------------------------------------------------------

def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    samples = corpus.generate(cfg.corpus_spec())
    manifest = corpus.write_corpus(samples, _corpus_dir(cfg))
    print(f"wrote {len(samples)} files, manifest {manifest} ({_manifest_hash(cfg)})")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    samples = _load_corpus(cfg)
    train_set, test_set = corpus.split(samples, cfg["corpus.split_ratio"], cfg.seed("split"))
    y_train = np.array([s.label for s in train_set], dtype=np.float64)
    y_test = np.array([s.label for s in test_set], dtype=np.float64)
    models_dir = cfg.out / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}: {v}" for k, v in _report_header(cfg, "train").items()]

    archs = ("image", "byteseq") if args.arch == "both" else (args.arch,)
    for arch in archs:
        if arch == "image":
            model = ImageConvNet.init(
                cfg["image.input_size"], channels=cfg["image.channels"], head=cfg["image.head"],
                beta=cfg["image.beta"], seed=cfg.seed("init", "image"))
            to_input = lambda s: imaging.to_model_input(s.data, model.input_size)  # noqa: E731
        else:
            model = ByteSeqNet.init(
                cfg["byteseq.max_len"], window=cfg["byteseq.window"], filters=cfg["byteseq.filters"],
                seed=cfg.seed("init", "byteseq"))
            to_input = lambda s: s.data  # noqa: E731
        tcfg = TrainConfig(
            epochs=cfg[f"{arch}.epochs"], batch_size=cfg["train.batch_size"],
            learning_rate=cfg[f"{arch}.learning_rate"], weight_decay=cfg[f"{arch}.weight_decay"],
            seed=cfg.seed("train", arch))
        x_train = model.prepare([to_input(s) for s in train_set])
        x_test = model.prepare([to_input(s) for s in test_set])
        model = train(model, x_train, y_train, x_test, y_test, tcfg)
        save(model, models_dir / f"{arch}.ckpt")
        acc = model.metadata["final_accuracy"]
        lines.append(f"{arch}\taccuracy={acc:.4f}\tbest_epoch={model.metadata['best_epoch']}")
        print(f"{arch}: held-out accuracy {acc:.4f}")
    (models_dir / "train.txt").write_text("\n".join(lines) + "\n")
    return 0


def _explicit_targets(cfg: RunConfig, paths: list[str]) -> list[corpus.Sample]:
    return [corpus.Sample(Path(p).stem, corpus.MALWARE, Path(p).read_bytes(), 0) for p in paths]


def cmd_attack(cfg: RunConfig, args) -> int:
    model = _load_model(cfg, "image")
    samples = _explicit_targets(cfg, args.files) if args.files else _targets(cfg, model)
    method, rate = cfg["attack.method"], cfg["attack.rate"]
    traces = _run_attack_set(cfg, model, samples, method, rate)
    T = cfg["attack.max_iterations"]
    print(f"{Method(method).value} rate {rate:g}: {len(traces)} files, MR({T}) = "
          f"{evaluation.mr_at(traces, T):.4f} -> {_attack_dir(cfg, method, rate)}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    model = _load_model(cfg, "image")
    transfer_model = _load_model(cfg, "byteseq")
    samples = _targets(cfg, model)
    by_id = {s.id: s for s in samples}
    report = evaluation.EvalReport(header=_report_header(cfg, "evaluate"))
    report.header["samples"] = len(samples)
    ks = cfg["evaluate.checkpoints"]

    if args.sweep:
        grid = [(m, r) for m in cfg["evaluate.methods"] for r in cfg["evaluate.rates"]]
    else:
        grid = []
        for d in sorted((cfg.out / "attack").glob("*/traces.jsonl")):
            method, tag = d.parent.name.rsplit("_", 1)
            grid.append((method, float(tag.replace("p", "."))))
        if not grid:
            raise MissingArtifact("no attack results found; run attack first or pass --sweep")

    for method, rate in grid:
        method = Method(method).value
        if args.sweep:
            ids = [s.id for s in samples]
            traces = _run_attack_set(cfg, model, samples, method, rate)
        else:
            ids, traces = _load_attack_set(_attack_dir(cfg, method, rate))
        originals = [by_id[i].data if i in by_id else None for i in ids]
        if any(o is None for o in originals):
            raise UsageError(f"{method} {rate:g}: attack set does not match the current targets")
        key = (method, rate)
        report.mr[key] = {k: evaluation.mr_at(traces, k) for k in ks}
        report.baseline[key] = evaluation.random_baseline(
            model, originals, rate, method, cfg.seed("attack"), ids)
        report.stop_reasons[key] = dict(Counter(tr.stop_reason.value for tr in traces))
        tres = evaluation.transfer_eval(originals, [tr.adversarial for tr in traces], transfer_model)
        report.transfer[(method, rate, cfg["attack.stop_threshold"])] = {
            "target_mr": evaluation.mr_at(traces, cfg["attack.max_iterations"]),
            "transfer_mr": tres.mr, "eligible": tres.n_eligible,
        }
        report.records += [dict(r, method=method, rate=rate)
                           for r in evaluation.trace_records(ids, _cohort_name(rate), traces)]

    reports = cfg.out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "evaluate.txt").write_text(report.to_text())
    (reports / "evaluate.jsonl").write_text(report.records_jsonl())
    (reports / "evaluate.json").write_text(report.summary_json())
    sys.stdout.write(report.to_text())
    return 0


def _cohort_files(cfg: RunConfig, name: str, model: ImageConvNet, method: str) -> list[bytes]:
    if name == "orig":
        return [s.data for s in _targets(cfg, model)]
    if name == "benign":
        return [s.data for s in _load_corpus(cfg) if s.label == corpus.BENIGN]
    if name.startswith("adv") and name[3:].isdigit():
        rate = int(name[3:]) / 100
        directory = _attack_dir(cfg, method, rate)
        if (directory / "traces.jsonl").exists():
            return [tr.adversarial for tr in _load_attack_set(directory)[1]]
        return [tr.adversarial for tr in _run_attack_set(cfg, model, _targets(cfg, model), method, rate)]
    raise UsageError(f"unknown cohort {name!r}; use orig, benign or advNN (NN = rate in percent)")


def cmd_stats(cfg: RunConfig, args) -> int:
    model = _load_model(cfg, "image")
    names = [n.strip() for n in args.cohorts.split(",") if n.strip()]
    if "benign" not in names:
        names.append("benign")
    method = Method(cfg["attack.method"]).value
    cohorts = {n: _cohort_files(cfg, n, model, method) for n in names}
    stats = evaluation.cohort_stats(cohorts, reference="benign")
    header = _report_header(cfg, "stats")
    header["method"] = method
    text = "".join(f"# {k}: {v}\n" for k, v in header.items()) + evaluation.format_cohorts(stats) + "\n"
    reports = cfg.out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "stats.txt").write_text(text)
    sys.stdout.write(text)
    return 0


# -- argument handling --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", default="run", help="output directory (default: ./run)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("--dump-images", action="store_true", help="write PGM debug images")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fgam", description="Gradient-sign adversarial injection toolkit for PE files.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-corpus", parents=[common], help="generate the synthetic corpus")
    p = sub.add_parser("train", parents=[common], help="train the image and byte-sequence detectors")
    p.add_argument("--arch", choices=("image", "byteseq", "both"), default="both")
    p = sub.add_parser("attack", parents=[common], help="attack detected class-A files")
    p.add_argument("--rate", type=float)
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("-T", "--max-iterations", type=int, dest="max_iterations")
    p.add_argument("--epsilon", type=float)
    p.add_argument("files", nargs="*", help="explicit executables (default: corpus targets)")
    p = sub.add_parser("evaluate", parents=[common], help="MR, baseline and transfer report")
    p.add_argument("--sweep", action="store_true", help="run the full method x rate grid")
    p = sub.add_parser("stats", parents=[common], help="size/entropy tables per cohort")
    p.add_argument("--cohorts", default="orig,adv10,adv50")
    p.add_argument("--method", choices=[m.value for m in Method])
    return parser


def resolve_config(args) -> RunConfig:
    values: dict[str, object] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(), str(path)))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        values[key] = _coerce(key, value, "--set")
    flags = {
        "seed": args.seed,
        "attack.rate": getattr(args, "rate", None),
        "attack.method": getattr(args, "method", None),
        "attack.max_iterations": getattr(args, "max_iterations", None),
        "attack.epsilon": getattr(args, "epsilon", None),
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.dump_images:
        values["dump_images"] = True
    return RunConfig(values, Path(args.out))


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
}


def run(argv: list[str] | None = None) -> int:
    """Execute one CLI invocation and return its exit status."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "config.txt").write_text(cfg.text)
        return COMMANDS[args.command](cfg, args)
    except FgamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: [io] {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
