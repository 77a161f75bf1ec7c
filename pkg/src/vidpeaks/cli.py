"""Command-line driver: one config file, deterministic artifacts per config hash."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import SIGNALS, __version__, ctml, embedstore, pipeline, synth, tcav
from .errors import ConfigError, ContractViolation, DataError, NumericalFailure
from .events import parse_event_log, serialize_events
from .experiment import ExperimentConfig, _trained, build_moment_table, make_split, run_experiment, train_all
from .model import TrainConfig
from .signals import K_VALUES, SUBSAMPLE_INTERVAL, TRIM_SECONDS, read_signal_archive, write_signal_archive

log = logging.getLogger("vidpeaks")

PATH_KEYS = ("events", "videos", "manifest", "ctml", "ctml_machine", "requests", "out_dir", "corpus")
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


@dataclass
class RunConfig:
    events: list = field(default_factory=list)
    videos: str | None = None
    manifest: str | None = None
    ctml: str | None = None
    ctml_machine: str | None = None
    requests: str | None = None
    out_dir: str = "runs"
    corpus: str | None = None
    seed: int = 0
    signals: list = field(default_factory=lambda: list(SIGNALS))
    ks: list = field(default_factory=lambda: [10, 5])
    selections: dict = field(default_factory=lambda: {"e_x": list(embedstore.DEFAULT_SELECTION)})
    split: str = "course"
    holdout_field: str | None = None
    test_fraction: float = 0.10
    seeds: list = field(default_factory=lambda: [0])
    variants: list = field(default_factory=lambda: ["full"])
    pooled_lift: bool = True
    trim: int = TRIM_SECONDS
    interval: int = SUBSAMPLE_INTERVAL
    train: dict = field(default_factory=dict)
    tcav: dict = field(default_factory=dict)
    association_alpha: float = 0.01
    synth: dict = field(default_factory=dict)
    endpoint: dict = field(default_factory=dict)
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.events, str):
            self.events = [self.events]
        bad = [k for k in self.ks if k not in K_VALUES]
        if bad:
            raise ConfigError(f"K values {bad} not in {list(K_VALUES)}")
        unknown = [s for s in self.signals if s not in SIGNALS]
        if unknown:
            raise ConfigError(f"unknown signals {unknown}")
        if self.split not in ("course", "field"):
            raise ConfigError(f"split must be 'course' or 'field', got {self.split!r}")
        if self.split == "field" and not self.holdout_field:
            raise ConfigError("field split needs holdout_field")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for key in self.train:
            if key not in {f.name for f in fields(TrainConfig)}:
                raise ConfigError(f"unknown train option {key!r}")

    # -- derived -----------------------------------------------------------

    def hashed_part(self) -> dict:
        d = asdict(self)
        for k in PATH_KEYS + ("threads",):
            d.pop(k)
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_part(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @property
    def run_dir(self):
        return os.path.join(self.out_dir, f"run-{self.config_hash}")

    @property
    def corpus_dir(self):
        return self.corpus or os.path.join(self.out_dir, "corpus")

    def path(self, key):
        """Configured path, else the matching file of the synth corpus."""
        defaults = {
            "events": [os.path.join(self.corpus_dir, "events.jsonl")],
            "videos": os.path.join(self.corpus_dir, "videos.jsonl"),
            "manifest": os.path.join(self.corpus_dir, "embeddings", "manifest.json"),
            "ctml": os.path.join(self.corpus_dir, "ctml_adjudicated.jsonl"),
            "ctml_machine": os.path.join(self.run_dir, "ctml_machine.jsonl"),
            "requests": None,
        }
        value = getattr(self, key)
        return value if value else defaults[key]

    def experiment(self) -> ExperimentConfig:
        try:
            train = TrainConfig(**self.train)
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from None
        return ExperimentConfig(tuple(self.signals), tuple(self.ks), dict(self.selections), self.split,
                                self.holdout_field, self.test_fraction, tuple(self.seeds),
                                tuple(self.variants), train, self.pooled_lift)

    def tcav_options(self) -> dict:
        sel = next(iter(self.selections))
        opts = {"signal": "PausedAt", "K": self.ks[0], "selection": sel, "variant": "full",
                "seed": self.seeds[0], "layers": list(self.selections[sel]) + ["h1"],
                "repetitions": tcav.REPETITIONS, "concepts": list(ctml.FEATURES)}
        unknown = set(self.tcav) - set(opts)
        if unknown:
            raise ConfigError(f"unknown tcav options {sorted(unknown)}")
        opts.update(self.tcav)
        return opts


def load_config(path, overrides: dict) -> RunConfig:
    data = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**data)


# --------------------------------------------------------------------------
# artifact helpers


def _need(path, what):
    if path is None or not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _dump(cfg: RunConfig, name, payload):
    os.makedirs(cfg.run_dir, exist_ok=True)
    payload = {"config_hash": cfg.config_hash, **payload}
    path = os.path.join(cfg.run_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _table_file(cfg: RunConfig, name, header, rows):
    path = os.path.join(cfg.run_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.config_hash}\n")
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(v) for v in row) + "\n")
    return path


def _cell(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return "NA" if not np.isfinite(v) else f"{v:.6f}"
    return str(v)


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _read_hash(path):
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            return json.load(fh).get("config_hash")
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    return first.split("=", 1)[1] if first.startswith("# config_hash=") else None


def _load_archive(cfg):
    path = _need(os.path.join(cfg.run_dir, "signals.jsonl"), "signal archive (run `signals` first)")
    return read_signal_archive(path)


def _load_table(cfg):
    manifest_path = _need(cfg.path("manifest"), "embedding manifest")
    videos_path = _need(cfg.path("videos"), "video metadata")
    videos = _load_archive(cfg)
    manifest = embedstore.open_manifest(manifest_path)
    metas = {m.video_id: m for m in pipeline.read_video_meta(videos_path)}
    return build_moment_table(videos, metas, manifest, cfg.interval), manifest


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args):
    options = {"seed": cfg.seed, **cfg.synth}
    try:
        scfg = synth.SynthConfig.from_dict(options)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth options: {exc}") from None
    out = synth.generate(scfg, cfg.corpus_dir)
    print(f"synth corpus written to {out.directory} ({out.truth.n_lines} event lines)")


def cmd_ingest(cfg: RunConfig, args):
    paths = [_need(p, "event log") for p in cfg.path("events")]
    ing = pipeline.ingest(paths, _need(cfg.path("videos"), "video metadata"))
    os.makedirs(cfg.run_dir, exist_ok=True)
    events = [e for vid in sorted(ing.streams) for u in sorted(ing.streams[vid]) for e in ing.streams[vid][u]]
    with open(os.path.join(cfg.run_dir, "events.clean.jsonl"), "wb") as fh:
        fh.write(serialize_events(events))
    dups = sorted((v, c) for v, c in ing.canonical.items() if v != c)
    _dump(cfg, "ingest.json", {"report": ing.report.to_dict(), "dropped_lines": ing.report.dropped_lines,
                               "duplicates": dups, "videos": len(ing.streams)})
    print(f"ingest: accepted {ing.report.accepted}, dropped {ing.report.dropped_total}, "
          f"{len(dups)} duplicate uploads folded")


def cmd_signals(cfg: RunConfig, args):
    clean = _need(os.path.join(cfg.run_dir, "events.clean.jsonl"), "clean events (run `ingest` first)")
    metas = {m.video_id: m for m in pipeline.read_video_meta(_need(cfg.path("videos"), "video metadata"))}
    with open(clean, "rb") as fh:
        events, _ = parse_event_log(fh)
    streams = {}
    for e in events:
        streams.setdefault(e.video_id, []).append(e)
    ks = sorted(set(cfg.ks))
    videos, skipped = pipeline.build_signal_archive(streams, {v: m.duration for v, m in metas.items()},
                                                    cfg.trim, ks)
    write_signal_archive(os.path.join(cfg.run_dir, "signals.jsonl"), videos)
    _dump(cfg, "signals.json", {"videos": len(videos), "skipped": skipped})
    ctml_path = cfg.path("ctml")
    if ctml_path and os.path.exists(ctml_path):
        write_associations(cfg, videos, ctml.read_ctml(ctml_path))
    print(f"signals: {len(videos)} videos, {len(skipped)} skipped")


def write_associations(cfg, videos, records):
    lookup = {}
    for v in videos:
        for i, t in enumerate(v.seconds):
            lookup[(v.video_id, int(t))] = {s: float(v.ranks[s][i]) for s in v.ranks}
    means, tests = ctml.association_summary(records, lookup, cfg.signals, cfg.association_alpha)
    _dump(cfg, "associations.json", {"alpha": cfg.association_alpha,
                                     "level_means": _clean([asdict(m) for m in means]),
                                     "tests": _clean([asdict(t) for t in tests])})
    _table_file(cfg, "fig4_associations.tsv", ["feature", "signal", "level", "n", "mean_rank"],
                [(m.feature, m.signal, m.level, m.n, m.mean_rank) for m in means])


def cmd_train(cfg: RunConfig, args):
    table, manifest = _load_table(cfg)
    paths = train_all(table, manifest, cfg.experiment(), os.path.join(cfg.run_dir, "checkpoints"))
    print(f"train: {len(paths)} checkpoints in {os.path.join(cfg.run_dir, 'checkpoints')}")


def cmd_evaluate(cfg: RunConfig, args):
    table, manifest = _load_table(cfg)
    scores = []
    reports = run_experiment(table, manifest, cfg.experiment(), scores.append,
                             os.path.join(cfg.run_dir, "checkpoints"))
    _dump(cfg, "metrics.json", {"reports": _clean([r.to_dict() for r in reports])})
    _table_file(cfg, "metrics.tsv",
                ["selection", "variant", "split", "signal", "K", "auc", "auc_std", "lift", "lift_std", "n_test"],
                [(r.selection, r.variant, r.split, r.signal, r.K, r.auc, r.auc_std, r.lift, r.lift_std,
                  r.n_test) for r in reports])
    with open(os.path.join(cfg.run_dir, "scores.jsonl"), "w", encoding="utf-8") as fh:
        for rec in scores:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    for r in reports:
        print(f"{r.selection}/{r.variant} {r.signal}@{r.K}: AUC {r.auc:.4f}±{r.auc_std:.4f} "
              f"Lift {r.lift:.2f}±{r.lift_std:.2f}")


def cmd_tcav(cfg: RunConfig, args):
    opts = cfg.tcav_options()
    table, manifest = _load_table(cfg)
    exp = cfg.experiment()
    selection = cfg.selections[opts["selection"]]
    X = embedstore.assemble_rows(manifest, selection, table.row)
    layout = embedstore.layout_string(manifest, selection)
    split = make_split(table, exp.split, opts["seed"], exp.holdout_field, exp.test_fraction)
    params = _trained(table, X, layout, split, opts["selection"], opts["variant"], opts["signal"],
                      int(opts["K"]), opts["seed"], exp, os.path.join(cfg.run_dir, "checkpoints"))
    records = ctml.read_ctml(_need(cfg.path("ctml"), "concept file"))
    results = tcav.run_tcav(params, manifest, records, opts["layers"], opts["repetitions"], cfg.seed,
                            opts["concepts"])
    _dump(cfg, "tcav.json", {"model": {k: opts[k] for k in ("signal", "K", "selection", "variant", "seed")},
                             "results": _clean([asdict(r) for r in results])})
    _table_file(cfg, "fig5_tcav.tsv",
                ["concept", "layer", "mean", "std", "t", "p", "significant", "fit_quality", "n_pos", "degenerate"],
                [(r.concept, r.layer, r.mean, r.std, r.t_stat, r.p_value, r.significant, r.fit_quality,
                  r.n_pos, r.degenerate) for r in results])
    print(f"tcav: {len(results)} (concept, layer) results, "
          f"{sum(r.significant for r in results)} significant")


def cmd_code(cfg: RunConfig, args):
    from . import coder

    req_path = _need(cfg.path("requests"), "coding requests")
    if not cfg.endpoint.get("base_url") or not cfg.endpoint.get("model"):
        raise ConfigError("endpoint needs base_url and model")
    try:
        endpoint = coder.EndpointConfig(**{"max_concurrency": cfg.threads, **cfg.endpoint})
    except (TypeError, ContractViolation) as exc:
        raise ConfigError(f"endpoint: {exc}") from None
    with open(req_path, encoding="utf-8") as fh:
        requests = [coder.CodingRequest.from_dict(json.loads(ln)) for ln in fh if ln.strip()]
    result = coder.code_batch(requests, endpoint)
    os.makedirs(cfg.run_dir, exist_ok=True)
    ctml.write_ctml(os.path.join(cfg.run_dir, "ctml_machine.jsonl"), [r for r in result.records if r])
    with open(os.path.join(cfg.run_dir, "coder_audit.jsonl"), "w", encoding="utf-8") as fh:
        for entry in result.audit:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    for i, err in result.failures:
        print(f"request {i}: {err}", file=sys.stderr)
    print(f"code: {len(requests) - len(result.failures)} of {len(requests)} moments coded")
    if result.failures:
        raise DataError(f"{len(result.failures)} moments could not be coded")


def cmd_agreement(cfg: RunConfig, args):
    machine = ctml.read_ctml(_need(cfg.path("ctml_machine"), "machine codings"))
    adjudicated = ctml.read_ctml(_need(cfg.path("ctml"), "adjudicated codings"))
    reports = ctml.agreement([r for r in machine if r.coder is ctml.Coder.Machine],
                             [r for r in adjudicated if r.coder is ctml.Coder.Adjudicated])
    _dump(cfg, "agreement.json", {"reports": _clean([asdict(r) for r in reports])})
    _table_file(cfg, "agreement.tsv", ["feature", "kappa", "weighted", "n_items"],
                [(r.feature, r.kappa, r.weighted, r.n_items) for r in reports])
    print(f"agreement: kappa >= 0.8 for {sum(r.kappa >= 0.8 for r in reports)} of {len(reports)} features")


REPORT_PARTS = ("ingest.json", "signals.json", "metrics.json", "tcav.json", "associations.json", "agreement.json")


def cmd_report(cfg: RunConfig, args):
    found = {}
    for name in REPORT_PARTS:
        path = os.path.join(cfg.run_dir, name)
        if os.path.exists(path):
            found[name] = path
    for extra in args.include or []:
        found[os.path.basename(extra)] = _need(extra, "artifact")
    if not found:
        raise ConfigError(f"no artifacts in {cfg.run_dir}")
    hashes = {name: _read_hash(p) for name, p in found.items()}
    mismatched = sorted(n for n, h in hashes.items() if h != cfg.config_hash)
    if mismatched:
        raise ConfigError(f"config hash mismatch for {mismatched}: expected {cfg.config_hash}")
    summary = {}
    for name, path in found.items():
        with open(path, encoding="utf-8") as fh:
            body = json.load(fh)
        body.pop("config_hash", None)
        summary[name.rsplit(".", 1)[0]] = body
    _dump(cfg, "summary.json", {"version": __version__, "artifacts": summary})
    if "metrics" in summary:
        _table_file(cfg, "fig3_auc.tsv", ["split", "selection", "variant", "signal", "K", "auc", "auc_std"],
                    [(r["split"], r["selection"], r["variant"], r["signal"], r["K"], r["auc"], r["auc_std"])
                     for r in summary["metrics"]["reports"]])
    print(f"report: merged {sorted(summary)} into {os.path.join(cfg.run_dir, 'summary.json')}")


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "signals": cmd_signals, "train": cmd_train,
    "evaluate": cmd_evaluate, "tcav": cmd_tcav, "code": cmd_code, "agreement": cmd_agreement,
    "report": cmd_report,
}


def _list(conv):
    return lambda s: [conv(x) for x in s.split(",") if x]


def build_parser():
    p = argparse.ArgumentParser(prog="vidpeaks", description="Video interaction-peak pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", dest="out_dir")
        sp.add_argument("--corpus")
        sp.add_argument("--events", type=_list(str))
        sp.add_argument("--videos")
        sp.add_argument("--manifest")
        sp.add_argument("--ctml")
        sp.add_argument("--ctml-machine", dest="ctml_machine")
        sp.add_argument("--requests")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--seeds", type=_list(int))
        sp.add_argument("--signals", type=_list(str))
        sp.add_argument("--ks", type=_list(int))
        sp.add_argument("--split", choices=("course", "field"))
        sp.add_argument("--holdout-field", dest="holdout_field")
        sp.add_argument("--variants", type=_list(str))
        sp.add_argument("--threads", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            sp.add_argument("--include", action="append", help="extra artifact to merge")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, k) for k in ("out_dir", "corpus", "events", "videos", "manifest", "ctml",
                                               "ctml_machine", "requests", "seed", "seeds", "signals", "ks",
                                               "split", "holdout_field", "variants", "threads")}
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractViolation) as exc:
        print(f"vidpeaks {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"vidpeaks {args.command}: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"vidpeaks {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
