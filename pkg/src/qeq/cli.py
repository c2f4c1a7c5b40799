"""Command-line driver: simulate, train, quantize, evaluate, cost and sweep.

Every command reads one JSON experiment config (``--config``), writes its
artifacts under ``--out`` and prints the metrics it wrote. Exit codes: 0
success, 2 config error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path


from .channel import ChannelError, LinkSpec, SymbolFrame, generate_frame, get_link, load_frame, save_frame
from .metrics import complexity_report, element_bits_from_quant
from .models import CheckpointError, Equalizer, load_checkpoint, model_from_spec, save_checkpoint
from .quant_training import (STRATEGIES, AlphaSchedule, BitMap, PartitionPlan, TrainConfig,
                             ab_train, average_weight_bits, companding_sab, evaluate, evaluate_linear, ptq,
                             qat_ste_train, sab, sptq, train)
from .quantizers import QuantizationError, QuantizerSpec
from .tensor import NumericError

log = logging.getLogger("qeq")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SWEEP_COLUMNS = ["power_dBm", "strategy", "avg_bits_w", "bits_a", "ber", "q_db", "mults_per_pol", "bo_bound",
                 "mem_bits"]
# strategies that need a trained baseline; the rest may start from a fresh model
NEEDS_BASELINE = ("ptq", "sptq")
GROUPINGS = ("random", "magnitude", "magnitude-asc")


class ConfigError(ValueError):
    """Invalid experiment config; the message starts with the offending field path."""


class IOFailure(OSError):
    pass


# --------------------------------------------------------------------------
# Experiment config
# --------------------------------------------------------------------------

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "data": {
        "link": "smf",
        "link_overrides": {},
        "power_dbm": 4.0,
        "n_train": 60_000,
        "n_test": 10_000,
        "steps_per_span": 100,
        "train_path": None,
        "test_path": None,
    },
    "model": {"kind": "convfc", "M": 8, "K": 8, "n_h": 32},
    "train": {"epochs": 30, "lr": 1e-3, "batch_size": 256, "retrain_epochs": 3, "epochs_per_alpha": 1,
              "calib_size": 10_000},
    "quant": {
        "strategy": "sab",
        "quantizer": {"kind": "uniform", "calibration": "minmax"},
        "act_quantizer": {"kind": "uniform", "calibration": "minmax"},
        "bitmap": {"weights": 4, "acts": None, "overrides": {}},
        "n_groups": 4,
        "group_bits": None,
        "grouping": "random",
        "schedule": {"k1": 0, "k2": 5},
        "mu": 255.0,
        "qat_epochs": 10,
    },
    "sweep": {"axis": "power", "values": [0.0, 2.0, 4.0]},
    "checkpoint": None,
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[k], dict) and k not in ("link_overrides", "overrides", "quantizer", "act_quantizer",
                                                   "bitmap", "model"):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected an object")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _need(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {msg}")


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls(_merge(DEFAULT_CONFIG, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | None) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({})
        try:
            d = json.loads(Path(path).read_text())
        except OSError as e:
            raise IOFailure(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: not valid JSON ({e})") from e
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        return cls.from_dict(d)

    # -- typed views -------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def quant(self) -> dict:
        return self.raw["quant"]

    def link(self) -> LinkSpec:
        d = self.data
        link = d["link"]
        try:
            base = get_link(link) if isinstance(link, str) else LinkSpec.from_dict(link)
            return base.replace(**d["link_overrides"]) if d["link_overrides"] else base
        except (ChannelError, TypeError, KeyError) as e:
            raise ConfigError(f"data.link: {e}") from e

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(**self.raw["train"], seed=self.seed if seed is None else seed)

    def quantizer(self) -> QuantizerSpec:
        return QuantizerSpec.from_dict(self.quant["quantizer"])

    def act_quantizer(self) -> QuantizerSpec:
        return QuantizerSpec.from_dict(self.quant["act_quantizer"])

    def bitmap(self) -> BitMap:
        return BitMap.from_dict(self.quant["bitmap"])

    def schedule(self) -> AlphaSchedule:
        s = self.quant["schedule"]
        return AlphaSchedule(int(s["k1"]), int(s["k2"]))

    def validate(self) -> None:
        _need(isinstance(self.raw["seed"], int) and self.raw["seed"] >= 0, "seed", "must be a non-negative integer")
        d = self.data
        self.link()
        for k in ("n_train", "n_test", "steps_per_span"):
            _need(isinstance(d[k], int) and d[k] > 0, f"data.{k}", "must be a positive integer")
        _need(isinstance(d["power_dbm"], (int, float)), "data.power_dbm", "must be a number")
        for k in ("train_path", "test_path"):
            if d[k] is not None:
                _need(Path(d[k]).exists(), f"data.{k}", f"no such file {d[k]!r}")
        try:
            model_from_spec(self.raw["model"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"model: {e}") from e
        try:
            self.train_config()
        except TypeError as e:
            raise ConfigError(f"train: {e}") from e
        tc = self.raw["train"]
        for k in ("epochs", "batch_size", "calib_size"):
            _need(isinstance(tc[k], int) and tc[k] >= (0 if k == "epochs" else 1), f"train.{k}", "bad value")
        q = self.quant
        _need(q["strategy"] in STRATEGIES + ("none",), "quant.strategy",
              f"must be one of {', '.join(STRATEGIES + ('none',))}")
        for k, fn in (("quantizer", self.quantizer), ("act_quantizer", self.act_quantizer),
                      ("bitmap", self.bitmap), ("schedule", self.schedule)):
            try:
                fn()
            except (QuantizationError, TypeError, KeyError) as e:
                raise ConfigError(f"quant.{k}: {e}") from e
        if q["strategy"] in ("sptq", "sab", "companding-sab"):
            _need(isinstance(q["n_groups"], int) and q["n_groups"] >= 1, "quant.n_groups", "must be >= 1")
            _need(q["grouping"] in GROUPINGS, "quant.grouping", "must be one of " + ", ".join(GROUPINGS))
            if q["group_bits"] is not None:
                _need(isinstance(q["group_bits"], list) and len(q["group_bits"]) == q["n_groups"],
                      "quant.group_bits", "needs one width per group")
                _need(all(isinstance(b, int) and b >= 1 for b in q["group_bits"]), "quant.group_bits",
                      "widths must be integers >= 1")
        if q["strategy"] == "companding-sab":
            _need(isinstance(q["mu"], (int, float)) and q["mu"] > 0, "quant.mu", "must be positive")
        if q["strategy"] == "qat-ste":
            _need(isinstance(q["qat_epochs"], int) and q["qat_epochs"] >= 1, "quant.qat_epochs", "must be >= 1")
        sw = self.raw["sweep"]
        _need(sw["axis"] in ("power", "bits", "strategy"), "sweep.axis", "must be power, bits or strategy")
        _need(isinstance(sw["values"], list) and sw["values"], "sweep.values", "must be a non-empty list")

    def with_point(self, axis: str, value) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        if axis == "power":
            raw["data"]["power_dbm"] = float(value)
        elif axis == "bits":
            raw["quant"]["bitmap"] = {**raw["quant"]["bitmap"], "weights": int(value)}
        else:
            raw["quant"]["strategy"] = value
        return ExperimentConfig.from_dict(raw)


# --------------------------------------------------------------------------
# Metrics record
# --------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    launch_power_dBm: float
    strategy: str
    avg_bits_w: float
    bits_a: int | None
    ber: float
    q_db: float
    loss: float
    complexity: dict
    seed: int
    bit_errors: int = 0
    bits: int = 0
    extra: dict = field(default_factory=dict)
    # wall-clock time is kept out of the JSON so records stay byte-identical across runs
    wall_s: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_s")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> dict:
        c = self.complexity
        return {"power_dBm": self.launch_power_dBm, "strategy": self.strategy, "avg_bits_w": self.avg_bits_w,
                "bits_a": "" if self.bits_a is None else self.bits_a, "ber": self.ber, "q_db": self.q_db,
                "mults_per_pol": c["real_mults_per_pol"], "bo_bound": c["bo_bound_total"],
                "mem_bits": c["memory_bits"]}


def _act_bits(model: Equalizer) -> int | None:
    widths = {g.bits for g in model.quant.acts.values()}
    return max(widths) if widths else None


def _model_report(model: Equalizer):
    """Complexity at the widths actually stored in ``model``."""
    overrides = {f"act.{p}": g.bits for p, g in model.quant.acts.items()}
    bm = BitMap(weights=32, acts=None, overrides=overrides)
    rep = complexity_report(model, bm, ebits=element_bits_from_quant(model))
    rep.bits_a = _act_bits(model)
    return rep


def _complexity(model: Equalizer) -> dict:
    return _model_report(model).to_dict()


def make_record(model: Equalizer, frame: SymbolFrame, strategy: str, seed: int, wall: float,
                extra: dict | None = None) -> MetricsRecord:
    ev = evaluate(model, frame)
    return MetricsRecord(
        launch_power_dBm=float(frame.power_dbm), strategy=strategy, avg_bits_w=average_weight_bits(model),
        bits_a=_act_bits(model), ber=ev["ber"], q_db=ev["q_db"], loss=ev["loss"], complexity=_complexity(model),
        seed=seed, bit_errors=ev["bit_errors"], bits=ev["bits"], extra=extra or {}, wall_s=wall)


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------

def _atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def _read_frame(path) -> SymbolFrame:
    try:
        return load_frame(path)
    except (OSError, ChannelError, ValueError) as e:
        raise IOFailure(f"cannot read dataset {path}: {e}") from e


def _frame_path(cache: Path, link: LinkSpec, power: float, n: int, seed: int, steps: int) -> Path:
    return cache / f"{link.name}_p{power:g}_n{n}_s{seed}_k{steps}.qeqd"


def frames(cfg: ExperimentConfig, cache: Path) -> tuple[SymbolFrame, SymbolFrame]:
    """Train and test frames; simulated with seeds ``seed`` and ``seed + 1`` unless paths are given."""
    d = cfg.data
    link = cfg.link()
    out = []
    for path, n, seed in ((d["train_path"], d["n_train"], cfg.seed), (d["test_path"], d["n_test"], cfg.seed + 1)):
        if path is not None:
            out.append(_read_frame(path))
            continue
        p = _frame_path(cache, link, float(d["power_dbm"]), n, seed, d["steps_per_span"])
        if p.exists():
            out.append(_read_frame(p))
            continue
        log.info("simulating %d symbols at %g dBm (seed %d)", n, d["power_dbm"], seed)
        f = generate_frame(link, float(d["power_dbm"]), n, seed, steps_per_span=d["steps_per_span"])
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(f".{p.name}.{os.getpid()}.tmp")
        save_frame(f, tmp)
        os.replace(tmp, p)
        # reload so the in-memory frame matches what later runs read back
        out.append(_read_frame(p))
    return out[0], out[1]


def _plan(cfg: ExperimentConfig, model: Equalizer, seed: int) -> PartitionPlan:
    q = cfg.quant
    return PartitionPlan.build(model, q["n_groups"], q["grouping"], seed, q["group_bits"])


def run_strategy(cfg: ExperimentConfig, model: Equalizer, data, seed: int) -> Equalizer:
    q = cfg.quant
    s = q["strategy"]
    tc = cfg.train_config(seed)
    spec, act, bm = cfg.quantizer(), cfg.act_quantizer(), cfg.bitmap()
    if s == "none":
        return model
    if s == "ptq":
        return ptq(model, spec, bm, calib=data[0][:tc.calib_size], act_spec=act)
    if s == "qat-ste":
        return qat_ste_train(model, data, spec, bm, q["qat_epochs"], tc, act_spec=act)
    if s == "ab":
        return ab_train(model, data, spec, bm, cfg.schedule(), tc, act_spec=act)
    plan = _plan(cfg, model, seed)
    if s == "sptq":
        return sptq(model, data, plan, spec, bm, tc, act_spec=act)
    if s == "sab":
        return sab(model, data, plan, cfg.schedule(), spec, bm, tc, act_spec=act)
    return companding_sab(model, data, plan, cfg.schedule(), q["mu"], spec, bm, tc, act_spec=act)


def _write_record(out: Path, name: str, rec: MetricsRecord) -> None:
    _atomic_write(out / name, rec.to_json())
    _atomic_write(out / f"{Path(name).stem}.timing.json", json.dumps({"wall_s": rec.wall_s}) + "\n")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    tr, te = frames(cfg, out / "data")
    for name, f in (("train.qeqd", tr), ("test.qeqd", te)):
        save_frame(f, out / name)
    M = cfg.raw["model"].get("M", 8)
    lin = evaluate_linear(te, M)
    # file names are relative to the output directory so the record does not depend on where it was written
    info = {"train": "train.qeqd", "test": "test.qeqd", "n_train": len(tr), "n_test": len(te),
            "power_dBm": float(te.power_dbm), "link": te.link.to_dict(), "seed": cfg.seed,
            "linear_ber": lin["ber"], "linear_q_db": lin["q_db"]}
    _atomic_write(out / "dataset.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


def cmd_train(cfg: ExperimentConfig, out: Path) -> MetricsRecord:
    t0 = time.perf_counter()
    tr, te = frames(cfg, out / "data")
    model = model_from_spec({**cfg.raw["model"], "seed": cfg.seed})
    data = model.prepare_frame(tr)
    hist: list = []
    trained = train(model, data, cfg.train_config(), hist)
    trained.round_to_storage()
    ev_tr = evaluate(trained, tr)
    lin = evaluate_linear(te, trained.hyper()["M"])
    extra = {"train_ber": ev_tr["ber"], "train_q_db": ev_tr["q_db"], "linear_q_db": lin["q_db"],
             "final_train_loss": hist[-1]["loss"] if hist else None}
    save_checkpoint(trained, out / "model.json", {"train": cfg.raw["train"], "data": cfg.data})
    rec = make_record(trained, te, "none", cfg.seed, time.perf_counter() - t0, extra)
    _write_record(out, "metrics.json", rec)
    return rec


def _load_model(path) -> Equalizer:
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise IOFailure(str(e)) from e
    except (OSError, ValueError, KeyError) as e:
        raise IOFailure(f"cannot read checkpoint {path}: {e}") from e


def cmd_quantize(cfg: ExperimentConfig, out: Path, checkpoint: str | None) -> MetricsRecord:
    t0 = time.perf_counter()
    strategy = cfg.quant["strategy"]
    ck = checkpoint or cfg.raw["checkpoint"]
    if ck is None and strategy in NEEDS_BASELINE:
        raise ConfigError(f"checkpoint: strategy {strategy!r} needs a trained baseline")
    tr, te = frames(cfg, out / "data")
    base = _load_model(ck) if ck else model_from_spec({**cfg.raw["model"], "seed": cfg.seed})
    q = run_strategy(cfg, base, base.prepare_frame(tr), cfg.seed)
    save_checkpoint(q, out / "quantized.json", {"quant": cfg.quant, "train": cfg.raw["train"]})
    rec = make_record(q, te, strategy, cfg.seed, time.perf_counter() - t0)
    _write_record(out, "metrics.json", rec)
    return rec


def cmd_eval(cfg: ExperimentConfig, out: Path, checkpoint: str, dataset: str | None) -> MetricsRecord:
    t0 = time.perf_counter()
    model = _load_model(checkpoint)
    if dataset is not None:
        frame = _read_frame(dataset)
    else:
        frame = frames(cfg, out / "data")[1]
    man = json.loads(Path(checkpoint).read_text()).get("extra", {})
    strategy = man.get("quant", {}).get("strategy", "none")
    rec = make_record(model, frame, strategy, model.seed, time.perf_counter() - t0)
    _write_record(out, "eval.json", rec)
    return rec


def cmd_complexity(cfg: ExperimentConfig, out: Path, checkpoint: str | None) -> dict:
    if checkpoint is not None:
        rep = _model_report(_load_model(checkpoint))
    else:
        model = model_from_spec(cfg.raw["model"])
        q = cfg.quant
        plan = _plan(cfg, model, cfg.seed) if q["group_bits"] is not None else None
        rep = complexity_report(model, cfg.bitmap(), plan)
    d = rep.to_dict()
    _atomic_write(out / "complexity.json", json.dumps(d, indent=2, sort_keys=True) + "\n")
    _atomic_write(out / "complexity.txt", rep.table() + "\n")
    # the table goes to stderr so stdout stays machine-readable JSON
    print(rep.table(), file=sys.stderr)
    return d


def _sweep_point(args) -> dict:
    raw, out, axis, value, index = args
    setup_logging()
    cfg = ExperimentConfig.from_dict(raw).with_point(axis, value)
    seed = cfg.seed + index
    t0 = time.perf_counter()
    tr, te = frames(cfg, Path(out) / "data")
    model = model_from_spec({**cfg.raw["model"], "seed": seed})
    data = model.prepare_frame(tr)
    base = train(model, data, cfg.train_config(seed))
    base.round_to_storage()
    q = run_strategy(cfg, base, data, seed)
    rec = make_record(q, te, cfg.quant["strategy"], seed, time.perf_counter() - t0,
                      {"axis": axis, "value": value, "index": index})
    _write_record(Path(out) / "points", f"{index:03d}.json", rec)
    return rec.csv_row()


def cmd_sweep(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> list[dict]:
    """One row per sweep value; point i uses seed + i whatever the scheduling order."""
    sw = cfg.raw["sweep"]
    for v in sw["values"]:
        cfg.with_point(sw["axis"], v)
    tasks = [(cfg.raw, str(out), sw["axis"], v, i) for i, v in enumerate(sw["values"])]
    if jobs > 1 and len(tasks) > 1:
        # the data cache is filled up front so parallel points never simulate the same frame twice
        for v in sorted({cfg.with_point(sw["axis"], v).data["power_dbm"] for v in sw["values"]}):
            frames(cfg.with_point("power", v), out / "data")
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(t) for t in tasks]
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / f".sweep.csv.{os.getpid()}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, out / "sweep.csv")
    return rows


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def setup_logging() -> None:
    level = os.environ.get("QEQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qeq", description="Quantized neural equalizers for a simulated fiber link.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", default="qeq-out", help="output directory")
        return sp

    common(sub.add_parser("simulate", help="simulate train and test frames"))
    common(sub.add_parser("train", help="train the unquantized baseline"))
    sp = common(sub.add_parser("quantize", help="quantize a baseline with the configured strategy"))
    sp.add_argument("--checkpoint", help="baseline checkpoint manifest")
    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", help="dataset file; defaults to the config's test frame")
    sp = common(sub.add_parser("complexity", help="multiplications, BO bound and memory"))
    sp.add_argument("--checkpoint", help="use the widths of a quantized checkpoint")
    sp = common(sub.add_parser("sweep", help="run a power, bits or strategy sweep"))
    sp.add_argument("--jobs", type=int, default=1, help="parallel sweep points")
    return p


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        raw = copy.deepcopy(cfg.raw)
        raw["seed"] = args.seed
        cfg = ExperimentConfig.from_dict(raw)
    return cfg


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    out = Path(args.out)
    try:
        cfg = _load_config(args)
        if args.command == "simulate":
            res = cmd_simulate(cfg, out)
        elif args.command == "train":
            res = cmd_train(cfg, out).to_dict()
        elif args.command == "quantize":
            res = cmd_quantize(cfg, out, args.checkpoint).to_dict()
        elif args.command == "eval":
            res = cmd_eval(cfg, out, args.checkpoint, args.dataset).to_dict()
        elif args.command == "complexity":
            res = cmd_complexity(cfg, out, args.checkpoint)
        else:
            if args.jobs < 1:
                raise ConfigError("--jobs: must be >= 1")
            res = cmd_sweep(cfg, out, args.jobs)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(res, indent=2, sort_keys=True))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


__all__ = [
    "ConfigError", "DEFAULT_CONFIG", "ExperimentConfig", "MetricsRecord", "SWEEP_COLUMNS", "build_parser",
    "cmd_complexity", "cmd_eval", "cmd_quantize", "cmd_simulate", "cmd_sweep", "cmd_train", "frames", "main",
    "make_record", "run", "run_strategy",
]
