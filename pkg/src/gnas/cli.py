"""Command-line entry point: ``gnas {search,compare,eval,export-dot,gen-data}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``GNAS_THREADS`` caps worker threads for read-only evaluation; unset or 0
runs sequentially, which is the mode that guarantees byte-identical outputs.
In that mode trace files carry ``elapsed_ms: null`` and wall times go to a
separate ``timing.jsonl``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .arch import Architecture, NetworkShape, validate
from .compare import compare_methods, format_report
from .data import SyntheticSpec, generate_synthetic, load_csv, save_dataset, split
from .errors import ConfigError, GnasError, ShapeMismatch
from .nn import WeightStore, correct_counts
from .search import SearchConfig, run_search

log = logging.getLogger("gnas")

_SEARCH_FIELDS = {f.name for f in dataclasses.fields(SearchConfig)} - {"rng_seed", "workers"}
_SYNTH_FIELDS = {f.name for f in dataclasses.fields(SyntheticSpec)} - {"rng_seed"}
_SCHEMA = {
    "shape": {"block_counts", "channel_widths", "head_width"},
    "data": {"kind", "path", "train", "valid", "test", "fractions"} | _SYNTH_FIELDS,
    "search": _SEARCH_FIELDS,
    "run": {"seed", "out", "finetune_iters", "compare_budget"},
}


@dataclasses.dataclass
class RunConfig:
    shape: NetworkShape
    data: dict
    search: SearchConfig
    seed: int
    out: str | None
    finetune_iters: int
    compare_budget: int | None
    raw: dict


def load_config(path, seed: int | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    for key in raw:
        if key not in _SCHEMA:
            raise ConfigError(f"{p}: unknown section '{key}' (allowed: {', '.join(_SCHEMA)})")
    for section, allowed in _SCHEMA.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{p}: section '{section}' must be an object")
        for key in body:
            if key not in allowed:
                raise ConfigError(f"{p}: unknown field '{section}.{key}'")
    if "shape" not in raw:
        raise ConfigError(f"{p}: missing section 'shape'")

    run = raw.get("run", {})
    seed = int(run.get("seed", 0)) if seed is None else seed
    if seed < 0:
        raise ConfigError(f"{p}: run.seed must be non-negative")
    try:
        shape = NetworkShape.from_dict(raw["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{p}: invalid 'shape': {e}") from None
    try:
        search = SearchConfig(**raw.get("search", {}), rng_seed=seed,
                              workers=_threads())
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{p}: invalid 'search': {e}") from None
    budget = run.get("compare_budget")
    if budget is not None and (not isinstance(budget, int) or budget < 1):
        raise ConfigError(f"{p}: run.compare_budget must be a positive integer, got {budget!r}")
    finetune_iters = run.get("finetune_iters", 0)
    if not isinstance(finetune_iters, int) or finetune_iters < 0:
        raise ConfigError(f"{p}: run.finetune_iters must be a non-negative integer")
    data = raw.get("data", {"kind": "synthetic"})
    if data.get("kind", "synthetic") not in ("synthetic", "csv"):
        raise ConfigError(f"{p}: data.kind must be 'synthetic' or 'csv'")
    raw = json.loads(json.dumps(raw))
    raw.setdefault("run", {})["seed"] = seed
    return RunConfig(shape, data, search, seed, run.get("out"), finetune_iters, budget, raw)


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("GNAS_THREADS", "0") or 0))
    except ValueError:
        raise ConfigError("GNAS_THREADS must be an integer") from None


def build_dataset(cfg: RunConfig):
    d = dict(cfg.data)
    kind = d.pop("kind", "synthetic")
    if kind == "synthetic":
        try:
            spec = SyntheticSpec(**d, rng_seed=cfg.seed)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid 'data': {e}") from None
        data = generate_synthetic(spec)
    elif "path" in d:
        data = split(load_csv(d["path"]), d.get("fractions", (0.7, 0.15, 0.15)), cfg.seed)
    else:
        parts = {name: load_csv(d[name]) for name in ("train", "valid", "test") if name in d}
        if not {"train", "valid"} <= set(parts):
            raise ConfigError("csv data needs 'path' or both 'train' and 'valid'")
        data = parts["train"]
        data.splits = {name: ds.splits["all"] for name, ds in parts.items()}
    if data.input_dim != cfg.shape.input_dim or data.num_attributes != cfg.shape.num_attributes:
        raise ConfigError(
            f"data has {data.input_dim} features / {data.num_attributes} attributes but shape "
            f"expects {cfg.shape.input_dim} / {cfg.shape.num_attributes}")
    return data


def atomic_write(path: Path, payload) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run manifest: written before work starts, finalized when it ends."""

    def __init__(self, out: Path, command: str, cfg: RunConfig, outputs: dict):
        self.path = out / "manifest.json"
        config_text = json.dumps(cfg.raw, sort_keys=True)
        self.run_id = hashlib.sha256(f"{command}\n{config_text}".encode()).hexdigest()[:16]
        self.body = {"command": command, "run_id": self.run_id, "version": _version(),
                     "seed": cfg.seed, "data_seed": cfg.seed, "config": cfg.raw,
                     "threads": cfg.search.workers, "started": _now(), "finished": None,
                     "status": "running", "outputs": outputs}
        self._write()

    def _write(self):
        atomic_write(self.path, json.dumps(self.body, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str, **extra):
        self.body.update(status=status, finished=_now(), **extra)
        self._write()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args, cfg: RunConfig, default: str) -> Path:
    out = Path(args.out or cfg.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _with_run_id(jsonl: str, run_id: str) -> str:
    lines = []
    for line in jsonl.splitlines():
        rec = json.loads(line)
        rec["run_id"] = run_id
        lines.append(json.dumps(rec) + "\n")
    return "".join(lines)


def _timing(records) -> str:
    return "".join(json.dumps({"round": r.round, "layer": r.layer,
                               "elapsed_ms": round(r.elapsed_ms, 3)}) + "\n" for r in records)


def cmd_search(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args, cfg, "runs/search")
    deterministic = cfg.search.workers == 0
    names = {"architecture": "architecture.json", "store": "store.bin", "trace": "trace.jsonl"}
    if deterministic:
        names["timing"] = "timing.jsonl"
    manifest = Manifest(out, "search", cfg, names)
    try:
        data = build_dataset(cfg)
        arch, store, trace = run_search(cfg.shape, data, cfg.search)
        arch_doc = json.loads(arch.to_json())
        arch_doc.update(manifest="manifest.json", run_id=manifest.run_id)
        atomic_write(out / names["architecture"], json.dumps(arch_doc) + "\n")
        atomic_write(out / names["store"], store.to_bytes())
        atomic_write(out / names["trace"],
                     _with_run_id(trace.to_jsonl(include_timing=not deterministic),
                                  manifest.run_id))
        if deterministic:
            atomic_write(out / names["timing"], _timing(trace.records))
    except BaseException as e:
        manifest.finish("failed", error=str(e))
        raise
    manifest.finish("ok", converged=trace.converged, candidates=trace.num_candidates,
                    sha256={k: _sha256(out / v) for k, v in names.items()})
    print(f"architecture: {arch.to_json()}")
    print(f"{trace.num_candidates} candidates, converged={trace.converged}, wrote {out}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args, cfg, "runs/compare")
    deterministic = cfg.search.workers == 0
    names = {"report": "report.json", "summary": "report.txt",
             "gnas_trace": "gnas_trace.jsonl", "random_trace": "random_trace.jsonl"}
    manifest = Manifest(out, "compare", cfg, names)
    try:
        data = build_dataset(cfg)
        report = compare_methods(cfg.shape, data, cfg.search, budget=cfg.compare_budget,
                                 finetune_iters=cfg.finetune_iters, data_seed=cfg.seed)
        objs = report.pop("_objects")
        report["run_id"] = manifest.run_id
        atomic_write(out / names["report"], json.dumps(report, indent=2) + "\n")
        atomic_write(out / names["summary"], format_report(report))
        atomic_write(out / names["gnas_trace"],
                     _with_run_id(objs["gnas"][2].to_jsonl(not deterministic), manifest.run_id))
        atomic_write(out / names["random_trace"],
                     _with_run_id(objs["random"][2].to_jsonl(not deterministic), manifest.run_id))
    except BaseException as e:
        manifest.finish("failed", error=str(e))
        raise
    manifest.finish("ok", methods={m: {"data_seed": report["data_seed"]}
                                   for m in report["methods"]})
    sys.stdout.write(format_report(report))
    return 0


def _load_arch(path) -> Architecture:
    try:
        return Architecture.from_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"cannot read architecture {path}: {e}") from None


def cmd_eval(args) -> int:
    arch = _load_arch(args.arch)
    store = WeightStore.load(args.store)
    if arch.block_counts != store.shape.block_counts:
        raise ShapeMismatch(f"architecture block counts {list(arch.block_counts)} do not match "
                            f"store block counts {list(store.shape.block_counts)}")
    validate(store.shape, arch)
    data = load_csv(args.data)
    batch = data.splits["all"]
    shape = store.shape
    if batch.features.shape[1] != shape.input_dim or batch.labels.shape[1] != shape.num_attributes:
        raise ShapeMismatch(
            f"data has {batch.features.shape[1]} features / {batch.labels.shape[1]} attributes, "
            f"store expects {shape.input_dim} / {shape.num_attributes}")
    counts, total = correct_counts(shape, arch, store, [batch], _threads())
    acc = counts / total
    errors = [100.0 * (1.0 - a) for a in acc]
    mean_error = 100.0 * (1.0 - counts.sum() / (len(counts) * total))
    result = {"samples": int(total), "mean_error": mean_error,
              "attributes": [{"index": n + 1, "name": name, "error": e}
                             for n, (name, e) in enumerate(zip(data.attribute_names, errors))]}
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        atomic_write(Path(args.out) / "eval.json", text)
    if args.format == "json":
        sys.stdout.write(text)
    else:
        for a in result["attributes"]:
            print(f"{a['index']:>4}  {a['name']:<24}{a['error']:8.2f}%")
        print(f"mean error: {mean_error:.2f}% over {total} samples")
    return 0


def architecture_to_dot(arch: Architecture, attribute_names=None) -> str:
    """Graphviz source for the tree: nodes ``L{l}B{i}`` (1-based), leaves named by attribute."""
    bc = arch.block_counts
    names = list(attribute_names) if attribute_names else None
    if names is not None and len(names) != bc[-1]:
        raise ShapeMismatch(f"{len(names)} attribute names for {bc[-1]} attributes")
    lines = ["digraph architecture {", "  rankdir=TB;", "  node [shape=box];"]
    for layer, count in enumerate(bc):
        for i in range(count):
            node = f"L{layer + 1}B{i + 1}"
            if layer == len(bc) - 1:
                label = names[i] if names else f"attr {i + 1}"
                lines.append(f'  "{node}" [label={json.dumps(label)}, shape=ellipse];')
            else:
                lines.append(f'  "{node}" [label="{node}"];')
    for k, layer in enumerate(arch.parents):
        for j, i in enumerate(layer):
            lines.append(f'  "L{k + 1}B{i + 1}" -> "L{k + 2}B{j + 1}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_export_dot(args) -> int:
    arch = _load_arch(args.architecture)
    names = None
    if args.names:
        names = [n.strip() for n in args.names.split(",")]
    elif args.names_file:
        try:
            meta = json.loads(Path(args.names_file).read_text(encoding="utf-8"))
            names = meta["attribute_names"] if isinstance(meta, dict) else list(meta)
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"cannot read attribute names from {args.names_file}: {e}") from None
    try:
        dot = architecture_to_dot(arch, names)
    except ShapeMismatch as e:
        raise ConfigError(str(e)) from None
    if args.out:
        out = Path(args.out)
        if out.is_dir() or not out.suffix:
            out.mkdir(parents=True, exist_ok=True)
            out = out / "architecture.dot"
        atomic_write(out, dot)
        print(f"wrote {out}")
    else:
        sys.stdout.write(dot)
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args, cfg, "runs/data")
    data = build_dataset(cfg)
    paths = save_dataset(data, out)
    print(json.dumps(paths, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run configuration")
            p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("search", help="run GNAS and save architecture, weights and trace")
    common(p)
    p.set_defaults(func=cmd_search)
    p = sub.add_parser("compare", help="GNAS vs random search (and exhaustive when feasible)")
    common(p)
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("eval", help="per-attribute error of a saved model on a CSV file")
    p.add_argument("--store", required=True)
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=("text", "json"), default="text")
    common(p, config=False)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("export-dot", help="Graphviz DOT drawing of an architecture")
    p.add_argument("architecture")
    p.add_argument("--names", help="comma-separated attribute names")
    p.add_argument("--names-file", help="JSON list or metadata.json with attribute_names")
    common(p, config=False)
    p.set_defaults(func=cmd_export_dot)
    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV files")
    common(p)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (GnasError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
