"""``mmm`` command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 internal error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, DataError, MMMError, ValidationError
from .kmeans import TrainConfig
from .metrics import evaluate
from .multilayer import (
    DEFAULT_FRACTION,
    learn_layer_weights,
    mmm_encode,
    mmm_train,
    select_top_layers,
)
from .rvq import decode_array, residual_energy_profile
from .store import describe_file, load_codec, load_tokens, save_codec, save_tokens
from .tensor_io import (
    MANIFEST_NAME,
    FeatureSequence,
    LayeredFeatures,
    SyntheticSpec,
    generate_synthetic,
    read_manifest,
    subsample_utterances,
    write_dataset,
    write_feature_file,
    write_manifest,
)

log = logging.getLogger("mmm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

DEFAULTS = {
    "manifest": None,
    "layers": None,
    "M": 1,
    "K": 500,
    "seed": None,
    "fraction": DEFAULT_FRACTION,
    "kmeans": {"max_iters": 100, "rel_tol": 1e-6, "n_init": 1},
    "output": {"codec": None, "log": None},
    "jobs": 1,
    "probe": {
        "codec": None,
        "target_layer": None,
        "target_manifest": None,
        "target_manifest_layer": 0,
        "steps": 500,
        "lr": 0.1,
        "seed": None,
        "k": 4,
    },
}
_PATH_KEYS = {("manifest",), ("output", "codec"), ("output", "log"),
              ("probe", "codec"), ("probe", "target_manifest")}
# keys that affect training results, hashed into the archive provenance
_DIGEST_KEYS = ("layers", "M", "K", "seed", "fraction", "kmeans")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, doc: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in doc.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _resolve_paths(cfg: dict, root: Path) -> None:
    for keys in _PATH_KEYS:
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        v = node[keys[-1]]
        if v is not None and not Path(v).is_absolute():
            node[keys[-1]] = str(root / v)


def load_config(path=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, doc)
        _resolve_paths(cfg, path.parent)
    return cfg


def _default_seed() -> int:
    env = os.environ.get("MMM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"MMM_SEED must be an integer, got {env!r}") from None


def _finalize(cfg: dict) -> dict:
    """Fill derived defaults and validate types; returns the effective config."""
    if cfg["seed"] is None:
        cfg["seed"] = _default_seed()
    if cfg["probe"]["seed"] is None:
        cfg["probe"]["seed"] = cfg["seed"]
    if cfg["layers"] is not None:
        if isinstance(cfg["layers"], int):
            cfg["layers"] = [cfg["layers"]]
        if not isinstance(cfg["layers"], list) or not all(isinstance(l, int) for l in cfg["layers"]):
            raise ConfigError(f"layers must be a list of integers, got {cfg['layers']!r}")
    if not isinstance(cfg["M"], int) or cfg["M"] < 1:
        raise ConfigError(f"M must be a positive integer, got {cfg['M']!r}")
    K = cfg["K"]
    if isinstance(K, int):
        cfg["K"] = [K] * cfg["M"]
    elif not (isinstance(K, list) and len(K) == cfg["M"] and all(isinstance(k, int) for k in K)):
        raise ConfigError(f"K must be an integer or a list of {cfg['M']} integers, got {K!r}")
    try:
        cfg["fraction"] = float(cfg["fraction"])
        cfg["jobs"] = int(cfg["jobs"])
        km = cfg["kmeans"]
        km["max_iters"], km["n_init"] = int(km["max_iters"]), int(km["n_init"])
        km["rel_tol"] = float(km["rel_tol"])
        pr = cfg["probe"]
        pr["steps"], pr["k"], pr["lr"] = int(pr["steps"]), int(pr["k"]), float(pr["lr"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad numeric config value: {e}") from e
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


def stage_configs(cfg: dict) -> list[TrainConfig]:
    km = cfg["kmeans"]
    return [
        TrainConfig(K=k, max_iters=km["max_iters"], rel_tol=km["rel_tol"],
                    seed=cfg["seed"] + m, n_init=km["n_init"])
        for m, k in enumerate(cfg["K"])
    ]


def config_digest(cfg: dict) -> str:
    doc = {k: cfg[k] for k in _DIGEST_KEYS}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _require(cfg: dict, *keys):
    for key in keys:
        node = cfg
        for part in key.split("."):
            node = node[part]
        if node is None:
            raise ConfigError(f"missing required setting {key!r} (config file or flag)")


# ---------------------------------------------------------------------------
# commands


def _train_codec(cfg: dict):
    ds = read_manifest(cfg["manifest"])
    codec = mmm_train(ds, cfg["layers"], cfg["M"], stage_configs(cfg),
                      cfg["fraction"], cfg["seed"], cfg["jobs"])
    prov = dict(codec.provenance, config_digest=config_digest(cfg))
    codec = type(codec)(codec.stacks, codec.selected_layers, codec.frame_rate_hz,
                        codec.fusion_weights, prov)
    return ds, codec


def _run_log(cfg: dict, ds, codec) -> tuple[str, dict]:
    sub = subsample_utterances(ds, cfg["fraction"], cfg["seed"])
    record = {"effective_config": cfg, "layers": {}}
    lines = ["# effective config", yaml.safe_dump(cfg, sort_keys=True).rstrip(), "", "# training"]
    for l in codec.selected_layers:
        stack = codec.stacks[l]
        profile = residual_energy_profile(stack, sub)
        stages = []
        for m, cb in enumerate(stack.codebooks, 1):
            meta = cb.train_meta
            stages.append({"stage": m, "K": cb.K, "inertia": cb.train_inertia,
                           "iterations": meta.iterations_run, "converged": meta.converged})
            lines.append(f"layer {l} stage {m}: K={cb.K} inertia={cb.train_inertia!r} "
                         f"iterations={meta.iterations_run} converged={meta.converged}")
        train_mse = profile[-1] / stack.D
        lines.append(f"layer {l} residual_energy_profile: " + " ".join(repr(v) for v in profile))
        lines.append(f"layer {l} train_mse: {train_mse!r}")
        record["layers"][str(l)] = {"stages": stages, "residual_energy_profile": profile,
                                    "train_mse": train_mse}
    return "\n".join(lines) + "\n", record


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    for key in ("manifest", "layers", "M", "K", "seed", "fraction", "jobs"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if args.max_iters is not None:
        cfg["kmeans"]["max_iters"] = args.max_iters
    if args.out is not None:
        cfg["output"]["codec"] = args.out
    if args.log is not None:
        cfg["output"]["log"] = args.log
    cfg = _finalize(cfg)
    _require(cfg, "manifest", "layers", "output.codec")
    ds, codec = _train_codec(cfg)
    out = Path(cfg["output"]["codec"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codec(codec, out)
    text, record = _run_log(cfg, ds, codec)
    log_path = Path(cfg["output"]["log"] or str(out) + ".log")
    log_path.write_text(text, encoding="utf-8")
    Path(str(log_path) + ".json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
    print(f"wrote {out} ({len(codec.streams)} streams) and {log_path}")
    return EXIT_OK


def _parallel_map(fn, items, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _report_failures(failures) -> int:
    for name, err in failures:
        print(f"error: {name}: {err}", file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


def cmd_encode(args) -> int:
    codec = load_codec(args.codec)
    ds = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(i):
        uid = ds.ids[i]
        try:
            save_tokens(mmm_encode(codec, ds[i]), out / f"{uid}.mmmt")
        except (MMMError, OSError) as e:
            return uid, e
        return None

    failures = [f for f in _parallel_map(one, range(len(ds)), args.jobs) if f]
    print(f"encoded {len(ds) - len(failures)}/{len(ds)} utterances into {out}")
    return _report_failures(failures)


def cmd_decode(args) -> int:
    codec = load_codec(args.codec)
    src = Path(args.tokens)
    if src.is_file():
        files = [src]
    elif src.is_dir():
        files = sorted(src.glob("*.mmmt"))
    else:
        raise DataError(f"no token file or directory at {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    expected = tuple(codec.streams)

    def one(path):
        try:
            grid = load_tokens(path)
            if grid.streams != expected:
                raise ValidationError(f"streams {grid.streams} do not match codec {expected}")
            layers = {
                l: FeatureSequence(decode_array(codec.stacks[l], grid.layer_ids(l))
                                   .astype(np.float32), codec.frame_rate_hz)
                for l in codec.selected_layers
            }
            name = f"{grid.utterance_id}.mmf"
            write_feature_file(LayeredFeatures(layers, grid.utterance_id), out / name)
            return (grid.utterance_id, name), None
        except (MMMError, OSError) as e:
            return None, (path.name, e)

    results = _parallel_map(one, files, args.jobs)
    entries = [r[0] for r in results if r[0]]
    write_manifest(out / MANIFEST_NAME, entries)
    print(f"decoded {len(entries)}/{len(files)} token files into {out}")
    return _report_failures([r[1] for r in results if r[1]])


def cmd_eval(args) -> int:
    codec = load_codec(args.codec)
    report = evaluate(codec, read_manifest(args.manifest), args.jobs)
    text = report.to_text()
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(str(prefix) + ".txt").write_text(text, encoding="utf-8")
        Path(str(prefix) + ".jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _probe_targets(cfg, ds, codec):
    pr = cfg["probe"]
    if (pr["target_layer"] is None) == (pr["target_manifest"] is None):
        raise ConfigError("probe needs exactly one of target_layer or target_manifest")
    if pr["target_layer"] is not None:
        layer = int(pr["target_layer"])
        if layer not in codec.stacks:
            raise ConfigError(f"probe target_layer {layer} is not among the codec layers")
        return {
            lf.utterance_id: decode_array(codec.stacks[layer], mmm_encode(codec, lf).layer_ids(layer))
            for lf in ds
        }
    tds = read_manifest(pr["target_manifest"])
    tl = int(pr["target_manifest_layer"])
    targets = {lf.utterance_id: lf[tl].data for lf in tds}
    missing = [u for u in ds.ids if u not in targets]
    if missing:
        raise ValidationError(f"no probe target for utterance {missing[0]!r}")
    return targets


def cmd_select_layers(args) -> int:
    cfg = load_config(args.config)
    for key in ("manifest", "layers", "seed", "jobs"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if args.k is not None:
        cfg["probe"]["k"] = args.k
    cfg = _finalize(cfg)
    _require(cfg, "manifest")
    pr = cfg["probe"]
    if pr["codec"] is not None:
        ds = read_manifest(cfg["manifest"])
        codec = load_codec(pr["codec"])
    else:
        _require(cfg, "layers")
        ds, codec = _train_codec(cfg)
    targets = _probe_targets(cfg, ds, codec)
    trace = []
    lw = learn_layer_weights(ds, codec, None, targets, pr["steps"], pr["lr"], pr["seed"], trace)
    chosen = select_top_layers(lw, pr["k"])
    weights = lw.as_dict()
    for rank, l in enumerate(chosen, 1):
        print(f"{rank}\tlayer {l}\tweight {weights[l]:.6f}")
    if args.out:
        doc = {
            "selected_layers": chosen,
            "weights": {str(l): w for l, w in weights.items()},
            "logits": {str(l): v for l, v in zip(lw.layers, lw.logits.tolist())},
            "final_loss": trace[-1] if trace else None,
            "effective_config": cfg,
        }
        Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


_SPEC_FIELDS = ("n_components", "D", "T", "n_utterances", "n_layers",
                "component_spread", "noise_sigma", "frame_rate_hz")


def cmd_gen(args) -> int:
    spec_doc = {}
    if args.spec:
        spec_doc = yaml.safe_load(Path(args.spec).read_text(encoding="utf-8")) or {}
        unknown = set(spec_doc) - set(_SPEC_FIELDS)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys {sorted(unknown)}")
    for key in _SPEC_FIELDS:
        v = getattr(args, key)
        if v is not None:
            spec_doc[key] = v
    spec = SyntheticSpec(**spec_doc)
    seed = args.seed if args.seed is not None else _default_seed()
    ds = generate_synthetic(spec, seed)
    echo = {k: (str(v) if k == "frame_rate_hz" else v) for k, v in vars(spec).items()}
    manifest = write_dataset(ds, args.out, comments=[
        f"generated by mmm gen {__version__}", f"seed={seed}",
        "spec=" + json.dumps(echo, sort_keys=True),
    ])
    print(f"wrote {len(ds)} utterances and {manifest}")
    return EXIT_OK


def cmd_info(args) -> int:
    print(describe_file(args.path))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _k_arg(text: str):
    values = _int_list(text)
    return values[0] if len(values) == 1 else values


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmm", description="Multi-layer multi-residual K-means speech units.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a multi-layer residual K-means codec")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--layers", type=_int_list)
    t.add_argument("--M", type=int)
    t.add_argument("--K", type=_k_arg, help="codebook size, or one per stage (comma-separated)")
    t.add_argument("--seed", type=int)
    t.add_argument("--fraction", type=float)
    t.add_argument("--max-iters", type=int)
    t.add_argument("--out", help="codec archive path")
    t.add_argument("--log", help="run log path (default: <out>.log)")
    t.add_argument("--jobs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode a manifest into token files")
    e.add_argument("--codec", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct feature files from token files")
    d.add_argument("--codec", required=True)
    d.add_argument("--tokens", required=True, help="token directory, or a single MMMT file")
    d.add_argument("--out", required=True)
    d.add_argument("--jobs", type=int, default=1)
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="bitrate, distortion and usage report")
    v.add_argument("--codec", required=True)
    v.add_argument("--manifest", required=True)
    v.add_argument("--out", help="report prefix; writes <out>.txt and <out>.jsonl")
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("select-layers", help="learn layer weights and rank layers")
    s.add_argument("--config", required=True)
    s.add_argument("--manifest")
    s.add_argument("--layers", type=_int_list)
    s.add_argument("--seed", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--out", help="write the ranking as JSON")
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_select_layers)

    g = sub.add_parser("gen", help="write a synthetic Gaussian-mixture dataset")
    g.add_argument("--spec", help="YAML file with synthetic spec fields")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    for name in ("n_components", "D", "T", "n_utterances", "n_layers"):
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    g.add_argument("--component-spread", dest="component_spread", type=float)
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    g.add_argument("--frame-rate", dest="frame_rate_hz", type=str)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("info", help="summarize an MMF, MMMC or MMMT file")
    i.add_argument("path")
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MMMError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
