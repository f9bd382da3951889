"""Command-line entry point: ``pathinfer <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import data
from .config import RunConfig
from .encoder import EncoderConfig, encode
from .errors import ConfigError, DataError, PathInferError
from .graph import load_graph, write_graph
from .nbwalk import sample_suffix, target_marginal, top_suffixes
from .nn import load_params, save_params
from .training import train, write_loss_curve

log = logging.getLogger("pathinfer")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="pathinfer", description="Infer paths on graphs from noisy trajectories.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="run config file (key = value lines)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key")
        sp.add_argument("--data-dir", help="dataset directory (overrides data_dir)")
        sp.add_argument("--out-dir", help="output directory (overrides out_dir)")
        sp.add_argument("--threads", type=int, default=1, help="worker cap for evaluation")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("generate", help="write a synthetic or ingested dataset"))
    common(sub.add_parser("train", help="fit the encoder, write checkpoint and loss curve"))
    sp = common(sub.add_parser("evaluate", help="metric table and JSON for model and baselines"))
    sp.add_argument("--checkpoint", help="model checkpoint (default <out-dir>/model.ckpt)")
    sp.add_argument("--split", default="test", choices=("train", "test"))
    sp.add_argument("--embeddings", help="node embeddings TSV enabling the bilinear scorer")
    for name, helptext in (("predict", "top-k suffixes per trajectory"),
                           ("sample", "seeded suffix draws per trajectory"),
                           ("export-latent", "edge weights and node marginal of one trajectory")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--checkpoint", help="model checkpoint (default <out-dir>/model.ckpt)")
        sp.add_argument("--input", help="trajectories JSONL (default <data-dir>/test.jsonl)")
        sp.add_argument("--horizon", type=int, help="horizon for records that lack one")
        sp.add_argument("--output", help="output file (default: stdout or <out-dir>)")
    sub.choices["predict"].add_argument("--top", type=int, default=3)
    sub.choices["predict"].add_argument("--samples", type=int, default=200,
                                        help="Monte-Carlo draws added to the candidate pool")
    sub.choices["sample"].add_argument("--n", type=int, default=10, help="draws per trajectory")
    sub.choices["export-latent"].add_argument("--index", type=int, default=0,
                                              help="record of the input file to export")
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (x.strip() for x in item.split("=", 1))
        cfg.set(k, v)
    if args.data_dir:
        cfg.set("data_dir", args.data_dir)
    if args.out_dir:
        cfg.set("out_dir", args.out_dir)
    return cfg


def _graph(cfg):
    d = Path(cfg["data_dir"])
    return load_graph(d / "nodes.tsv", d / "edges.tsv")


def _checkpoint(args, cfg):
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg["out_dir"]) / "model.ckpt"
    if not path.exists():
        raise DataError(f"checkpoint {path} not found; run 'train' first")
    params = load_params(path)
    saved = params.meta.get("config") or {}
    enc = {k: saved[k] for k in EncoderConfig.__dataclass_fields__ if k in saved}
    try:
        enc_cfg = EncoderConfig(**enc) if enc else cfg.section("encoder")
    except TypeError as exc:
        raise DataError(f"{path}: unusable encoder settings ({exc})") from None
    return params, enc_cfg


def _write_config(cfg, directory, name):
    Path(directory).mkdir(parents=True, exist_ok=True)
    cfg.dump(Path(directory) / name)


def cmd_generate(args, cfg):
    out = Path(cfg["data_dir"])
    kind = cfg["dataset"]
    coords = None
    if kind == "planar":
        g, samples, coords = data.generate_planar(cfg.section("planar"), return_positions=True)
        data.save_dataset(out, g, samples, coords, cfg["test_fraction"], cfg["seed"])
    elif kind == "gps":
        g, samples, coords, traces = data.generate_gps(cfg.section("gps"), cfg.section("mapping"),
                                                       return_traces=True)
        data.save_dataset(out, g, samples, coords, cfg["test_fraction"], cfg["seed"])
        data.write_gps_traces(out / "traces.tsv", traces)
    elif kind == "navigation":
        if not (cfg["nodes_file"] and cfg["edges_file"] and cfg["paths_file"]):
            raise ConfigError("dataset = navigation needs nodes_file, edges_file and paths_file")
        g = load_graph(cfg["nodes_file"], cfg["edges_file"])
        samples = data.load_navigation_paths(cfg["paths_file"], g)
        train_s, test_s = data.split(samples, cfg["test_fraction"], cfg["seed"])
        if cfg["click_features"]:
            g = data.edge_click_features(train_s, g)
        out.mkdir(parents=True, exist_ok=True)
        write_graph(g, out / "nodes.tsv", out / "edges.tsv")
        data.write_trajectories(out / "train.jsonl", train_s)
        data.write_trajectories(out / "test.jsonl", test_s)
    else:
        raise ConfigError(f"unknown dataset {kind!r}; expected planar, gps or navigation")
    _write_config(cfg, out, "generate.cfg")
    log.info("wrote dataset to %s", out)
    return 0


def _labeled(path, g):
    records = data.read_trajectories(path, g)
    bad = [i for i, r in enumerate(records) if isinstance(r, data.Query)]
    if bad:
        raise DataError(f"{path}: record {bad[0] + 1} has no suffix or target")
    return records


def cmd_train(args, cfg):
    g = _graph(cfg)
    d = Path(cfg["data_dir"])
    samples = _labeled(d / "train.jsonl", g)
    valid = _labeled(d / "test.jsonl", g) if cfg["patience"] and (d / "test.jsonl").exists() else None
    tc = cfg.section("train")
    params, history = train(g, samples, tc, valid=valid)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    save_params(params, out / "model.ckpt", seed=tc.seed, config=cfg.model_dict())
    write_loss_curve(out / "loss_curve.tsv", history)
    _write_config(cfg, out, "train.cfg")
    log.info("final train loss %.5f", history[-1][1] if history else float("nan"))
    return 0


def _model(g, params, enc_cfg):
    return lambda sample: encode(g, sample.trajectory, params, enc_cfg)


def cmd_evaluate(args, cfg):
    g = _graph(cfg)
    d = Path(cfg["data_dir"])
    samples = _labeled(d / f"{args.split}.jsonl", g)
    train_samples = _labeled(d / "train.jsonl", g)
    params, enc_cfg = _checkpoint(args, cfg)
    known = [list(s.prefix_path or ()) + list(s.true_suffix or ()) for s in train_samples]
    models = {
        "model": _model(g, params, enc_cfg),
        "uniform": bl.uniform_weights(g, backtracking_allowed=True),
        "uniform_nb": bl.uniform_weights(g),
        "reweighted": bl.reweighted_weights(g, [p for p in known if len(p) > 1]),
    }
    if args.embeddings:
        scorer = bl.bilinear_target_scorer(train_samples, bl.load_embeddings(args.embeddings, g.n),
                                           seed=cfg["seed"])
        scorer.graph = g
        models["bilinear"] = scorer
    names = list(models)
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        reports = list(pool.map(lambda n: bl.evaluate(models[n], samples, seed=cfg["seed"]), names))
    reports = dict(zip(names, reports))
    print(bl.format_table(reports))
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    blob = json.dumps({k: r.as_dict() for k, r in reports.items()}, sort_keys=True, indent=2)
    (out / "metrics.json").write_text(blob + "\n", encoding="utf-8")
    _write_config(cfg, out, "evaluate.cfg")
    return 0


def _queries(args, cfg, g):
    path = Path(args.input) if args.input else Path(cfg["data_dir"]) / "test.jsonl"
    return data.read_trajectories(path, g, horizon=args.horizon)


def _emit(args, lines):
    text = "".join(json.dumps(x, sort_keys=True) + "\n" for x in lines)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_predict(args, cfg):
    if args.top < 1:
        raise ConfigError("--top must be >= 1")
    g = _graph(cfg)
    params, enc_cfg = _checkpoint(args, cfg)
    lines = []
    for i, q in enumerate(_queries(args, cfg, g)):
        lat = encode(g, q.trajectory, params, enc_cfg)
        for suffix, ll in top_suffixes(lat, q.trajectory.last, q.horizon, args.top,
                                       n_samples=args.samples, seed=cfg["seed"] + i):
            lines.append({"trajectory": i, "suffix": list(suffix.nodes), "log_likelihood": ll})
    _emit(args, lines)
    return 0


def cmd_sample(args, cfg):
    g = _graph(cfg)
    params, enc_cfg = _checkpoint(args, cfg)
    rng = np.random.default_rng(cfg["seed"])
    lines = []
    for i, q in enumerate(_queries(args, cfg, g)):
        lat = encode(g, q.trajectory, params, enc_cfg)
        for _ in range(args.n):
            s = sample_suffix(lat, q.trajectory.last, q.horizon, rng)
            lines.append({"trajectory": i, "suffix": None if s is None else list(s.nodes)})
    _emit(args, lines)
    return 0


def cmd_export_latent(args, cfg):
    g = _graph(cfg)
    params, enc_cfg = _checkpoint(args, cfg)
    queries = _queries(args, cfg, g)
    if not 0 <= args.index < len(queries):
        raise DataError(f"--index {args.index} outside [0, {len(queries)})")
    q = queries[args.index]
    lat = encode(g, q.trajectory, params, enc_cfg)
    xhat = target_marginal(lat, q.trajectory.last, q.horizon).value
    base = Path(args.output) if args.output else Path(cfg["out_dir"]) / f"latent_{args.index}"
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{base}.edges.tsv", "w", encoding="utf-8") as fh:
        fh.write("edge_id\tsrc\tdst\tweight\n")
        for e, w in enumerate(lat.edge_weights):
            fh.write(f"{e}\t{g.src[e]}\t{g.dst[e]}\t{float(w)!r}\n")
    with open(f"{base}.marginal.tsv", "w", encoding="utf-8") as fh:
        fh.write("node_id\tmass\n")
        for v, m in enumerate(xhat):
            fh.write(f"{v}\t{float(m)!r}\n")
    with open(f"{base}.observations.tsv", "w", encoding="utf-8") as fh:
        fh.write("observation\tindex\tnode_id\tmass\n")
        for k, (obs, t) in enumerate(zip(q.trajectory.observations, q.trajectory.indices)):
            for v, m in obs.items():
                fh.write(f"{k}\t{t}\t{v}\t{m!r}\n")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "sample": cmd_sample,
    "export-latent": cmd_export_latent,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return COMMANDS[args.command](args, _config(args))
    except PathInferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
