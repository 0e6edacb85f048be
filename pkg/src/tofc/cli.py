"""Command line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 format or CRC
error, 4 network error, 5 training divergence.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from .codec.container import compress_request, decode_request
from .edgelink import (
    ChannelConfig,
    EdgeClient,
    EdgeServer,
    PipelineConfig,
    ServerComputeModel,
    Status,
    TcpEdgeServer,
    compare_pipelines,
    write_bench,
)
from .errors import ConfigError, FormatError, InvalidArgumentError, NetworkError, TrainingDivergence
from .features import FeatureTensor, SyntheticSpec, load_features, save_features, synth_features, synth_two_source
from .merge import DEFAULT_K, merge
from .selector import ModelBank
from .trainer import TrainConfig, load_config, rd_sweep, train, write_history, write_sweep

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NETWORK = 4
EXIT_DIVERGENCE = 5

log = logging.getLogger("tofc")


def _config(args):
    cfg, raw = load_config(args.config)
    if args.seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg, raw


def dataset_from(section, seed=None):
    """Features described by a config ``data`` section."""
    section = dict(section or {})
    kind = section.pop("kind", "synthetic")
    if seed is not None:
        section["seed"] = seed
    if kind == "file":
        if "path" not in section:
            raise ConfigError("data.kind 'file' needs a path")
        return load_features(section["path"])
    if kind == "synthetic":
        if "channel_scales" in section and section["channel_scales"] is not None:
            section["channel_scales"] = tuple(section["channel_scales"])
        try:
            return synth_features(SyntheticSpec(**section))
        except TypeError as exc:
            raise ConfigError(f"bad synthetic data keys: {exc}") from exc
    if kind == "two_source":
        try:
            return synth_two_source(**section)[0]
        except TypeError as exc:
            raise ConfigError(f"bad two_source data keys: {exc}") from exc
    raise ConfigError(f"unknown data kind {kind!r}")


def channel_from(raw):
    return ChannelConfig(**raw.get("channel", {}))


def compute_from(raw):
    return ServerComputeModel(**raw.get("compute", {}))


def _load_bank(path):
    if path is None:
        raise ConfigError("a parameter bank directory is required")
    return ModelBank.load(path)


def _merged_input(args):
    features = load_features(args.input)
    if getattr(args, "n_c", None):
        return merge(features, args.n_c, args.k).data
    return features.data


# subcommands -----------------------------------------------------------------------


def cmd_synth(args):
    spec = SyntheticSpec(
        cluster_count=args.clusters, d_v=args.d_v, n_v=args.n_v, spread=args.spread, seed=args.seed or 0, n_p=args.n_p
    )
    save_features(synth_features(spec), args.out)
    print(f"wrote {args.n_p}x{args.n_v}x{args.d_v} features to {args.out}")


def cmd_merge(args):
    features = load_features(args.input)
    merged = merge(features, args.n_c, args.k)
    save_features(FeatureTensor(merged.data.astype(np.float32)), args.out)
    print(f"merged {features.n_v} -> {args.n_c} features per patch (ratio {merged.token_ratio:.4%})")


def cmd_encode(args):
    bank = _load_bank(args.bank)
    encoded = compress_request(_merged_input(args), bank)
    data = encoded.bitstream.to_bytes()
    with open(args.out, "wb") as fh:
        fh.write(data)
    print(f"wrote {len(data)} bytes, checksum {encoded.checksum:016x}")


def cmd_decode(args):
    bank = _load_bank(args.bank)
    with open(args.input, "rb") as fh:
        data = fh.read()
    decoded = decode_request(data, bank)
    save_features(FeatureTensor(decoded.reconstruction), args.out)
    print(f"decoded {decoded.residuals.shape}, checksum {decoded.checksum:016x}")


def cmd_roundtrip(args):
    bank = _load_bank(args.bank)
    encoded = compress_request(_merged_input(args), bank)
    data = encoded.bitstream.to_bytes()
    decoded = decode_request(data, bank)
    if decoded.checksum != encoded.checksum:
        print(f"checksum mismatch: {encoded.checksum:016x} != {decoded.checksum:016x}", file=sys.stderr)
        return EXIT_FORMAT
    parts = encoded.bitstream.breakdown()
    print("section,bits")
    for name, bits in parts.items():
        print(f"{name},{bits}")
    print(f"total,{sum(parts.values())}")
    print(f"estimate,{encoded.estimated_bits:.1f}")
    print(f"checksum,{encoded.checksum:016x}")
    return EXIT_OK


def cmd_train(args):
    cfg, raw = _config(args)
    data = dataset_from(raw.get("data"), args.seed)
    os.makedirs(args.out, exist_ok=True)
    try:
        result = train(data, cfg)
    except TrainingDivergence as exc:
        if exc.history:
            write_history(exc.history, os.path.join(args.out, "history.csv"))
        raise
    write_history(result.history, os.path.join(args.out, "history.csv"))
    result.bank.save(os.path.join(args.out, "bank"))
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump({**raw, "train": cfg.to_dict()}, fh, indent=2)
    last = result.history[-1]
    print(f"trained {cfg.steps} steps: L={last['L']:.6g} D={last['D']:.6g} R={last['R']:.6g}")


def cmd_sweep(args):
    cfg, raw = _config(args)
    data = dataset_from(raw.get("data"), args.seed)
    rows = rd_sweep(data, args.lambdas, args.ncs, cfg)
    write_sweep(rows, args.out)
    for row in rows:
        print(f"lambda={row['lambda']:g} n_c={row['n_c']} bits/element={row['bits_per_element']:.4f} D={row['distortion']:.6g}")


def cmd_serve(args):
    _, raw = load_config(args.config)
    server_cfg = raw.get("server", {})
    bank = _load_bank(args.bank or server_cfg.get("bank"))
    edge = EdgeServer(bank, compute_from(raw), echo=bool(server_cfg.get("echo", False)))
    host = args.host or server_cfg.get("host", "127.0.0.1")
    port = args.port if args.port is not None else int(server_cfg.get("port", 7878))
    try:
        tcp = TcpEdgeServer(edge, host, port)
    except OSError as exc:
        raise NetworkError(f"cannot listen on {host}:{port}: {exc}") from exc
    print(f"serving on {tcp.address[0]}:{tcp.address[1]}", flush=True)
    try:
        tcp.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def _parse_addr(addr):
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address must look like host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def cmd_send(args):
    host, port = _parse_addr(args.addr)
    expected = None
    if args.bank:
        encoded = compress_request(_merged_input(args), _load_bank(args.bank))
        container, expected = encoded.bitstream.to_bytes(), encoded.checksum
    else:
        with open(args.input, "rb") as fh:
            container = fh.read()
    with EdgeClient(host, port, timeout=args.timeout) as client:
        response = client.request(args.instruction, container)
    print(f"status={response.status.name} server_ms={response.server_ms:.3f} checksum={response.checksum:016x}")
    if response.status != Status.OK:
        return EXIT_FORMAT
    if expected is not None and expected != response.checksum:
        print(f"checksum mismatch: sent {expected:016x}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


def cmd_bench(args):
    _, raw = load_config(args.config)
    bench = raw.get("bench", {})
    data = dataset_from(raw.get("data"), args.seed)
    n_c = int(bench.get("n_c", 16))
    configs = []
    for name in args.pipelines:
        if name not in ("raw", "tofc"):
            raise ConfigError(f"unknown pipeline {name!r}")
        configs.append(PipelineConfig(name, name, n_c=n_c, k=int(bench.get("k", DEFAULT_K))))
    bank = _load_bank(args.bank or bench.get("bank")) if "tofc" in args.pipelines else None
    rows = compare_pipelines(data, configs, channel_from(raw), compute_from(raw), bank=bank)
    write_bench(rows, args.out)
    for row in rows:
        print(
            f"{row['pipeline']}: bits={row['bits']} tx_ms={row['tx_ms']:.3f} "
            f"server_ms={row['server_ms']:.3f} total_ms={row['total_ms']:.3f}"
        )


# parser -------------------------------------------------------------------------------


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _names(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="tofc", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="override every seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic clustered features")
    p.add_argument("--out", required=True)
    p.add_argument("--n-p", type=int, default=4)
    p.add_argument("--n-v", type=int, default=64)
    p.add_argument("--d-v", type=int, default=32)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--spread", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("merge", help="merge features per patch")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--n-c", type=int, required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    for name, func, help_text in (
        ("encode", cmd_encode, "entropy-code merged features into a container"),
        ("roundtrip", cmd_roundtrip, "encode, decode and print the bit breakdown"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--bank", required=True)
        p.add_argument("--n-c", type=int, default=None, help="merge raw features first")
        p.add_argument("--k", type=int, default=DEFAULT_K)
        if name == "encode":
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("decode", help="decode a container into features")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train a model bank")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="rate-distortion sweep to CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", type=_floats, required=True)
    p.add_argument("--ncs", type=_ints, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve", help="run the edge server")
    p.add_argument("--config", required=True)
    p.add_argument("--bank", default=None)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("send", help="send one request to an edge server")
    p.add_argument("--addr", required=True)
    p.add_argument("--in", dest="input", required=True, help="container, or features with --bank")
    p.add_argument("--instruction", default="")
    p.add_argument("--bank", default=None)
    p.add_argument("--n-c", type=int, default=None)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_send)

    p = sub.add_parser("bench", help="latency comparison table")
    p.add_argument("--config", required=True)
    p.add_argument("--pipelines", type=_names, default=["raw", "tofc"])
    p.add_argument("--bank", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = args.func(args)
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NetworkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (ConfigError, InvalidArgumentError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
