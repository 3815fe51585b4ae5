"""Command-line driver: ``ndvq {train,encode,decode,eval,stats}``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import codec, metrics, training
from . import quantizer as qz
from .signal import AudioBuffer, load_wav, save_wav

log = logging.getLogger("ndvq")

HIGHLIGHT_LAYERS = (1, 8, 16, 32)


class CliError(Exception):
    pass


# -- configuration -------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` overrides; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(values))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise CliError(f"override {item!r} is not of the form key=value")
        node = out
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise CliError(f"override {key!r}: {part!r} is not a section")
            node = child
        node[leaf] = _parse_value(raw)
    return out


def resolve_config(path: str | None, overrides: list[str], seed: int | None) -> training.TrainConfig:
    """Toy defaults, then the config file, then key=value overrides, then --seed."""
    values = training.toy_config().to_dict()
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError(f"config {path} must contain a JSON object")
        values = _merge(values, loaded)
    values = apply_overrides(values, overrides)
    if seed is not None:
        values["seed"] = seed
    try:
        return training.config_from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _load(checkpoint: str):
    try:
        return training.load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint {checkpoint}: missing {Path(exc.filename).name}") from exc


def _dataset(args, cfg: training.TrainConfig) -> list[AudioBuffer]:
    if args.data is not None:
        files = sorted(Path(args.data).glob("*.wav"))
        if not files:
            raise CliError(f"no .wav files in {args.data}")
        return [load_wav(f) for f in files]
    seed = cfg.seed if args.seed is None else args.seed
    return training.split_dataset(training.generate_dataset(cfg.data, seed), cfg.holdout_fraction)[1]


def _bandwidth_label(bw: float) -> str:
    return f"{bw:g}".replace(".", "p")


# -- subcommands ---------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.overrides, args.seed)
    log.info("resolved config:\n%s", training.config_json(cfg).rstrip())
    out = Path(args.out)
    existed = out.exists()
    try:
        dataset = training.generate_dataset(cfg.data, cfg.seed)
        result = training.train(cfg, dataset, out)
    except BaseException:
        if not existed:
            shutil.rmtree(out, ignore_errors=True)
        raise
    first, last = training.window_means(result.history) if result.history else (float("nan"),) * 2
    print(f"trained {cfg.steps} steps; loss window means first={first:.6g} last={last:.6g}; checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_encode(args) -> int:
    cfg, model, rq = _load(args.checkpoint)
    try:
        n_q = codec.bandwidth_to_nq(args.bandwidth, cfg.codec.frame_rate, max_layers=len(rq.layers))
    except codec.ConfigError as exc:
        raise CliError(str(exc)) from exc
    audio = load_wav(args.input)
    z = codec.encode(model, audio)
    rq.active_layers = n_q
    indices = qz.quantize_infer(rq, z).indices
    header = codec.StreamHeader(cfg.codec.sample_rate, cfg.codec.strides, cfg.codec.latent_dim, rq.codebook_size, n_q, len(z))
    data = codec.pack_bitstream(indices, header)
    Path(args.output).write_bytes(data)
    bps = codec.achieved_bitrate(header, cfg.codec.frame_rate)
    print(f"n_q={n_q} frames={len(z)} bytes={len(data)} bitrate={bps / 1000:g} kbps")
    return 0


def check_stream(header: codec.StreamHeader, cfg: training.TrainConfig, rq: qz.ResidualQuantizer) -> None:
    """Raise naming every header field that disagrees with the checkpoint."""
    expected = {
        "sample_rate": cfg.codec.sample_rate,
        "strides": tuple(cfg.codec.strides),
        "latent_dim": rq.dim,
        "codebook_size": rq.codebook_size,
    }
    bad = [f"{k} (stream {getattr(header, k)}, checkpoint {v})" for k, v in expected.items() if getattr(header, k) != v]
    if header.n_q > len(rq.layers):
        bad.append(f"n_q (stream {header.n_q}, checkpoint has {len(rq.layers)} layers)")
    if bad:
        raise CliError("bitstream does not match checkpoint: " + "; ".join(bad))


def cmd_decode(args) -> int:
    cfg, model, rq = _load(args.checkpoint)
    try:
        header, indices = codec.unpack_bitstream(Path(args.input).read_bytes())
    except OSError as exc:
        raise CliError(f"cannot read {args.input}: {exc.strerror}") from exc
    check_stream(header, cfg, rq)
    rq.active_layers = header.n_q
    latents = qz.decode_indices(rq, indices)
    audio = codec.decode(model, latents)
    save_wav(args.output, AudioBuffer(audio.samples, header.sample_rate))
    print(f"wrote {len(audio)} samples at {header.sample_rate} Hz")
    return 0


def cmd_eval(args) -> int:
    cfg, model, rq = _load(args.checkpoint)
    dataset = _dataset(args, cfg)
    bandwidths = args.bandwidth or [codec.valid_bandwidths(cfg.codec.frame_rate, max_layers=len(rq.layers))[-1]]
    try:
        plan = [(bw, codec.bandwidth_to_nq(bw, cfg.codec.frame_rate, max_layers=len(rq.layers))) for bw in bandwidths]
    except codec.ConfigError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for bw, n_q in plan:
        report = metrics.evaluate(model, rq, dataset, n_q=n_q)
        sys.stdout.write(report.to_text() + "\n")
        if out is not None:
            stem = f"eval_{_bandwidth_label(bw)}kbps"
            (out / f"{stem}.txt").write_text(report.to_text())
            (out / f"{stem}.json").write_text(report.to_json())
    return 0


def sigma_table(rq: qz.ResidualQuantizer) -> str:
    lines = [f"{'layer':>5}  {'sigma_min':>10}  {'sigma_mean':>10}  {'sigma_max':>10}  {'|mu|_mean':>10}"]
    for i, layer in enumerate(rq.layers):
        sigma = layer.sigma if rq.kind == qz.KIND_NORMAL else np.ones(1)
        norms = np.linalg.norm(layer.mu, axis=1)
        lines.append(f"{i + 1:>5}  {sigma.min():>10.4f}  {sigma.mean():>10.4f}  {sigma.max():>10.4f}  {norms.mean():>10.4f}")
    return "\n".join(lines)


def entropy_table(entropies: list[float]) -> str:
    lines = [f"{'layer':>5}  {'entropy_bits':>12}"]
    for i, h in enumerate(entropies):
        mark = "  *" if i + 1 in HIGHLIGHT_LAYERS else ""
        lines.append(f"{i + 1:>5}  {h:>12.2f}{mark}")
    return "\n".join(lines)


def cmd_stats(args) -> int:
    cfg, model, rq = _load(args.checkpoint)
    kind = "normal" if rq.kind == qz.KIND_NORMAL else "euclidean"
    print(f"codebooks: kind={kind} layers={len(rq.layers)} K={rq.codebook_size} D={rq.dim}")
    print(sigma_table(rq))
    if args.data is not None or args.synthetic:
        hist = qz.UsageHistogram.empty(len(rq.layers), rq.codebook_size)
        for clip in _dataset(args, cfg):
            hist.add(qz.quantize_infer(rq, codec.encode(model, clip)).indices)
        print()
        print("usage entropy (* marks layers 1, 8, 16, 32)")
        print(entropy_table(hist.entropies()))
    return 0


# -- entry point ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every random stream")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="log warnings only")
    parser = argparse.ArgumentParser(prog="ndvq", description="Residual normal-distribution VQ audio codec.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy codec", parents=[common])
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="WAV -> .ndvc bitstream", parents=[common])
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--bandwidth", type=float, required=True, help="target kbps")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help=".ndvc bitstream -> WAV (mean-only)", parents=[common])
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_decode)

    for name, func, text in (("eval", cmd_eval, "per-bandwidth evaluation"), ("stats", cmd_stats, "codebook statistics")):
        p = sub.add_parser(name, help=text, parents=[common])
        p.add_argument("checkpoint")
        src = p.add_mutually_exclusive_group()
        src.add_argument("--data", help="directory of .wav clips")
        src.add_argument("--synthetic", action="store_true", help="held-out clips of the checkpoint's synthetic dataset")
        if name == "eval":
            p.add_argument("--bandwidth", type=float, nargs="+", help="kbps values (default: all layers)")
            p.add_argument("--out", help="directory for eval_<bw>kbps.{txt,json}")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.seed = getattr(args, "seed", None)
    level = logging.WARNING if getattr(args, "quiet", False) else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, training.NonFiniteLossError) as exc:
        print(f"ndvq {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
