"""Command line front end: ``dsconv <command> ...`` or ``python -m dsconv``.

Exit codes: 0 ok, 2 invalid configuration, 3 unreadable or malformed file,
4 shape mismatch, 5 comparison threshold exceeded.

``--format kv`` switches every report to one ``key=value`` pair per line.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import cost, fileformat
from .activations import bfp_decode, bfp_encode_tensor
from .engine import BNParams, DSConvLayer, MacCounter, fold_bn_layer, run_fp_model, run_model
from .errors import ConfigError, FormatError, ShapeError
from .tensor import ConvParams
from .weights import QuantConfig, check_bits, dequantize

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_SHAPE, EXIT_THRESHOLD = 0, 2, 3, 4, 5


class Report:
    """Collects ordered key/value pairs and prints them as text or kv lines."""

    def __init__(self, fmt: str, out=None):
        self.fmt = fmt
        self.out = out or sys.stdout

    def line(self, text: str, **fields) -> None:
        if self.fmt == "kv":
            for k, v in fields.items():
                print(f"{k}={v}", file=self.out)
        else:
            print(text, file=self.out)


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def relative_rms(a, ref) -> float:
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    den = np.sqrt(np.mean(ref**2))
    num = np.sqrt(np.mean((a - ref) ** 2))
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return float(num / den)


def _load_fp(path) -> np.ndarray:
    t = fileformat.read_tensor(path)
    if not isinstance(t, np.ndarray) or t.dtype != np.float32:
        raise FormatError(f"{path}: expected an fp32 tensor")
    return t


def _load_weights(path) -> np.ndarray:
    w = _load_fp(path)
    if w.ndim != 4:
        raise ShapeError(f"{path}: weights must be rank 4, got shape {w.shape}")
    return w


def _load_input(path) -> np.ndarray:
    x = _load_fp(path)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"{path}: input must be (1, C, H, W), got {x.shape}")
    return x


# -- commands ---------------------------------------------------------------

def cmd_synth(args, rep: Report) -> int:
    rng = np.random.default_rng(args.seed)
    t = (rng.standard_normal(args.shape) * args.std).astype(np.float32)
    if args.relu:
        t = np.maximum(t, 0)
    fileformat.write_tensor(args.output, t)
    rep.line(f"wrote {args.output} shape={args.shape}", path=args.output,
             shape=",".join(map(str, args.shape)))
    return EXIT_OK


def cmd_quantize(args, rep: Report) -> int:
    cfg = QuantConfig(args.b, args.B)
    params = ConvParams(args.stride, args.pad)
    biases = args.bias or []
    if biases and len(biases) != len(args.weights):
        raise ConfigError("give one --bias per weights file or none")
    layers = []
    for n, path in enumerate(args.weights):
        w = _load_weights(path)
        bias = _load_fp(biases[n]).ravel() if biases else None
        layer = DSConvLayer.from_weights(w, bias, cfg, params, args.mode, Path(path).stem)
        layers.append(layer)
        c_out, c_in, kh, kw = w.shape
        w_hat = dequantize(layer.vqk, layer.kds, cfg)
        rms = float(np.sqrt(np.mean((w_hat.astype(np.float64) - w) ** 2)))
        rel = relative_rms(w_hat, w)
        p = cost.memory_saving_exact(c_in, cfg.B, cfg.b)
        per_fp, per_int = cost.mac_counts((1, c_in, kh, kw), cfg.B)
        pre = f"layer{n}."
        rep.line(f"[{layer.name}] shape={c_out}x{c_in}x{kh}x{kw} b={cfg.b} B={cfg.B} "
                 f"mode={args.mode}", **{pre + "name": layer.name,
                                          pre + "shape": f"{c_out},{c_in},{kh},{kw}"})
        rep.line(f"  reconstruction RMS: {rms:.6g} (relative {rel:.6g})",
                 **{pre + "rms": f"{rms:.9g}", pre + "relative_rms": f"{rel:.9g}"})
        rep.line(f"  saving {cost.format_percent(p)} (p={float(p):.6f})",
                 **{pre + "saving": f"{float(p):.9g}"})
        rep.line(f"  FP MACs/filter-pos: {per_int} → {per_fp}",
                 **{pre + "fp_macs_per_filter_pos_before": per_int,
                    pre + "fp_macs_per_filter_pos_after": per_fp})
        if args.dump_scales:
            np.savetxt(args.dump_scales if len(args.weights) == 1
                       else f"{args.dump_scales}.{n}", layer.kds.ravel(), fmt="%.9g")
    fileformat.write_model(args.output, layers)
    rep.line(f"wrote {args.output} ({len(layers)} layer(s))", model=args.output)
    return EXIT_OK


def cmd_infer(args, rep: Report) -> int:
    layers = fileformat.read_model(args.model)
    x = _load_input(args.input)
    if args.b_act is not None:
        check_bits(args.b_act)
    counter = MacCounter()
    y = run_model(layers, x, args.b_act, args.relu_first, args.workers, counter)
    fileformat.write_tensor(args.output, y)
    rep.line(f"output shape={'x'.join(map(str, y.shape))}",
             shape=",".join(map(str, y.shape)))
    rep.line(f"FP MACs: {counter.fp_macs}", fp_macs=counter.fp_macs)
    rep.line(f"INT MACs: {counter.int_macs}", int_macs=counter.int_macs)
    return EXIT_OK


def cmd_compare(args, rep: Report) -> int:
    layers = fileformat.read_model(args.model)
    if len(args.weights) != len(layers):
        raise ShapeError(f"model has {len(layers)} layers, got {len(args.weights)} weight files")
    weights = [_load_weights(p) for p in args.weights]
    for layer, w in zip(layers, weights):
        if w.shape != layer.weight_shape:
            raise ShapeError(f"weights {w.shape} do not match layer {layer.weight_shape}")
    x = _load_input(args.input)
    b_act = args.b_act
    y = run_model(layers, x, b_act, args.relu_first, args.workers)

    biases = [l.bias for l in layers]
    params = [l.params for l in layers]
    ref_fp = run_fp_model(weights, biases, params, x, args.relu_first)

    def decoded(t, n):
        b = layers[n].cfg.b if b_act is None else b_act
        return bfp_decode(bfp_encode_tensor(t, b, layers[n].cfg.B))

    deq = [dequantize(l.vqk, l.kds, l.cfg) for l in layers]
    ref_deq = run_fp_model(deq, biases, params, x, args.relu_first, act_quant=decoded)

    rms_fp = relative_rms(y, ref_fp)
    rms_deq = relative_rms(y, ref_deq)
    rep.line(f"relative RMS vs full-precision reference: {rms_fp:.6g}",
             relative_rms_fp=f"{rms_fp:.9g}")
    rep.line(f"relative RMS vs dequantized reference:    {rms_deq:.6g}",
             relative_rms_dequantized=f"{rms_deq:.9g}")
    if args.threshold is not None:
        value = rms_fp if args.against == "fp" else rms_deq
        ok = value <= args.threshold
        rep.line(f"threshold {args.threshold:g} on {args.against}: {'ok' if ok else 'EXCEEDED'}",
                 threshold=args.threshold, threshold_ok=str(ok).lower())
        if not ok:
            return EXIT_THRESHOLD
    return EXIT_OK


def cmd_cost(args, rep: Report) -> int:
    pos = list(args.values)
    if len(pos) > 3:
        raise ConfigError("cost takes at most three positionals: C_i B b")
    c_in = args.c_in if args.c_in is not None else (pos[0] if len(pos) > 0 else None)
    B = args.B if args.B is not None else (pos[1] if len(pos) > 1 else 64)
    b = args.b if args.b is not None else (pos[2] if len(pos) > 2 else 4)
    if args.shape:
        if len(args.shape) != 4:
            raise ConfigError("--shape takes C_o,C_i,K_h,K_w")
        c_in = args.shape[1] if c_in is None else c_in
    if c_in is None:
        c_in = B  # any multiple of B gives the divisible-case ratio
    check_bits(b)
    shape = args.shape or (1, c_in, 1, 1)
    if shape[1] != c_in:
        raise ShapeError(f"--shape has C_i={shape[1]} but C_i={c_in} was given")
    rpt = cost.cost_report(shape, B, b, args.out_hw, args.eta)
    p = cost.memory_saving_exact(c_in, B, b)
    ratio = cost.speed_ratio_exact(c_in, B, args.eta)
    rep.line(f"C_i={c_in} B={B} b={b} eta={args.eta:g}", C_i=c_in, B=B, b=b, eta=args.eta)
    rep.line(f"saving {cost.format_percent(p)}", saving=f"{float(p):.9g}",
             saving_percent=cost.format_percent(p))
    rep.line(f"ratio {cost.format_ratio(ratio)}", ratio=cost.format_ratio(ratio),
             ratio_exact=f"{float(ratio):.9g}")
    rep.line(f"max speedup {rpt.max_speedup}x", max_speedup=rpt.max_speedup)
    rep.line(f"FP MACs/filter-pos: {rpt.int_macs_per_filter_position} → "
             f"{rpt.fp_macs_per_filter_position}",
             fp_macs_per_filter_pos_before=rpt.int_macs_per_filter_position,
             fp_macs_per_filter_pos_after=rpt.fp_macs_per_filter_position)
    if args.shape:
        rep.line(f"layer FP MACs {rpt.fp_macs}, INT MACs {rpt.int_macs}",
                 fp_macs=rpt.fp_macs, int_macs=rpt.int_macs)
    return EXIT_OK


def cmd_fold_bn(args, rep: Report) -> int:
    layers = fileformat.read_model(args.model)
    if not 0 <= args.layer < len(layers):
        raise ConfigError(f"--layer {args.layer} out of range for {len(layers)} layer(s)")
    bn_arr = _load_fp(args.bn)
    target = layers[args.layer]
    if bn_arr.ndim != 2 or bn_arr.shape[0] != 4:
        raise ShapeError(f"BN file must be (4, C_o) rows gamma,beta,mean,var; got {bn_arr.shape}")
    if bn_arr.shape[1] != target.out_channels:
        raise ShapeError(f"BN has {bn_arr.shape[1]} channels, layer has {target.out_channels}")
    bn = BNParams(*bn_arr, eps=args.eps)
    layers[args.layer] = fold_bn_layer(target, bn)
    fileformat.write_model(args.output, layers)
    rep.line(f"folded BN into layer {args.layer} ({target.name}); wrote {args.output}",
             layer=args.layer, model=args.output)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsconv", description=__doc__.splitlines()[0])
    p.add_argument("--format", choices=("text", "kv"), default="text")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a seeded Gaussian fp32 tensor")
    s.add_argument("--shape", type=_ints, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--std", type=float, default=1.0)
    s.add_argument("--relu", action="store_true", help="clip negatives to zero")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    q = sub.add_parser("quantize", help="quantize fp32 weight tensors into a model file")
    q.add_argument("weights", nargs="+")
    q.add_argument("--b", type=int, default=4)
    q.add_argument("--B", type=int, default=64)
    q.add_argument("--mode", choices=("l2", "kl"), default="l2")
    q.add_argument("--bias", action="append")
    q.add_argument("--stride", type=int, default=1)
    q.add_argument("--pad", type=int, default=0)
    q.add_argument("--dump-scales", help="also write every block scale as text")
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("infer", help="run a model on an input tensor")
    i.add_argument("model")
    i.add_argument("input")
    i.add_argument("--b-act", type=int)
    i.add_argument("--relu-first", action="store_true")
    i.add_argument("--workers", type=int, default=1)
    i.add_argument("-o", "--output", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("compare", help="compare a model against the FP reference")
    c.add_argument("model")
    c.add_argument("input")
    c.add_argument("--weights", nargs="+", required=True, help="fp32 weights, one per layer")
    c.add_argument("--b-act", type=int)
    c.add_argument("--relu-first", action="store_true")
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--threshold", type=float)
    c.add_argument("--against", choices=("fp", "dequantized"), default="fp")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("cost", help="memory and compute cost model")
    k.add_argument("values", nargs="*", type=int, metavar="C_i B b")
    k.add_argument("--Ci", dest="c_in", type=int)
    k.add_argument("--B", type=int)
    k.add_argument("--b", type=int)
    k.add_argument("--eta", type=float, default=0.0)
    k.add_argument("--shape", type=_ints, help="C_o,C_i,K_h,K_w")
    k.add_argument("--out-hw", type=_ints, default=(1, 1))
    k.set_defaults(func=cmd_cost)

    f = sub.add_parser("fold-bn", help="fold batch-norm parameters into a layer")
    f.add_argument("model")
    f.add_argument("bn", help="fp32 tensor (4, C_o): gamma, beta, mean, var")
    f.add_argument("--layer", type=int, default=0)
    f.add_argument("--eps", type=float, default=1e-5)
    f.add_argument("-o", "--output", required=True)
    f.set_defaults(func=cmd_fold_bn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    rep = Report(args.format)
    try:
        return args.func(args, rep)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, exc
    except ShapeError as exc:
        code, msg = EXIT_SHAPE, exc
    except (FormatError, OSError) as exc:
        code, msg = EXIT_FORMAT, exc
    print(f"dsconv: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
