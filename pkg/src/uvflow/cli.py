"""Command-line entry point: ``uvflow <command> ...``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Every run writes ``<output>.manifest.json`` next to its main output.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger("uvflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def load_defaults(path=None) -> dict:
    text = resources.files("uvflow").joinpath("defaults.json").read_text()
    d = json.loads(text)
    if path:
        user = json.loads(Path(path).read_text())
        for k, v in user.items():
            if k not in d:
                raise ValueError(f"unknown config section {k!r}")
            d[k] = {**d[k], **v} if isinstance(v, dict) else v
    return d


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _hashes(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and not f.name.endswith(".manifest.json"):
                    out[str(f)] = sha256_file(f)
        elif p.exists():
            out[str(p)] = sha256_file(p)
    return out


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def write_manifest(path, argv, config: dict, seeds: dict, inputs, outputs, t0: float) -> None:
    import torch

    from . import toyfaces

    man = {
        "command": ["uvflow", *argv],
        "config_digest": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "seeds": seeds,
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
        "wall_clock_s": round(time.time() - t0, 3),
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__,
                     "layout": toyfaces.LAYOUT_VERSION},
    }
    write_atomic(path, (json.dumps(man, indent=1, sort_keys=True) + "\n").encode())


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "run.manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _write_png(path, img) -> None:
    from .toyfaces import to_png_bytes

    write_atomic(path, to_png_bytes(img))


def _write_csv(path, header, rows) -> None:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    write_atomic(path, buf.getvalue().encode())


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _guidance(d: dict, args):
    from .sampler import GuidanceConfig

    g = dict(d["guidance"])
    for k in ("eta", "steps"):
        if getattr(args, k, None) is not None:
            g[k] = getattr(args, k)
    return GuidanceConfig(**g)


def _load_png(path):
    from .toyfaces import load_png

    return load_png(path)


def _detector(path):
    from .landmarks import load_detector

    return load_detector(path) if path else None


# ---------------------------------------------------------------------------
# commands; each returns (inputs, outputs, seeds)


def cmd_gen(args, d):
    from .toyfaces import DatasetConfig, dataset_gen

    ds = d["dataset"]
    cfg = DatasetConfig(tuple(tuple(x) for x in ds["style_proportions"]), ds["occlusion_prob"], ds["max_pose_shift"])
    dataset_gen(args.n, args.seed, args.out, cfg, workers=args.threads or 1)
    return [], [args.out], {"seed": args.seed}


def cmd_train_landmarks(args, d):
    from .landmarks import DetectorConfig, DetectorTrainConfig, mean_error, save_detector, train_detector
    from .toyfaces import load_dataset

    data = load_dataset(args.data)
    tc = {**d["detector_train"], "seed": args.seed}
    if args.epochs is not None:
        tc["epochs"] = args.epochs
    dc = {**d["detector"], "widths": tuple(d["detector"]["widths"])}
    det = train_detector(data.textures, data.landmarks, DetectorTrainConfig(**tc), DetectorConfig(**dc))
    log.info("training-set mean landmark error %.3f px", mean_error(det, data.textures, data.landmarks))
    save_detector(det, args.out)
    return [args.data], [args.out], {"seed": args.seed}


def cmd_train_model(args, d):
    from .flowdit import (FlowDiT, ModelConfig, TrainConfig, checkpoint_from, load_checkpoint, save_checkpoint,
                          train_model)
    from .toyfaces import load_dataset

    mcfg = ModelConfig.from_file(args.config) if args.config else ModelConfig.from_dict(d["model"])
    tc = {**d["train"], "seed": args.seed, "disentangle": bool(args.disentangle)}
    for k in ("steps", "p", "batch_size"):
        if getattr(args, k) is not None:
            tc[k] = getattr(args, k)
    cfg = TrainConfig(**tc)
    data = load_dataset(args.data)
    if args.resume:
        state = load_checkpoint(args.resume, expect=mcfg).resume(cfg)
        model = state.model
    else:
        import torch

        torch.manual_seed(cfg.seed)  # weight init
        model, state = FlowDiT(mcfg), None
    st = train_model(model, data, cfg, state)
    save_checkpoint(checkpoint_from(model, st, {"p": cfg.p, "train": asdict(cfg)}), args.out)
    return [args.data] + ([args.config] if args.config else []), [args.out], {"seed": args.seed}


def cmd_sample(args, d):
    from .flowdit import load_model
    from .sampler import guided_sample

    model, det = load_model(args.model), _detector(args.detector)
    gcfg = _guidance(d, args)
    out, trace = guided_sample(_load_png(args.input)[None], model, det, gcfg, args.seed)
    _write_png(args.out, out[0])
    outs = [args.out]
    if args.trace:
        trace.write_csv(args.trace)
        outs.append(args.trace)
    return [args.model, args.input] + ([args.detector] if args.detector else []), outs, {"seed": args.seed}


def _pair_metrics(out, det, extra=None):
    from .metrics import landmark_l2
    from .toyfaces import canonical_landmarks

    rows = [["landmark_l2", landmark_l2(out, det, canonical_landmarks())]] if det is not None else []
    return rows + (extra or [])


def cmd_transfer(args, d):
    from .editkit import style_transfer
    from .flowdit import load_model
    from .metrics import palette_hist_distance

    model, det = load_model(args.model), _detector(args.detector)
    ident, style = _load_png(args.identity), _load_png(args.style)
    out = style_transfer(ident[None], style[None], model, det, _guidance(d, args), args.seed)[0]
    _write_png(args.out, out)
    outs = [args.out]
    if args.metrics:
        rows = _pair_metrics(out, det, [["palette_dist_identity", palette_hist_distance(out, ident)],
                                        ["palette_dist_style", palette_hist_distance(out, style)]])
        _write_csv(args.metrics, ["metric", "value"], [[k, _fmt(v)] for k, v in rows])
        outs.append(args.metrics)
    ins = [args.model, args.identity, args.style] + ([args.detector] if args.detector else [])
    return ins, outs, {"seed": args.seed}


def cmd_edit(args, d):
    from .editkit import EditRequest, fuse_edit, parse_regions, region_mask, regional_edit
    from .flowdit import load_model
    from .metrics import masked_l2

    model, det = load_model(args.model), _detector(args.detector)
    req = EditRequest(_load_png(args.source), _load_png(args.reference), parse_regions(args.regions))
    gcfg = _guidance(d, args)
    if args.fuse:
        out = fuse_edit(req, model, det, gcfg, args.seed)
    else:
        out = regional_edit(req, model, det, gcfg, args.seed, localize=d["edit"]["localize"])
    _write_png(args.out, out)
    outs = [args.out]
    if args.metrics:
        from .sampler import guided_sample

        base = guided_sample(req.source[None], model, det, gcfg, args.seed)[0][0]
        m = region_mask(req.regions)
        rows = [["in_region_l2_vs_plain", masked_l2(out, base, m)], ["off_region_l2_vs_plain", masked_l2(out, base, ~m)]]
        _write_csv(args.metrics, ["metric", "value"], [[k, _fmt(v)] for k, v in rows])
        outs.append(args.metrics)
    ins = [args.model, args.source, args.reference] + ([args.detector] if args.detector else [])
    return ins, outs, {"seed": args.seed}


def cmd_analyze_snr(args, d):
    from .spectra import crossing_time, mean_spectrum, parse_tgrid, snr_curve, white_noise_power
    from .toyfaces import load_dataset

    data = load_dataset(args.data, limit=args.limit)
    tgrid = parse_tgrid(args.tgrid or d["snr"]["tgrid"])
    spec = mean_spectrum(data.textures, d["snr"]["window"])
    noise = white_noise_power(data.textures.shape[1])
    snr = snr_curve(spec, noise, tgrid)
    tstar = crossing_time(spec, noise)
    header = ["bin_freq", "power"] + [f"snr_t{t:.4f}" for t in tgrid] + ["t_star"]
    rows = [[_fmt(float(f)), _fmt(float(p))] + [f"{float(v):.6e}" for v in snr[i]] + [_fmt(float(tstar[i]))]
            for i, (f, p) in enumerate(zip(spec.freqs, spec.power))]
    _write_csv(args.out, header, rows)
    return [args.data], [args.out], {}


def cmd_analyze_ablation(args, d):
    from .editkit import ablation_sweep, layer_order
    from .flowdit import load_model

    model, det = load_model(args.model), _detector(args.detector)
    eps = d["ablation"]["eps"] if args.eps is None else args.eps
    res = ablation_sweep(_load_png(args.input)[None], model, _guidance(d, args), layer_order(model.cfg, args.order),
                         eps, args.seed, det, d["ablation"]["onset_threshold"])
    regions = list(res.degradation)
    rows = [[k, "" if k == 0 else res.order[k - 1]] + [_fmt(res.degradation[r][k]) for r in regions]
            for k in range(len(res.textures))]
    _write_csv(args.out, ["k", "layer", *[f"l2_{r}" for r in regions]], rows)
    outs = [args.out]
    if args.textures:
        for k, tex in enumerate(res.textures):
            _write_png(Path(args.textures) / f"k{k:02d}.png", tex[0])
        outs.append(args.textures)
    log.info("degradation onset order: %s", " -> ".join(res.onset_order()) or "none")
    return [args.model, args.input], outs, {"seed": args.seed}


def _eval_pairs(pred_dir, gt_dir):
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pairs = []
    for p in sorted(pred_dir.rglob("*.png")):
        sid = str(p.relative_to(pred_dir).with_suffix(""))
        for g in (gt_dir / f"{sid}.png", gt_dir / sid / "texture.png"):
            if g.exists():
                pairs.append((sid, p, g))
                break
        else:
            raise FileNotFoundError(f"no ground truth for prediction {sid!r} under {gt_dir}")
    if not pairs:
        raise FileNotFoundError(f"no predictions under {pred_dir}")
    return pairs


def cmd_eval(args, d):
    from .metrics import evaluate_pairs
    from .toyfaces import canonical_landmarks, region_masks

    pairs = _eval_pairs(args.pred, args.gt)
    preds = [_load_png(p) for _, p, _ in pairs]
    gts = [_load_png(g) for _, _, g in pairs]
    m = region_masks()
    masks = {"skin": m.skin_mask, "mouth": m.mouth_mask, "brow": m.brow_mask}
    det = _detector(args.detector)
    rep = evaluate_pairs(preds, gts, [s for s, _, _ in pairs], det, canonical_landmarks(), masks)
    _write_csv(args.out, ["sample_id", *rep.per_sample], [[r[0], *map(_fmt, r[1:])] for r in rep.rows()])
    for k, v in rep.aggregate.items():
        log.info("mean %s %.4f", k, v)
    return [args.pred, args.gt], [args.out], {}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uvflow", description="Geometry-free toy UV-texture reconstruction by guided flow matching.")
    p.add_argument("--threads", type=int, default=None, help="cap on torch threads and worker processes")
    p.add_argument("--deterministic", action="store_true", help="deterministic kernels, single-threaded reductions")
    p.add_argument("--defaults", default=None, help="JSON overriding sections of the default config")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{gen,train,sample,transfer,edit,analyze,eval}",
                           parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a toy dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    tr = sub.add_parser("train", help="train the landmark detector or the flow model")
    tsub = tr.add_subparsers(dest="what", required=True, parser_class=_Parser)
    tl = tsub.add_parser("landmarks")
    tl.add_argument("--data", required=True)
    tl.add_argument("--out", required=True)
    tl.add_argument("--epochs", type=int)
    tl.add_argument("--seed", type=int, default=0)
    tl.set_defaults(fn=cmd_train_landmarks)
    tm = tsub.add_parser("model")
    tm.add_argument("--data", required=True)
    tm.add_argument("--config", help="model config JSON (all keys optional, unknown keys rejected)")
    tm.add_argument("--out", required=True)
    tm.add_argument("--steps", type=int)
    tm.add_argument("--batch-size", type=int)
    tm.add_argument("--seed", type=int, default=0)
    tm.add_argument("--disentangle", action="store_true")
    tm.add_argument("--p", type=float)
    tm.add_argument("--resume", help="continue from a checkpoint (weights, optimizer, RNG, EMA)")
    tm.set_defaults(fn=cmd_train_model)

    def sampling(sp, detector_required=False):
        sp.add_argument("--model", required=True)
        sp.add_argument("--detector", required=detector_required)
        sp.add_argument("--eta", type=float)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="reconstruct a texture from a portrait")
    sampling(s)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="per-step CSV: step, t, energy, grad_norm")
    s.set_defaults(fn=cmd_sample)

    t = sub.add_parser("transfer", help="identity from one portrait, style from another")
    sampling(t)
    t.add_argument("--identity", required=True)
    t.add_argument("--style", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--metrics")
    t.set_defaults(fn=cmd_transfer)

    e = sub.add_parser("edit", help="take mouth and/or brow regions from a reference")
    sampling(e)
    e.add_argument("--source", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--regions", required=True, help="comma list from {mouth,brow}")
    e.add_argument("--fuse", action="store_true", help="baseline: replace every layer")
    e.add_argument("--out", required=True)
    e.add_argument("--metrics")
    e.set_defaults(fn=cmd_edit)

    an = sub.add_parser("analyze", help="spectral SNR table or attention ablation sweep")
    asub = an.add_subparsers(dest="what", required=True, parser_class=_Parser)
    sn = asub.add_parser("snr")
    sn.add_argument("--data", required=True)
    sn.add_argument("--out", required=True)
    sn.add_argument("--tgrid")
    sn.add_argument("--limit", type=int)
    sn.set_defaults(fn=cmd_analyze_snr)
    ab = asub.add_parser("ablation")
    sampling(ab)
    ab.add_argument("--input", required=True)
    ab.add_argument("--order", default="single_forward",
                    choices=["single_forward", "single_reverse", "all_forward", "all_reverse"])
    ab.add_argument("--eps", type=float)
    ab.add_argument("--out", required=True)
    ab.add_argument("--textures", help="directory for the per-k textures")
    ab.set_defaults(fn=cmd_analyze_ablation)

    ev = sub.add_parser("eval", help="metrics of predicted textures against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--detector")
    ev.add_argument("--out", required=True)
    ev.set_defaults(fn=cmd_eval)
    return p


def _setup(args) -> None:
    import torch

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr, force=True,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        d = load_defaults(args.defaults)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (ValueError, OSError) as e:
        print(f"uvflow: error: {e}", file=sys.stderr)
        return 1
    _setup(args)
    t0 = time.time()
    try:
        inputs, outputs, seeds = args.fn(args, d)
        out0 = outputs[0]
        write_manifest(_manifest_path(out0), argv, d, seeds, inputs, outputs, t0)
    except (ValueError, FileNotFoundError, KeyError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("run failed: %s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
