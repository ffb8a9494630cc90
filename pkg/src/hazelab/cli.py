"""``hazelab`` command line.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
Option precedence: command-line flag, then ``--config`` JSON, then the
built-in default. Every command writes the resolved configuration into
the manifest next to its outputs.
"""
import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import classical, fwbnet, haze
from .autodiff import NumericalError
from .colorspace import ciede2000, psnr, rgb_to_lab, ssim
from .tensor_io import load_image, read_tensor, save_image, write_tensor

log = logging.getLogger("hazelab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def worker_count():
    raw = os.environ.get("HAZELAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HAZELAB_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"HAZELAB_THREADS must be a positive integer, got {raw!r}")
    return n


def _map(fn, items):
    """Order-preserving map over up to HAZELAB_THREADS workers."""
    n = worker_count()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise DataError(f"config file {path} must hold a JSON object")
    return cfg


def _resolve(args, config, defaults):
    """Merge flag > config file > default for every key of ``defaults``."""
    unknown = set(config) - set(defaults)
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else config.get(key, default)
    return out


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_hazy(path):
    """PNG/16-bit raster or an FWBT (H, W, 3) tensor."""
    path = Path(path)
    if path.suffix == ".fwbt":
        img = read_tensor(path)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"{path}: expected an (H, W, 3) tensor, got {img.shape}")
        return img
    return load_image(path)


# -- toy-scenes / synth ------------------------------------------------------


def cmd_toy_scenes(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid, clean, depth in haze.toy_pairs(args.count, args.size, args.seed):
        save_image(clean, out / f"{sid}.png")
        write_tensor(depth, out / f"{sid}.depth.fwbt")
    _write_json(out / "manifest.json", {"command": "toy-scenes", "config": {
        "count": args.count, "size": args.size, "seed": args.seed}})
    print(f"wrote {args.count} clean/depth pairs to {out}")


SYNTH_DEFAULTS = {"beta": 0.35, "a_min": 0.3, "a_max": 1.5, "perturb": 0.2, "seed": 0, "split": 0.3}


def _clean_depth_pairs(clean_dir):
    clean_dir = Path(clean_dir)
    if not clean_dir.is_dir():
        raise DataError(f"clean directory not found: {clean_dir}")
    images = sorted(clean_dir.glob("*.png"))
    if not images:
        raise DataError(f"no .png images in {clean_dir}")
    missing = [p.name for p in images if not (clean_dir / f"{p.stem}.depth.fwbt").is_file()]
    if missing:
        raise DataError(f"missing depth (<name>.depth.fwbt) for: {', '.join(missing)}")
    for p in images:
        yield p.stem, load_image(p), read_tensor(clean_dir / f"{p.stem}.depth.fwbt")


def cmd_synth(args):
    cfg = _resolve(args, _load_config(args.config), SYNTH_DEFAULTS)
    params = haze.HazeParams(cfg["beta"], (cfg["a_min"], cfg["a_max"]), cfg["perturb"])
    pairs = list(_clean_depth_pairs(args.clean_dir))
    summary = haze.build_dataset(args.out, pairs, params, seed=int(cfg["seed"]), test_fraction=cfg["split"])
    summary.update(command="synth", config={**cfg, "clean_dir": str(args.clean_dir)})
    _write_json(Path(args.out) / "manifest.json", summary)
    print(f"synthesized {len(pairs)} scenes into {args.out} "
          f"({len(summary['splits']['train'])} train / {len(summary['splits']['test'])} test)")


# -- train -------------------------------------------------------------------


def _train_defaults():
    sched = {f.name: f.default for f in fields(fwbnet.TrainSchedule)}
    fwb = {f.name: f.default for f in fields(fwbnet.FwbModuleConfig)}
    fwb["width_multiplier"] = 0.25
    etm = {f.name: f.default for f in fields(fwbnet.EtmConfig)}
    return sched, fwb, etm


def _train_config(args):
    sched, fwb, etm = _train_defaults()
    cfg = _resolve(args, _load_config(args.config), {**sched, **fwb, **etm})
    cfg["minpool_kernels"] = tuple(cfg["minpool_kernels"])
    cfg["conv_specs"] = tuple(tuple(s) for s in cfg["conv_specs"])
    try:
        schedule = fwbnet.TrainSchedule(**{k: cfg[k] for k in sched})
        fwb_cfg = fwbnet.FwbModuleConfig(**{k: cfg[k] for k in fwb})
        etm_cfg = fwbnet.EtmConfig(**{k: cfg[k] for k in etm})
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid training config: {exc}")
    return schedule, fwb_cfg, etm_cfg


def cmd_train(args):
    schedule, fwb_cfg, etm_cfg = _train_config(args)
    dataset = Path(args.dataset)
    ds_manifest_path = dataset / "manifest.json"
    if not ds_manifest_path.is_file():
        raise DataError(f"{dataset} has no manifest.json (run synth first)")
    ds_manifest = json.loads(ds_manifest_path.read_text())
    out = Path(args.out_weights)
    run = {
        "command": "train",
        "config": json.loads(json.dumps({**asdict(schedule), **asdict(fwb_cfg), **asdict(etm_cfg)})),
        "dataset": str(dataset),
        "dataset_manifest": ds_manifest,
    }
    net = None
    if args.resume:
        prev = out / "manifest.json"
        if not prev.is_file():
            raise DataError(f"nothing to resume: {prev} does not exist")
        old = json.loads(prev.read_text()).get("run", {})
        # extending max_cycles is the point of resuming; everything else must match
        same_cfg = {k: v for k, v in run["config"].items() if k != "max_cycles"}
        old_cfg = {k: v for k, v in old.get("config", {}).items() if k != "max_cycles"}
        if old_cfg != same_cfg:
            raise DataError(f"refusing to resume: training config differs from the saved run in {out}")
        if old.get("dataset_manifest") != run["dataset_manifest"]:
            raise DataError(f"refusing to resume: dataset differs from the saved run in {out}")
        net = fwbnet.load_weights(out)
        log.info("resuming from step %d", net.step)
    out.mkdir(parents=True, exist_ok=True)
    net, records = fwbnet.train(dataset, fwb_cfg, etm_cfg, schedule, log_path=out / "train_log.jsonl", net=net)
    fwbnet.save_weights(net, out, run={**run, "log": "train_log.jsonl"})
    end = records[-1]
    print(f"trained to step {net.step}: fwb_loss {end['fwb_loss']:.4g}, "
          f"t_mse {end['t_mse']:.4g}, j_mse {end['j_mse']:.4g}")


# -- dehaze / retrofit -------------------------------------------------------


def _pad_to(img, divisor):
    h, w = img.shape[:2]
    ph, pw = (-h) % divisor, (-w) % divisor
    if ph == 0 and pw == 0:
        return img, (0, 0)
    if ph >= h or pw >= w:
        raise DataError(f"image {h}x{w} too small to reflect-pad to a multiple of {divisor}")
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect"), (ph, pw)


def _dehaze_one(method, net, img):
    """Returns J (clipped to [0, 1]), t, A and the padding applied."""
    if method == "dcp":
        res = classical.dcp_dehaze(img)
        A = np.broadcast_to(res["A"], img.shape).astype(np.float32)
        return np.clip(res["J"], 0, 1), res["t"], A, (0, 0)
    padded, pad = _pad_to(img, net.divisor)
    res = fwbnet.forward_dehaze(net, padded)
    h, w = img.shape[:2]
    return res["J"][:h, :w], res["t"][:h, :w], res["A"][:h, :w], pad


def _dehaze_inputs(src, split):
    """(name, path) pairs: one file, a directory of images, or a dataset."""
    src = Path(src)
    if src.is_file():
        return [(src.stem, src)], False
    if (src / "scenes").is_dir():
        items = []
        for sdir in sorted((src / "scenes").iterdir()):
            meta = json.loads((sdir / "manifest.json").read_text())
            if split in (None, "all") or meta.get("split") == split:
                items.append((sdir.name, sdir / "hazy.fwbt"))
        return items, True
    if src.is_dir():
        items = [(p.stem, p) for p in sorted(src.iterdir()) if p.suffix in (".png", ".fwbt")]
        return items, True
    raise DataError(f"input not found: {src}")


def cmd_dehaze(args):
    net = None
    weights_info = None
    if args.method == "fwbnet":
        if not args.weights:
            raise DataError("--method fwbnet needs --weights")
        net = fwbnet.load_weights(args.weights)
        weights_info = {"path": str(args.weights), "seed": net.seed, "step": net.step}
    items, many = _dehaze_inputs(args.inp, args.split)
    if not items:
        raise DataError(f"no images found in {args.inp}")
    out = Path(args.out)

    def run(item):
        name, path = item
        img = _read_hazy(path)
        J, t, A, pad = _dehaze_one(args.method, net, img)
        target = out / f"{name}.png" if many else out
        save_image(J, target)
        if args.dump_t:
            write_tensor(t, Path(args.dump_t) / f"{name}.t.fwbt" if many else args.dump_t)
        if args.dump_a:
            write_tensor(A, Path(args.dump_a) / f"{name}.A.fwbt" if many else args.dump_a)
        return {"name": name, "input": str(path), "output": str(target), "padding": list(pad)}

    if many:
        out.mkdir(parents=True, exist_ok=True)
        for d in (args.dump_t, args.dump_a):
            if d:
                Path(d).mkdir(parents=True, exist_ok=True)
    rows = _map(run, items)
    manifest = {
        "command": "dehaze",
        "config": {"method": args.method, "input": str(args.inp), "split": args.split,
                   "dump_t": args.dump_t, "dump_a": args.dump_a},
        "weights": weights_info,
        "images": rows,
    }
    if args.method == "fwbnet":
        manifest["note"] = (f"inputs not divisible by {net.divisor} are reflect-padded "
                            "on the bottom/right and the outputs cropped back")
    else:
        manifest["dcp"] = asdict(classical.DcpParams())
    _write_json(out / "manifest.json" if many else out.with_suffix(".manifest.json"), manifest)
    print(f"dehazed {len(rows)} image(s) with {args.method} -> {out}")


def cmd_retrofit(args):
    img = _read_hazy(args.inp)
    A_map = read_tensor(args.a_map)
    if A_map.shape != img.shape:
        raise DataError(f"A map {A_map.shape} does not match image {img.shape}")
    if args.method != "dcp":
        raise UsageError(f"unknown retrofit method {args.method}")
    params = classical.DcpParams()
    A_scalar = classical.estimate_airlight_scalar(img, params)
    t = classical.dcp_transmission(img, A_scalar, params)
    J = classical.retrofit_dehaze(img, t, A_map)
    out = Path(args.out)
    save_image(np.clip(J, 0, 1), out)
    dump_t = Path(args.dump_t) if args.dump_t else out.with_suffix(".t.fwbt")
    write_tensor(t, dump_t)
    _write_json(out.with_suffix(".manifest.json"), {
        "command": "retrofit",
        "config": {"method": args.method, "input": str(args.inp), "a_map": str(args.a_map),
                   "dcp": asdict(params)},
        "dcp_scalar_A": A_scalar.tolist(),
        "t": str(dump_t),
    })
    print(f"retrofit output -> {out}, transmission -> {dump_t}")


# -- eval --------------------------------------------------------------------


def _image_index(d, role):
    """name -> path for a flat directory of PNGs or a dataset's clean images."""
    d = Path(d)
    if not d.is_dir():
        raise DataError(f"{role} directory not found: {d}")
    if (d / "scenes").is_dir():
        return {s.name: s / "clean.png" for s in sorted((d / "scenes").iterdir()) if (s / "clean.png").is_file()}
    return {p.stem: p for p in sorted(d.glob("*.png"))}


def _metrics(pair):
    name, pred_path, gt_path = pair
    pred, gt = load_image(pred_path).astype(np.float64), load_image(gt_path).astype(np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")
    return {"image": name, "P": psnr(pred, gt), "S": ssim(pred, gt),
            "C": ciede2000(rgb_to_lab(pred), rgb_to_lab(gt))[0]}


def cmd_eval(args):
    pred = _image_index(args.pred_dir, "prediction")
    gt = _image_index(args.gt_dir, "ground-truth")
    unmatched = sorted(set(pred) - set(gt))
    if not pred:
        raise DataError(f"no predictions in {args.pred_dir}")
    if unmatched:
        raise DataError("predictions without ground truth: " + ", ".join(unmatched))
    rows = _map(_metrics, [(n, pred[n], gt[n]) for n in sorted(pred)])
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("P", "S", "C")}
    report = {
        "command": "eval",
        "config": {"pred_dir": str(args.pred_dir), "gt_dir": str(args.gt_dir)},
        "columns": {"P": "PSNR (dB, peak 1)", "S": "SSIM", "C": "CIEDE2000"},
        "rows": rows,
        "mean": mean,
    }
    if args.report:
        _write_json(args.report, report)
    print(f"{len(rows)} images  P {mean['P']:.3f}  S {mean['S']:.4f}  C {mean['C']:.3f}")


# -- color -------------------------------------------------------------------


def _triple(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse {text!r} as three comma-separated numbers")
    if len(vals) != 3:
        raise UsageError(f"expected three comma-separated numbers, got {text!r}")
    return np.array(vals)


def _color_operand(text):
    return load_image(text).astype(np.float64) if os.path.isfile(text) else _triple(text)


def cmd_color(args):
    a = _color_operand(args.a)
    if args.op == "rgb2lab":
        lab = rgb_to_lab(a, args.mode)
        if lab.ndim == 1:
            print(json.dumps([round(float(v), 6) for v in lab]))
        else:
            print(json.dumps({"mean_lab": lab.reshape(-1, 3).mean(axis=0).tolist()}))
        return
    if args.b is None:
        raise UsageError("--op ciede needs --b")
    b = _color_operand(args.b)
    if a.ndim != 1:
        # images are RGB; convert before comparing
        a, b = rgb_to_lab(a), rgb_to_lab(b)
    mean, _ = ciede2000(a, b)
    print(f"{mean:.6f}")


# -- entry point -------------------------------------------------------------


def build_parser():
    p = _Parser(prog="hazelab", description="Non-homogeneous haze synthesis, dehazing and evaluation.")
    p.add_argument("--workdir", help="resolve every relative path against this directory (created if needed)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("toy-scenes", help="write procedural clean/depth pairs for synth")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_toy_scenes)

    s = sub.add_parser("synth", help="synthesize a hazy dataset from clean/depth pairs")
    s.add_argument("--clean-dir", required=True, help="<name>.png with <name>.depth.fwbt beside it")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--beta", type=float)
    s.add_argument("--a-min", type=float)
    s.add_argument("--a-max", type=float)
    s.add_argument("--perturb", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--split", type=float, help="fraction of scenes tagged test")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="alternating two-phase training of the network")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config", help="JSON with schedule and architecture fields")
    s.add_argument("--out-weights", required=True)
    s.add_argument("--resume", action="store_true", help="continue the run saved in --out-weights")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-cycles", dest="max_cycles", type=int)
    s.add_argument("--width-multiplier", dest="width_multiplier", type=float)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("dehaze", help="dehaze an image, a directory or a dataset split")
    s.add_argument("--method", choices=("dcp", "fwbnet"), required=True)
    s.add_argument("--weights")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", help="dataset split to process (train, test or all)")
    s.add_argument("--dump-t")
    s.add_argument("--dump-a")
    s.set_defaults(fn=cmd_dehaze)

    s = sub.add_parser("eval", help="PSNR / SSIM / CIEDE2000 of predictions against ground truth")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--report")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("retrofit", help="dark-channel transmission with a supplied light map")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--a-map", required=True)
    s.add_argument("--method", default="dcp")
    s.add_argument("--out", required=True)
    s.add_argument("--dump-t")
    s.set_defaults(fn=cmd_retrofit)

    s = sub.add_parser("color", help="colour conversion and difference for pixels or images")
    s.add_argument("--op", choices=("rgb2lab", "ciede"), required=True)
    s.add_argument("--a", required=True, help="r,g,b (rgb2lab), L,a,b (ciede) or an image path")
    s.add_argument("--b")
    s.add_argument("--mode", choices=("exact", "simplified"), default="exact")
    s.set_defaults(fn=cmd_color)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("no command given (try --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.workdir:
            os.makedirs(args.workdir, exist_ok=True)
            os.chdir(args.workdir)
        worker_count()
        args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
