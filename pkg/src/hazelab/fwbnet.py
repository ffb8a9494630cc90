"""FWB-Net: light-map U-Net, transmission estimator and the inversion head.

Three graphs share one input image ``I`` (N, 3, H, W):

* ``fwb``  - U-Net regressing the per-pixel atmospheric light ``A``.
* ``etm``  - multi-scale min-pool / dilated-conv net regressing ``t`` in [0.05, 1].
* ``ehim`` - ``J0 = (I - A)/t + A`` then a 3x3 conv and a [0, 1] clamp.

Training alternates two phases: ``fwb`` on the Lab light-map loss and ``etm``
on MSE against ground-truth ``t`` (same batch, separate updates), then the
whole chain on MSE against the clean image.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff
from .autodiff import Graph, NumericalError, sgd_step
from .colorspace import psnr
from .losses import fwb_loss, mse_loss
from .tensor_io import FwbtError, load_image, read_tensor, write_tensor

log = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1
T_MIN = 0.05
LIGHT_FLOOR = 1e-3


@dataclass
class FwbModuleConfig:
    levels: int = 4
    base_channels: int = 24
    width_multiplier: float = 1.0
    convs_per_level: int = 2

    def __post_init__(self):
        if not 0 < self.width_multiplier <= 1:
            raise ValueError(f"width multiplier must be in (0, 1], got {self.width_multiplier}")
        if self.levels < 2:
            raise ValueError("U-Net needs at least two levels")

    def channels(self):
        base = self.base_channels * self.width_multiplier
        return [max(1, int(round(base * 2**i))) for i in range(self.levels)]


@dataclass
class EtmConfig:
    minpool_kernels: tuple = (3, 5, 7, 9, 11)
    conv_specs: tuple = ((3, 1), (5, 1), (7, 2), (7, 3))
    branch_channels: int = 4
    fusion_channels: int = 16


@dataclass
class TrainSchedule:
    phase_a_steps: int = 100
    phase_b_steps: int = 100
    max_cycles: int = 3
    batch_size: int = 4
    # the light-map loss lives on the Lab scale (values in the thousands at init),
    # so its step size is far below the other two
    lr_fwb: float = 1e-5
    lr_etm: float = 1e-2
    lr_joint: float = 1e-2
    seed: int = 0
    # stop early once a full cycle improves both phase losses by less than this fraction;
    # None disables the test and always runs max_cycles
    convergence_tol: float = 0.01


def build_fwb_module(cfg=FwbModuleConfig(), seed=0, dtype=np.float32):
    """U-Net: (N, 3, H, W) -> (N, 3, H, W) light map, H and W divisible by 2**(levels-1)."""
    g = Graph("fwb", seed=seed, dtype=dtype)
    chans = cfg.channels()
    x = g.input("image", 3)

    def block(h, c, tag):
        for i in range(cfg.convs_per_level):
            h = g.relu(g.conv2d(h, c, 3, name=f"{tag}.conv{i}"), name=f"{tag}.relu{i}")
        return h

    skips = []
    h = x
    for lvl, c in enumerate(chans[:-1]):
        h = block(h, c, f"enc{lvl}")
        skips.append(h)
        h = g.maxpool(h, name=f"enc{lvl}.pool")
    h = block(h, chans[-1], "bottleneck")
    for lvl in reversed(range(len(chans) - 1)):
        c = chans[lvl]
        h = g.conv_transpose2d(h, c, name=f"dec{lvl}.up")
        h = g.concat([h, skips[lvl]], name=f"dec{lvl}.cat")
        h = block(h, c, f"dec{lvl}")
    g.set_output(g.conv2d(h, 3, 1, name="head"))
    return g


def build_etm(cfg=EtmConfig(), seed=0, dtype=np.float32):
    """Transmission net: (N, 3, H, W) -> (N, 1, H, W) with values in [T_MIN, 1]."""
    g = Graph("etm", seed=seed, dtype=dtype)
    x = g.input("image", 3)
    dark = g.channel_min(x, name="chanmin")
    feats = [g.minpool(dark, k, name=f"minpool{k}") for k in cfg.minpool_kernels]
    for k, d in cfg.conv_specs:
        conv = g.conv2d(x, cfg.branch_channels, k, dilation=d, name=f"conv{k}d{d}")
        feats.append(g.relu(conv, name=f"conv{k}d{d}.relu"))
    h = g.concat(feats, name="cat")
    h = g.relu(g.conv2d(h, cfg.fusion_channels, 1, name="fuse"), name="fuse.relu")
    h = g.brelu(g.conv2d(h, 1, 1, name="head"), name="head.brelu")
    g.set_output(g.scalar_affine(h, 1.0 - T_MIN, T_MIN, name="tfloor"))
    return g


def build_ehim(seed=0, dtype=np.float32):
    """Inversion head with its refinement conv initialized to the identity."""
    g = Graph("ehim", seed=seed, dtype=dtype)
    I = g.input("image", 3)
    t = g.input("t", 1)
    A = g.input("A", 3)
    j0 = g.asm_invert(I, t, A, name="invert")
    h = g.conv2d(j0, 3, 3, name="refine")
    g.set_output(g.brelu(h, name="out"))
    w = g.params["refine.weight"].value
    w[:] = 0
    w[np.arange(3), np.arange(3), 1, 1] = 1
    return g


class FwbNet:
    """The three sub-networks plus bookkeeping for serialization."""

    def __init__(self, fwb_cfg=FwbModuleConfig(), etm_cfg=EtmConfig(), seed=0, dtype=np.float32):
        self.fwb_cfg = fwb_cfg
        self.etm_cfg = etm_cfg
        self.seed = seed
        self.step = 0
        self.fwb = build_fwb_module(fwb_cfg, seed=seed, dtype=dtype)
        self.etm = build_etm(etm_cfg, seed=seed + 1, dtype=dtype)
        self.ehim = build_ehim(seed=seed + 2, dtype=dtype)

    @property
    def graphs(self):
        return {"fwb": self.fwb, "etm": self.etm, "ehim": self.ehim}

    @property
    def divisor(self):
        return 2 ** (self.fwb_cfg.levels - 1)

    def forward(self, I):
        """I: (N, 3, H, W). Returns dict of NCHW arrays J, t, A."""
        I = np.asarray(I)
        if I.shape[2] % self.divisor or I.shape[3] % self.divisor:
            raise autodiff.ShapeError(f"input {I.shape[2]}x{I.shape[3]} not divisible by {self.divisor}")
        A = self.fwb.forward({"image": I})
        t = self.etm.forward({"image": I})
        J = self.ehim.forward({"image": I, "t": t, "A": A})
        return {"J": J, "t": t, "A": A}

    def manifest(self):
        return {
            "format_version": WEIGHTS_FORMAT_VERSION,
            "seed": self.seed,
            "step": self.step,
            "fwb_config": asdict(self.fwb_cfg),
            "etm_config": asdict(self.etm_cfg),
            "graphs": {name: g.describe() for name, g in self.graphs.items()},
        }


def ehim(I, t, A, refine=None):
    """Inversion head on channel-last arrays: I, A (H, W, 3) and t (H, W).

    ``refine`` is an optional (weight, bias) pair for the 3x3 conv; the
    default is the identity, making the output ``clip(J0, 0, 1)``.
    """
    g = build_ehim(dtype=np.float64)
    if refine is not None:
        g.params["refine.weight"].value[:] = refine[0]
        g.params["refine.bias"].value[:] = refine[1]
    I = np.asarray(I, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if I.shape != A.shape or I.shape[:2] != t.shape:
        raise ValueError(f"shape mismatch: I {I.shape}, t {t.shape}, A {A.shape}")
    out = g.forward({
        "image": I.transpose(2, 0, 1)[None],
        "t": t[None, None],
        "A": A.transpose(2, 0, 1)[None],
    })
    return out[0].transpose(1, 2, 0)


def forward_dehaze(net, image):
    """Dehaze one (H, W, 3) image. Returns channel-last J, t (H, W) and A."""
    x = np.asarray(image, dtype=net.fwb.dtype).transpose(2, 0, 1)[None]
    out = net.forward(x)
    return {
        "J": out["J"][0].transpose(1, 2, 0),
        "t": out["t"][0, 0],
        "A": out["A"][0].transpose(1, 2, 0),
    }


# -- weights on disk ---------------------------------------------------------


def _param_file(graph_name, param_name):
    return f"{graph_name}.{param_name}.fwbt"


def save_weights(net, path, run=None):
    """Directory with ``manifest.json`` and one FWBT file per parameter.

    ``run`` (any JSON-able dict) is stored under the manifest's ``run`` key.
    """
    os.makedirs(path, exist_ok=True)
    for gname, g in net.graphs.items():
        for pname, p in g.params.items():
            value = p.value if p.value.ndim >= 2 else p.value.reshape(1, -1)
            write_tensor(value, os.path.join(path, _param_file(gname, pname)))
    manifest = net.manifest()
    if run is not None:
        manifest["run"] = run
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


class WeightsError(ValueError):
    pass


def load_weights(path):
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise WeightsError(f"no manifest.json in {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise WeightsError(f"unsupported weights format version {manifest.get('format_version')}")
    fwb_cfg = FwbModuleConfig(**manifest["fwb_config"])
    etm_raw = dict(manifest["etm_config"])
    etm_cfg = EtmConfig(
        minpool_kernels=tuple(etm_raw.pop("minpool_kernels")),
        conv_specs=tuple(tuple(s) for s in etm_raw.pop("conv_specs")),
        **etm_raw,
    )
    net = FwbNet(fwb_cfg, etm_cfg, seed=manifest["seed"])
    net.step = manifest["step"]
    for gname, g in net.graphs.items():
        declared = manifest["graphs"][gname]["params"]
        if set(declared) != set(g.params):
            raise WeightsError(f"parameter set of graph {gname} does not match the manifest")
        for pname, p in g.params.items():
            fname = os.path.join(path, _param_file(gname, pname))
            if not os.path.isfile(fname):
                raise WeightsError(f"missing parameter file {fname}")
            try:
                value = read_tensor(fname)
            except FwbtError as exc:
                raise WeightsError(f"{fname}: {exc}") from exc
            if list(p.value.shape) != declared[pname] or value.size != p.value.size:
                raise WeightsError(f"shape mismatch for {gname}.{pname}")
            p.value[...] = value.reshape(p.value.shape)
    return net


# -- data --------------------------------------------------------------------


def load_split(dataset_dir, split="train"):
    """Stack the scenes of one split into NCHW float32 arrays.

    Returns dict with ``ids``, ``hazy``, ``clean``, ``t`` (N, 1, H, W), ``A``.
    """
    scenes_dir = os.path.join(dataset_dir, "scenes")
    if not os.path.isdir(scenes_dir):
        raise FileNotFoundError(f"no scenes/ directory in {dataset_dir}")
    ids, hazy, clean, ts, As = [], [], [], [], []
    for sid in sorted(os.listdir(scenes_dir)):
        sdir = os.path.join(scenes_dir, sid)
        with open(os.path.join(sdir, "manifest.json")) as fh:
            if json.load(fh).get("split") != split:
                continue
        for name in ("hazy.fwbt", "t.fwbt", "A.fwbt", "clean.png"):
            if not os.path.isfile(os.path.join(sdir, name)):
                raise FileNotFoundError(f"scene {sid} lacks ground-truth artifact {name}")
        ids.append(sid)
        hazy.append(read_tensor(os.path.join(sdir, "hazy.fwbt")).transpose(2, 0, 1))
        clean.append(load_image(os.path.join(sdir, "clean.png")).transpose(2, 0, 1))
        ts.append(read_tensor(os.path.join(sdir, "t.fwbt"))[None])
        As.append(read_tensor(os.path.join(sdir, "A.fwbt")).transpose(2, 0, 1))
    if not ids:
        raise FileNotFoundError(f"no {split!r} scenes in {dataset_dir}")
    return {
        "ids": ids,
        "hazy": np.stack(hazy).astype(np.float32),
        "clean": np.stack(clean).astype(np.float32),
        "t": np.stack(ts).astype(np.float32),
        "A": np.stack(As).astype(np.float32),
    }


# -- training ----------------------------------------------------------------


class _Batches:
    """Endless deterministic mini-batches drawn from reshuffled epochs."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0xBA7C])))
        self.order = []

    def next(self):
        while len(self.order) < self.batch_size:
            self.order.extend(self.rng.permutation(self.n).tolist())
        idx, self.order = self.order[: self.batch_size], self.order[self.batch_size :]
        return np.array(idx)


def _check_finite(value, what, step):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what} at step {step}")


def phase_a_step(net, batch, schedule):
    """One step on the light-map loss (fwb) and transmission MSE (etm)."""
    I = batch["hazy"]
    A_est = net.fwb.forward({"image": I})
    la = fwb_loss(A_est, batch["A"], channel_axis=1, floor=LIGHT_FLOOR)
    _check_finite(la.value, "fwb_loss", net.step)
    pg, _ = net.fwb.backward(la.grad)
    sgd_step(net.fwb.params, pg, schedule.lr_fwb)

    t_est = net.etm.forward({"image": I})
    lt = mse_loss(t_est, batch["t"])
    _check_finite(lt.value, "t_mse", net.step)
    pg, _ = net.etm.backward(lt.grad)
    sgd_step(net.etm.params, pg, schedule.lr_etm)
    return {"fwb_loss": la.value, "t_mse": lt.value}


def phase_b_step(net, batch, schedule):
    """One end-to-end step on MSE between the dehazed output and the clean image."""
    out = net.forward(batch["hazy"])
    lj = mse_loss(out["J"], batch["clean"])
    _check_finite(lj.value, "j_mse", net.step)
    pg_h, g_in = net.ehim.backward(lj.grad)
    pg_t, _ = net.etm.backward(g_in["t"])
    pg_a, _ = net.fwb.backward(g_in["A"])
    for graph, grads in ((net.ehim, pg_h), (net.etm, pg_t), (net.fwb, pg_a)):
        sgd_step(graph.params, grads, schedule.lr_joint)
    return {"j_mse": lj.value}


def train(dataset_dir, fwb_cfg=FwbModuleConfig(width_multiplier=0.25), etm_cfg=EtmConfig(),
          schedule=TrainSchedule(), log_path=None, net=None, data=None):
    """Alternating two-phase training. Returns (net, records).

    ``records`` holds the metrics log entries; each is also appended as a
    JSON line to ``log_path`` when given. A ``net`` whose ``step`` is past
    zero resumes: batches and phase position continue exactly where an
    uninterrupted run would be.
    """
    if data is None:
        data = load_split(dataset_dir, "train")
    if net is None:
        net = FwbNet(fwb_cfg, etm_cfg, seed=schedule.seed)
    batches = _Batches(len(data["ids"]), schedule.batch_size, schedule.seed)
    for _ in range(net.step):
        batches.next()
    keys = ("hazy", "clean", "t", "A")
    a_steps, cycle_len = schedule.phase_a_steps, schedule.phase_a_steps + schedule.phase_b_steps
    total = schedule.max_cycles * cycle_len
    records = []
    sink = open(log_path, "a" if net.step else "w") if log_path else None

    def emit(rec):
        records.append(rec)
        if sink:
            sink.write(json.dumps(rec) + "\n")

    phase_means = {}
    tail = []
    try:
        while net.step < total:
            cycle, pos = divmod(net.step, cycle_len)
            phase, fn = ("A", phase_a_step) if pos < a_steps else ("B", phase_b_step)
            if pos in (0, a_steps) or not records:
                emit({"step": net.step, "phase": phase, "event": "phase_start", "cycle": cycle,
                      **dataset_losses(net, data)})
                tail = []
            idx = batches.next()
            losses = fn(net, {k: data[k][idx] for k in keys}, schedule)
            for name, value in losses.items():
                emit({"step": net.step, "phase": phase, "loss_name": name, "value": value})
            tail.append(losses["j_mse"] if phase == "B" else losses["fwb_loss"])
            net.step += 1
            if pos + 1 in (a_steps, cycle_len):
                phase_means.setdefault(phase, []).append(float(np.mean(tail[-10:])))
            if pos + 1 == cycle_len and schedule.convergence_tol is not None and cycle > 0:
                improved = [(m[-2] - m[-1]) / max(abs(m[-2]), 1e-12)
                            for m in phase_means.values() if len(m) > 1]
                if improved and all(r < schedule.convergence_tol for r in improved):
                    log.info("converged after cycle %d", cycle)
                    break
        emit({"step": net.step, "phase": None, "event": "end", **dataset_losses(net, data)})
    finally:
        if sink:
            sink.close()
    return net, records


def dataset_losses(net, data):
    """Losses of the current network over a whole split (no parameter update)."""
    out = net.forward(data["hazy"])
    return {
        "fwb_loss": fwb_loss(out["A"], data["A"], channel_axis=1, floor=LIGHT_FLOOR).value,
        "t_mse": mse_loss(out["t"], data["t"]).value,
        "j_mse": mse_loss(out["J"], data["clean"]).value,
    }


def evaluate_split(net, data):
    """Mean PSNR of dehazed output and of the hazy input against clean images."""
    out = net.forward(data["hazy"])
    dehazed, hazy = [], []
    for i in range(len(data["ids"])):
        clean = data["clean"][i]
        dehazed.append(psnr(out["J"][i], clean))
        hazy.append(psnr(np.clip(data["hazy"][i], 0, 1), clean))
    return {"psnr_dehazed": float(np.mean(dehazed)), "psnr_hazy": float(np.mean(hazy))}
