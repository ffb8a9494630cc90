"""Haze formation and inversion with a per-pixel atmospheric light.

Forward model, per pixel and channel::

    I = J * t + A * (1 - t),    t = exp(-beta * depth)

``A`` is an (H, W, 3) light map; a scalar or RGB triple is the
homogeneous special case. Synthesized ``I`` is never clipped here since
``A`` may exceed 1.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor_io import as_field, as_image, save_image, write_tensor

log = logging.getLogger(__name__)

T_FLOOR = 0.05


@dataclass(frozen=True)
class HazeParams:
    beta: float = 0.35
    base_light_range: tuple = (0.3, 1.5)
    perturbation_fraction: float = 0.2

    def __post_init__(self):
        lo, hi = self.base_light_range
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not 0 < lo <= hi:
            raise ValueError(f"invalid base light range {self.base_light_range}")
        if not 0 <= self.perturbation_fraction < 1:
            raise ValueError(f"perturbation fraction must be in [0, 1), got {self.perturbation_fraction}")


def scene_rng(seed, index=0):
    """PCG64 stream for one scene: ``SeedSequence([seed, index])``.

    PCG64 and SeedSequence are fully specified by numpy and produce the
    same bits on every platform, so datasets are reproducible by seed.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def transmission_from_depth(depth, beta=0.35):
    depth = np.asarray(depth, dtype=np.float64)
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth contains non-finite values")
    if np.any(depth < 0):
        raise ValueError("depth must be non-negative")
    return np.exp(-beta * depth)


def _light_as_map(A, shape):
    A = np.asarray(A)
    if A.ndim == 3:
        if A.shape != shape:
            raise ValueError(f"light map shape {A.shape} does not match image {shape}")
        return A
    return np.broadcast_to(A, shape)


def _check_t(t, shape):
    t = np.asarray(t)
    if t.shape != shape[:2]:
        raise ValueError(f"transmission shape {t.shape} does not match image {shape[:2]}")
    return t


def synthesize(J, t, A):
    """Hazy image from clean radiance, transmission and light (scalar or map)."""
    J = np.asarray(J)
    t = _check_t(t, J.shape)
    A = _light_as_map(A, J.shape)
    tt = t[:, :, None]
    return J * tt + A * (1 - tt)


def floor_transmission(t, floor=T_FLOOR):
    t = np.asarray(t)
    low = t < floor
    n_low = int(np.count_nonzero(low))
    if n_low:
        log.warning("transmission below %.3g at %d pixels; clamped", floor, n_low)
        t = np.where(low, floor, t).astype(t.dtype, copy=False)
    return t


def dehaze_map(I, t, A, t_floor=T_FLOOR):
    """Invert the haze model with a per-pixel light map: J = (I - A)/t + A."""
    I = np.asarray(I)
    t = floor_transmission(_check_t(t, I.shape), t_floor)
    A = _light_as_map(A, I.shape)
    tt = t[:, :, None]
    return (I - A) / tt + A


def dehaze_scalar(I, t, A, t_floor=T_FLOOR):
    """Same inversion with one RGB light for the whole frame."""
    A = np.asarray(A)
    if A.shape not in ((), (3,)):
        raise ValueError(f"scalar light must be a number or RGB triple, got shape {A.shape}")
    return dehaze_map(I, t, A, t_floor)


def sample_light_map(seed, height, width, params=HazeParams(), rng=None):
    """Non-homogeneous light: one gray base level times per-pixel factors.

    The base level is shared by the three channels; each pixel and channel
    gets an independent factor uniform in [1 - p, 1 + p], which is what
    tints the light locally.
    """
    if rng is None:
        rng = scene_rng(seed)
    lo, hi = params.base_light_range
    base = rng.uniform(lo, hi)
    p = params.perturbation_fraction
    factors = rng.uniform(1.0 - p, 1.0 + p, size=(height, width, 3))
    return base * factors


def synthesize_scene(clean, depth, params=HazeParams(), seed=0, index=0):
    """Compose depth -> t, light sampling and haze formation for one scene."""
    clean = as_image(clean, dtype=np.float64)
    depth = as_field(depth, dtype=np.float64)
    if clean.shape[:2] != depth.shape:
        raise ValueError(f"clean {clean.shape[:2]} and depth {depth.shape} differ")
    t = transmission_from_depth(depth, params.beta)
    A = sample_light_map(seed, *depth.shape, params, rng=scene_rng(seed, index))
    hazy = synthesize(clean, t, A)
    return {"hazy": hazy, "t": t, "A": A}


@dataclass
class SceneManifest:
    scene_id: str
    seed: int
    index: int
    beta: float
    base_light_range: list
    perturbation_fraction: float
    split: str
    extra: dict = field(default_factory=dict)


def write_scene(scene_dir, clean, depth, result, manifest):
    """Write one scene in the dataset layout (see README)."""
    os.makedirs(scene_dir, exist_ok=True)
    save_image(clean, os.path.join(scene_dir, "clean.png"))
    write_tensor(depth, os.path.join(scene_dir, "depth.fwbt"))
    write_tensor(result["hazy"], os.path.join(scene_dir, "hazy.fwbt"))
    save_image(result["hazy"], os.path.join(scene_dir, "hazy.png"))
    write_tensor(result["t"], os.path.join(scene_dir, "t.fwbt"))
    write_tensor(result["A"], os.path.join(scene_dir, "A.fwbt"))
    with open(os.path.join(scene_dir, "manifest.json"), "w") as fh:
        json.dump(asdict(manifest), fh, indent=2, sort_keys=True)


def split_tags(n, test_fraction, seed):
    """Deterministic train/test assignment with round(n * test_fraction) test scenes."""
    if not 0 <= test_fraction < 1:
        raise ValueError(f"test fraction must be in [0, 1), got {test_fraction}")
    n_test = int(round(n * test_fraction))
    order = scene_rng(seed, 2**32 - 1).permutation(n)
    tags = ["train"] * n
    for i in order[:n_test]:
        tags[i] = "test"
    return tags


def random_scene(rng, height=64, width=64, depth_range=(0.5, 4.0)):
    """Procedural clean image and depth map for toy datasets.

    Depth is a floor-to-horizon ramp with a few nearer rectangular objects;
    the clean image is flat-coloured regions with soft shading, kept inside
    [0.05, 0.95].
    """
    near, far = depth_range
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ramp = 1.0 - yy / max(height - 1, 1)
    depth = near + (far - near) * (0.6 * ramp + 0.4 * rng.uniform())
    clean = np.empty((height, width, 3))
    sky = rng.uniform(0.3, 0.9, size=3)
    ground = rng.uniform(0.1, 0.7, size=3)
    clean[:] = ground * (0.7 + 0.3 * (1 - ramp))[:, :, None]
    horizon = int(height * rng.uniform(0.25, 0.45))
    clean[:horizon] = sky
    depth[:horizon] = far
    for _ in range(int(rng.integers(3, 7))):
        h = int(rng.integers(height // 8, height // 2))
        w = int(rng.integers(width // 8, width // 2))
        y0 = int(rng.integers(0, height - h))
        x0 = int(rng.integers(0, width - w))
        colour = rng.uniform(0.05, 0.95, size=3)
        shade = 0.8 + 0.2 * (xx[y0:y0 + h, x0:x0 + w] - x0) / max(w, 1)
        clean[y0:y0 + h, x0:x0 + w] = colour * shade[:, :, None]
        depth[y0:y0 + h, x0:x0 + w] = rng.uniform(near, 0.5 * (near + far))
    clean += rng.normal(0.0, 0.01, size=clean.shape)
    return np.clip(clean, 0.05, 0.95), np.clip(depth, near, far)


def build_dataset(out_dir, pairs, params=HazeParams(), seed=0, test_fraction=0.3):
    """Synthesize every (scene_id, clean, depth) in ``pairs`` under ``out_dir/scenes``.

    Scene ``i`` uses RNG stream ``(seed, i)`` so results do not depend on
    processing order. Returns the dataset manifest (also written to
    ``out_dir/manifest.json``).
    """
    pairs = list(pairs)
    tags = split_tags(len(pairs), test_fraction, seed)
    for index, ((sid, clean, depth), tag) in enumerate(zip(pairs, tags)):
        result = synthesize_scene(clean, depth, params, seed=seed, index=index)
        manifest = SceneManifest(
            scene_id=sid,
            seed=int(seed),
            index=index,
            beta=params.beta,
            base_light_range=list(params.base_light_range),
            perturbation_fraction=params.perturbation_fraction,
            split=tag,
        )
        write_scene(os.path.join(out_dir, "scenes", sid), clean, depth, result, manifest)
    summary = {
        "seed": int(seed),
        "beta": params.beta,
        "base_light_range": list(params.base_light_range),
        "perturbation_fraction": params.perturbation_fraction,
        "test_fraction": test_fraction,
        "splits": {
            "train": [sid for (sid, _, _), tag in zip(pairs, tags) if tag == "train"],
            "test": [sid for (sid, _, _), tag in zip(pairs, tags) if tag == "test"],
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def toy_pairs(count, size=64, seed=0, depth_range=(0.5, 4.0)):
    """``count`` procedural (scene_id, clean, depth) triples."""
    for i in range(count):
        clean, depth = random_scene(scene_rng(seed, 10_000 + i), size, size, depth_range)
        yield f"toy{i:04d}", clean, depth
