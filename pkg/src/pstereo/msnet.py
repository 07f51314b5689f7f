"""Two-stage multi-scale normal estimation network.

A coarse stage maps intensity-normalized images plus light directions to a
low-resolution normal map; a refinement stage (one set of weights, reused at
every scale) consumes the same inputs at double the resolution together with
the upsampled previous estimate.  Per-image features are fused with an
elementwise max, so the prediction is invariant to the order of the input
(image, light) pairs, and the whole model is fully convolutional, so one set
of trained weights runs at any image size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .samples import LightSample, NormalMap, PsSample
from .tensor import Tensor

EXTRACTOR_LAYERS = 6
REGRESSOR_LAYERS = 3


@dataclass(frozen=True)
class NetConfig:
    """Architecture constants: coarsest resolution, width, kernel, activation slope."""

    r0: int = 8
    scale_multiplier: int = 2
    channels: int = 64
    kernel: int = 3
    slope: float = 0.1

    def __post_init__(self):
        if self.r0 < 4:
            raise ValueError(f"r0 must be >= 4, got {self.r0}")
        if self.scale_multiplier != 2:
            raise ValueError("the scale multiplier is fixed at 2")


# Input channel counts: RGB + broadcast light direction, plus the upsampled
# prior normals for the refinement stage.
STAGE_IN_CHANNELS = {"stage1": 6, "refine": 9}


class NetWeights:
    """Named parameter tensors for the two sub-networks, plus their config.

    Exactly two parameter sets exist (coarse stage and refinement stage)
    regardless of how many scales a forward pass visits.
    """

    def __init__(self, params: dict[str, Tensor], config: NetConfig):
        self.params = params
        self.config = config

    def stage_params(self, stage: str) -> dict[str, Tensor]:
        if stage not in STAGE_IN_CHANNELS:
            raise ValueError(f"unknown stage {stage!r}")
        return {k: v for k, v in self.params.items() if k.startswith(stage + ".")}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def init_weights(config: NetConfig = NetConfig(), seed: int = 0) -> NetWeights:
    """He-initialized weights for both sub-networks, deterministic per seed."""
    rng = np.random.default_rng(seed)
    k = config.kernel
    ch = config.channels
    params: dict[str, Tensor] = {}

    def conv_param(name, cin, cout):
        std = math.sqrt(2.0 / (cin * k * k))
        params[f"{name}.w"] = Tensor(rng.standard_normal((cout, cin, k, k)) * std, requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

    for stage, cin in STAGE_IN_CHANNELS.items():
        conv_param(f"{stage}.c1", cin, ch)
        for i in range(2, EXTRACTOR_LAYERS + 1):
            conv_param(f"{stage}.c{i}", ch, ch)
        conv_param(f"{stage}.r1", ch, ch)
        conv_param(f"{stage}.r2", ch, ch)
        conv_param(f"{stage}.r3", ch, 3)
    return NetWeights(params, config)


def resolution_schedule(h: int, w: int, r0: int = 8) -> list[tuple[int, int]]:
    """Coarse-to-fine sizes ending at (h, w), halving (with ceil) per level.

    The number of doublings is the smallest K with r0 * 2**K >= max(h, w);
    level k has size (ceil(h / 2**(K-k)), ceil(w / 2**(K-k))).
    """
    if h < r0 or w < r0:
        raise ValueError(f"image {h}x{w} is smaller than the coarsest resolution {r0}")
    k = 0
    while r0 * 2**k < max(h, w):
        k += 1
    return [(math.ceil(h / 2 ** (k - i)), math.ceil(w / 2 ** (k - i))) for i in range(k + 1)]


def prepare_input(image, light: LightSample, prior: NormalMap | None = None) -> Tensor:
    """Divide an image by its light intensity and append direction channels.

    ``image`` is (C, H, W) linear radiance.  The result is (C+3, H, W), or
    (C+6, H, W) when an upsampled prior normal map is appended.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"image must be (C,H,W), got {img.shape}")
    c, h, w = img.shape
    if np.any(light.intensity <= 0):
        raise ValueError(f"light intensity must be positive, got {light.intensity}")
    if c == light.intensity.size:
        scale = light.intensity
    else:
        scale = np.full(c, light.intensity.mean())
    parts = [img / scale[:, None, None]]
    parts.append(np.broadcast_to(light.direction[:, None, None], (3, h, w)))
    if prior is not None:
        if prior.shape != (h, w):
            raise ValueError(f"prior shape {prior.shape} does not match image {(h, w)}")
        parts.append(prior.values.transpose(2, 0, 1))
    return Tensor(np.concatenate(parts, axis=0))


def upsample_normals(n: NormalMap, h: int, w: int) -> NormalMap:
    """Bilinear-upsample a normal map and renormalize to unit length.

    Interpolated vectors with norm below 1e-8 fall back to (0, 0, 1).
    """
    nh, nw = n.shape
    if h < nh or w < nw:
        raise ValueError(f"upsample_normals cannot downscale {nh}x{nw} to {h}x{w}")
    rh = T.interp_matrix(h, nh)
    rw = T.interp_matrix(w, nw)
    vals = np.matmul(rh, np.matmul(n.values.transpose(2, 0, 1), rw.T))  # (3, h, w)
    norms = np.sqrt((vals * vals).sum(axis=0))
    degenerate = norms < 1e-8
    safe = np.where(degenerate, 1.0, norms)
    vals = vals / safe
    if degenerate.any():
        vals[0][degenerate] = 0.0
        vals[1][degenerate] = 0.0
        vals[2][degenerate] = 1.0
    mask = np.matmul(rh, np.matmul(n.mask.astype(np.float64), rw.T)) > 0.5
    return NormalMap(vals.transpose(1, 2, 0), mask)


# ---------------------------------------------------------------------------
# Forward passes


def _extractor(params: dict[str, Tensor], stage: str, x: Tensor, cfg: NetConfig) -> Tensor:
    pad = cfg.kernel // 2
    h, w = x.shape[2:]
    h2, w2 = math.ceil(h / 2), math.ceil(w / 2)
    h4, w4 = math.ceil(h2 / 2), math.ceil(w2 / 2)

    def conv(name, y):
        return T.leaky_relu(
            T.conv2d(y, params[f"{stage}.{name}.w"], params[f"{stage}.{name}.b"], 1, pad),
            cfg.slope,
        )

    y = conv("c1", x)
    y = conv("c2", y)
    y = T.area_downsample(y, h2, w2)
    y = conv("c3", y)
    y = T.area_downsample(y, h4, w4)
    y = conv("c4", y)
    y = T.bilinear_upsample(y, h2, w2)
    y = conv("c5", y)
    y = T.bilinear_upsample(y, h, w)
    return conv("c6", y)


def _regressor(params: dict[str, Tensor], stage: str, x: Tensor, cfg: NetConfig) -> Tensor:
    pad = cfg.kernel // 2
    y = T.leaky_relu(T.conv2d(x, params[f"{stage}.r1.w"], params[f"{stage}.r1.b"], 1, pad), cfg.slope)
    y = T.leaky_relu(T.conv2d(y, params[f"{stage}.r2.w"], params[f"{stage}.r2.b"], 1, pad), cfg.slope)
    y = T.conv2d(y, params[f"{stage}.r3.w"], params[f"{stage}.r3.b"], 1, pad)
    return T.l2_normalize(y)


def _stage_tensor(weights: NetWeights, stage: str, batch: Tensor) -> Tensor:
    """(K, Cin, h, w) prepared batch -> (1, 3, h, w) unit normal prediction."""
    feats = _extractor(weights.params, stage, batch, weights.config)
    fused = T.max_over_batch(feats)
    return _regressor(weights.params, stage, fused, weights.config)


def forward_stage(weights: NetWeights, inputs, stage: str = "stage1") -> NormalMap:
    """Run one sub-network on a list of prepared (Cin, h, w) tensors."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("forward_stage needs at least one prepared input")
    shapes = {tuple(t.shape) for t in inputs}
    if len(shapes) != 1:
        raise ValueError(f"prepared inputs disagree in shape: {sorted(shapes)}")
    cin = STAGE_IN_CHANNELS[stage]
    if inputs[0].shape[0] != cin:
        raise ValueError(
            f"stage {stage!r} expects {cin} input channels, got {inputs[0].shape[0]}"
        )
    with T.no_grad():
        batch = Tensor(np.stack([t.data for t in inputs]))
        pred = _stage_tensor(weights, stage, batch)
    h, w = pred.shape[2:]
    return NormalMap(pred.data[0].transpose(1, 2, 0), np.ones((h, w), bool))


def _as_rgb(images: np.ndarray) -> np.ndarray:
    if images.shape[1] == 3:
        return images
    if images.shape[1] == 1:
        return np.repeat(images, 3, axis=1)
    raise ValueError(f"expected 1- or 3-channel images, got {images.shape[1]} channels")


def _multiscale_tensor(weights: NetWeights, images: np.ndarray, intensities: np.ndarray,
                       directions: np.ndarray, cfg: NetConfig) -> Tensor:
    """Differentiable coarse-to-fine forward; returns the (1,3,H,W) prediction."""
    imgs = _as_rgb(images) / intensities[:, :, None, None]
    k, _, h, w = imgs.shape
    pred = None
    for sh, sw in resolution_schedule(h, w, cfg.r0):
        base = T.area_resize(imgs, sh, sw)
        dir_maps = np.broadcast_to(directions[:, :, None, None], (k, 3, sh, sw))
        const = Tensor(np.concatenate([base, dir_maps], axis=1))
        if pred is None:
            batch, stage = const, "stage1"
        else:
            prior = T.l2_normalize(T.bilinear_upsample(pred, sh, sw))
            batch = T.concat([const, T.broadcast_batch(prior, k)], axis=1)
            stage = "refine"
        pred = _stage_tensor(weights, stage, batch)
    return pred


def forward_multiscale(weights: NetWeights, sample: PsSample,
                       config: NetConfig | None = None) -> NormalMap:
    """Full coarse-to-fine inference on one sample (no gradient recording)."""
    cfg = config or weights.config
    with T.no_grad():
        pred = _multiscale_tensor(
            weights, sample.images, sample.intensity_matrix(), sample.light_matrix(), cfg
        )
    return NormalMap(pred.data[0].transpose(1, 2, 0), sample.mask.copy())


def forward_mono(weights: NetWeights, sample: PsSample,
                 config: NetConfig | None = None) -> NormalMap:
    """Single-scale comparator: the coarse sub-network run at full resolution."""
    cfg = config or weights.config
    imgs = _as_rgb(sample.images) / sample.intensity_matrix()[:, :, None, None]
    k, _, h, w = imgs.shape
    dir_maps = np.broadcast_to(sample.light_matrix()[:, :, None, None], (k, 3, h, w))
    with T.no_grad():
        pred = _stage_tensor(weights, "stage1", Tensor(np.concatenate([imgs, dir_maps], axis=1)))
    return NormalMap(pred.data[0].transpose(1, 2, 0), sample.mask.copy())


def cosine_loss(pred, gt, mask=None) -> Tensor:
    """1 - mean cosine similarity over masked pixels; accepts maps or tensors."""
    if isinstance(gt, NormalMap):
        if mask is None:
            mask = gt.mask
        gt = gt.values
    if mask is None:
        raise ValueError("cosine_loss needs an explicit mask when gt is a plain array")
    if isinstance(pred, NormalMap):
        pred = Tensor(pred.values.transpose(2, 0, 1)[None])
    return T.cosine_loss(pred, gt, mask)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainParams:
    """Optimization hyperparameters; defaults follow the training recipe."""

    steps: int
    lr: float = 1e-4
    batch: int = 3
    patches_per_sample: int = 32
    patch: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "multi"  # "multi" or "mono"
    min_coverage: float = 0.3
    log_every: int = 0  # 0 silences progress lines


def _sample_patch(rng, mask: np.ndarray, patch: int, min_coverage: float):
    """Random patch corner with >= min_coverage foreground; best of 100 tries."""
    h, w = mask.shape
    ph, pw = min(patch, h), min(patch, w)
    best = None
    best_cov = -1.0
    for _ in range(100):
        y0 = int(rng.integers(0, h - ph + 1))
        x0 = int(rng.integers(0, w - pw + 1))
        cov = float(mask[y0 : y0 + ph, x0 : x0 + pw].mean())
        if cov >= min_coverage:
            return y0, x0, ph, pw
        if cov > best_cov:
            best_cov, best = cov, (y0, x0, ph, pw)
    if best_cov <= 0.0:
        raise ValueError("could not find a patch overlapping the sample mask")
    return best


def train(weights: NetWeights, dataset, config: NetConfig | None = None,
          params: TrainParams | None = None, **kw):
    """Optimize the network on a list of samples with ground-truth normals.

    Per step: draw a batch of random masked patches, run the forward pass,
    average the cosine loss, backpropagate and take one Adam step.  Both
    sub-networks are updated jointly (``mode="mono"`` trains only the coarse
    one, run at full resolution).  Fully deterministic for a fixed seed.

    Returns ``(weights, trace)`` where trace is a list of (step, loss) pairs.
    """
    cfg = config or weights.config
    hp = params or TrainParams(**kw)
    samples = list(dataset)
    if not samples:
        raise ValueError("empty training dataset")
    for i, s in enumerate(samples):
        if s.gt_normals is None:
            raise ValueError(f"training sample {i} has no ground-truth normals")
    if hp.mode not in ("multi", "mono"):
        raise ValueError(f"unknown training mode {hp.mode!r}")

    trainable = weights.params if hp.mode == "multi" else weights.stage_params("stage1")
    state = T.AdamState(trainable)
    rng = np.random.default_rng(hp.seed)
    trace: list[tuple[int, float]] = []

    def stream():
        while True:
            for si in rng.permutation(len(samples)):
                for _ in range(hp.patches_per_sample):
                    yield int(si)

    items = stream()
    for step in range(hp.steps):
        losses = []
        for _ in range(hp.batch):
            s = samples[next(items)]
            y0, x0, ph, pw = _sample_patch(rng, s.mask, hp.patch, hp.min_coverage)
            imgs = s.images[:, :, y0 : y0 + ph, x0 : x0 + pw]
            gt = s.gt_normals.values[y0 : y0 + ph, x0 : x0 + pw]
            mask = s.mask[y0 : y0 + ph, x0 : x0 + pw]
            intens = s.intensity_matrix()
            dirs = s.light_matrix()
            if hp.mode == "multi":
                pred = _multiscale_tensor(weights, imgs, intens, dirs, cfg)
            else:
                rgb = _as_rgb(imgs) / intens[:, :, None, None]
                dmaps = np.broadcast_to(dirs[:, :, None, None], (imgs.shape[0], 3, ph, pw))
                pred = _stage_tensor(weights, "stage1", Tensor(np.concatenate([rgb, dmaps], 1)))
            losses.append(T.cosine_loss(pred, gt, mask))
        total = T.scale(_sum_tensors(losses), 1.0 / len(losses))
        total.backward()
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in trainable.items()
        }
        T.adam_step(trainable, grads, state, hp.lr, hp.beta1, hp.beta2, hp.eps)
        for p in trainable.values():
            p.grad = None
        trace.append((step, total.item()))
        if hp.log_every and (step + 1) % hp.log_every == 0:
            recent = [v for _, v in trace[-hp.log_every:]]
            print(f"step {step + 1}/{hp.steps}  loss {np.mean(recent):.6f}", flush=True)
    return weights, trace


def _sum_tensors(ts):
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out


# ---------------------------------------------------------------------------
# Checkpoints (binary format lives in dataio; config rides along as scalars)

_CONFIG_KEYS = ("r0", "scale_multiplier", "channels", "kernel", "slope")


def save_weights(path, weights: NetWeights) -> None:
    from . import dataio

    arrays = {f"config.{k}": np.array([float(getattr(weights.config, k))]) for k in _CONFIG_KEYS}
    arrays.update(weights.arrays())
    dataio.write_checkpoint(path, arrays)


def load_weights(path) -> NetWeights:
    from . import dataio

    arrays = dataio.read_checkpoint(path)
    cfg_kw = {}
    for k in _CONFIG_KEYS:
        key = f"config.{k}"
        if key not in arrays:
            raise ValueError(f"checkpoint is missing {key}")
        v = float(arrays.pop(key)[0])
        cfg_kw[k] = v if k == "slope" else int(v)
    params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    return NetWeights(params, NetConfig(**cfg_kw))
