"""Two-stage toy training, flow evaluation, interpolation and the frame-skip protocol."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from evfi import flow_ops as F
from evfi import tensor as T
from evfi.biofnet import SCALES, EIFBiOFNet, PyramidConfig, full_resolution_flows
from evfi.config import RunConfig
from evfi.data import Batch, ToySequence, event_grids, make_toy_dataset, middle_batch, sample_batch
from evfi.events import EventStream
from evfi.fileio import checkpoint_digest
from evfi.metrics import psnr, ssim
from evfi.optim import AdamW, step_decay
from evfi.synthesis import AttentionConfig, SynthesisNet
from evfi.tensor import Tensor

log = logging.getLogger(__name__)

TEST_SEED_OFFSET = 10_007


class NonFiniteLoss(FloatingPointError):
    def __init__(self, stage: int, step: int, value: float):
        super().__init__(f"stage {stage}: non-finite loss {value} at step {step}")
        self.stage = stage
        self.step = step
        self.value = value


class FreezeViolation(RuntimeError):
    pass


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    digest_before: str = ""
    digest_after: str = ""


# -- construction ------------------------------------------------------------

def build_flow_net(cfg: RunConfig) -> EIFBiOFNet:
    return EIFBiOFNet(PyramidConfig(base_channels=cfg.flow_channels, bins=cfg.bins,
                                    stages=tuple(cfg.flow_stages), seed=cfg.seed))


def build_synth_net(cfg: RunConfig) -> SynthesisNet:
    return SynthesisNet(AttentionConfig(base_channels=cfg.synth_channels, heads=cfg.heads,
                                        bins=cfg.bins, seed=cfg.seed + 1))


def make_datasets(cfg: RunConfig, kind: str | None = None) -> tuple[list, list]:
    """Training and held-out sequences; the held-out set uses a disjoint seed."""
    kind = kind or cfg.kind
    common = dict(size=cfg.size, speed=cfg.speed, substeps=cfg.substeps, intervals=cfg.intervals,
                  contrast_threshold=cfg.contrast_threshold)
    train = make_toy_dataset(kind, cfg.n_train, seed=cfg.seed, **common)
    test = make_toy_dataset(kind, cfg.n_test, seed=cfg.seed + TEST_SEED_OFFSET, **common)
    return train, test


# -- losses --------------------------------------------------------------------

def smoothness_weight(cfg: RunConfig, step: int) -> float:
    """``lambda_smooth``, held at zero for the first ``smooth_warmup`` fraction of the run."""
    return 0.0 if step < cfg.smooth_warmup * cfg.steps else cfg.lambda_smooth


def stage_one_loss(net: EIFBiOFNet, batch: Batch, cfg: RunConfig, step: int | None = None) -> Tensor:
    h, w = batch.i0.shape[-2:]
    pyr = net(batch.i0, batch.i1, batch.g_0t, batch.g_t0, batch.g_t1)
    v_t0, v_t1 = full_resolution_flows(pyr, h, w)
    lam = cfg.lambda_smooth if step is None else smoothness_weight(cfg, step)
    return F.flow_loss(Tensor(batch.gt), Tensor(batch.i0), Tensor(batch.i1), v_t0, v_t1, cfg.lambda_photo, lam)


def multiscale_loss(outputs: list, gt: np.ndarray, weights) -> Tensor:
    """``sum_s w_s * charbonnier(GT_s - I_s)`` with area-downscaled targets."""
    gt = Tensor(gt)
    full = gt.shape[-1]
    total = None
    for out, weight in zip(outputs, weights):
        factor = full // out.shape[-1]
        target = gt if factor == 1 else F.area_downscale(gt, factor)
        term = F.charbonnier(target - out) * float(weight)
        total = term if total is None else total + term
    return total


def predict_flows(flow_net: EIFBiOFNet, batch: Batch):
    with T.no_grad():
        return flow_net(batch.i0, batch.i1, batch.g_0t, batch.g_t0, batch.g_t1)


def stage_two_loss(flow_net: EIFBiOFNet, synth_net: SynthesisNet, batch: Batch, cfg: RunConfig,
                   step: int | None = None) -> Tensor:
    flows = predict_flows(flow_net, batch)
    outputs = synth_net(batch.i0, batch.i1, batch.g_0t, batch.g_t1, flows)
    return multiscale_loss(outputs, batch.gt, cfg.lambda_scales)


# -- training loops ------------------------------------------------------------

def _fit(stage: int, cfg: RunConfig, params, loss_fn, dataset, on_step=None) -> list:
    rng = np.random.default_rng(cfg.seed + 7919 * stage)
    opt = AdamW(params, lr=cfg.lr)
    losses = []
    crop = cfg.crop if 0 < cfg.crop < cfg.size else None
    for step in range(cfg.steps):
        opt.lr = step_decay(cfg.lr, step, cfg.steps, cfg.lr_decay_fraction, cfg.lr_decay_rate)
        batch = sample_batch(dataset, cfg.batch, rng, crop=crop, bins=cfg.bins)
        with T.fresh_tape():
            loss = loss_fn(batch, step)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(stage, step, value)
            opt.zero_grad()
            T.backward(loss)
        opt.step()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if step % 100 == 0:
            log.info("stage %d step %d loss %.6f lr %.2e", stage, step, value, opt.lr)
    return losses


def train_stage_one(cfg: RunConfig, dataset, net: EIFBiOFNet | None = None, on_step=None):
    """Train the flow estimator in place on the photometric + smoothness loss."""
    if cfg.stage != 1:
        raise ValueError(f"train_stage_one needs stage = 1, got {cfg.stage}")
    net = net or build_flow_net(cfg)
    net.set_requires_grad(True)
    losses = _fit(1, cfg, net.parameters(), lambda b, step: stage_one_loss(net, b, cfg, step), dataset, on_step)
    return net, TrainResult(losses)


def train_stage_two(cfg: RunConfig, dataset, flow_net: EIFBiOFNet, synth_net: SynthesisNet | None = None,
                    on_step=None):
    """Train the synthesis network with the flow estimator frozen; verifies the freeze by digest."""
    if cfg.stage != 2:
        raise ValueError(f"train_stage_two needs stage = 2, got {cfg.stage}")
    synth_net = synth_net or build_synth_net(cfg)
    flow_net.set_requires_grad(False)
    before = checkpoint_digest(flow_net.state_dict())
    losses = _fit(2, cfg, synth_net.parameters(), lambda b, step: stage_two_loss(flow_net, synth_net, b, cfg, step),
                  dataset, on_step)
    after = checkpoint_digest(flow_net.state_dict())
    if before != after:
        raise FreezeViolation(f"flow parameters changed during stage two: {before} -> {after}")
    return synth_net, TrainResult(losses, before, after)


def write_loss_curve(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, value in enumerate(losses):
            writer.writerow([i, repr(float(value))])


def moving_average(values, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(values)))
    return np.convolve(values, np.ones(window) / window, mode="valid")


# -- evaluation ----------------------------------------------------------------

def flow_epe(net: EIFBiOFNet, batch: Batch) -> float:
    """Mean endpoint error of the finest bidirectional flows at input resolution."""
    h, w = batch.i0.shape[-2:]
    pyr = predict_flows(net, batch)
    v_t0, v_t1 = full_resolution_flows(pyr, h, w)
    return 0.5 * (F.endpoint_error(v_t0.data, batch.flow_t0) + F.endpoint_error(v_t1.data, batch.flow_t1))


def held_out_epe(net: EIFBiOFNet, test_set) -> float:
    return flow_epe(net, middle_batch(test_set, net.cfg.bins))


def synthesize(flow_net: EIFBiOFNet, synth_net: SynthesisNet, batch: Batch) -> list:
    """Predicted frames at every synthesis scale, coarse first, as numpy arrays."""
    with T.no_grad():
        flows = flow_net(batch.i0, batch.i1, batch.g_0t, batch.g_t0, batch.g_t1)
        outputs = synth_net(batch.i0, batch.i1, batch.g_0t, batch.g_t1, flows)
    return [o.data for o in outputs]


def interpolate(flow_net: EIFBiOFNet, synth_net: SynthesisNet, i0: np.ndarray, i1: np.ndarray,
                events: EventStream, t0_us: int, t1_us: int, t: float) -> list:
    """Frames (C, H, W) at normalized time ``t`` for every synthesis scale, coarse first."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie strictly inside (0, 1), got {t}")
    if i0.shape != i1.shape:
        raise ValueError(f"key frames differ in shape: {i0.shape} vs {i1.shape}")
    t_us = t0_us + int(round(t * (t1_us - t0_us)))
    t_us = min(max(t_us, t0_us + 1), t1_us - 1)
    g_0t, g_t0, g_t1 = event_grids(events, t0_us, t_us, t1_us, flow_net.cfg.bins)
    z = np.zeros((1, 2) + i0.shape[1:])
    batch = Batch(i0[None], i1[None], i0[None], g_0t[None], g_t0[None], g_t1[None], np.array([t]), z, z)
    return [o[0] for o in synthesize(flow_net, synth_net, batch)]


def frame_average_psnr(batch: Batch) -> float:
    return float(np.mean([psnr(0.5 * (a + b), g) for a, b, g in zip(batch.i0, batch.i1, batch.gt)]))


@dataclass
class MetricRow:
    skip: int
    mode: str
    psnr_db: float
    ssim: float
    n_frames: int


def skip_indices(n_frames: int, skip: int, mode: str) -> list[tuple[int, int, int]]:
    """``(key_a, key_b, target)`` triples for key frames every ``skip + 1`` frames."""
    if skip < 1:
        raise ValueError(f"skip must be positive, got {skip}")
    if mode not in ("middle", "whole"):
        raise ValueError(f"mode must be middle or whole, got {mode!r}")
    span = skip + 1
    if n_frames < span + 1:
        raise ValueError(f"sequence of {n_frames} frames is too short for {skip} skips")
    out = []
    for a in range(0, n_frames - span, span):
        b = a + span
        targets = [a + span // 2] if mode == "middle" else range(a + 1, b)
        out.extend((a, b, j) for j in targets)
    return out


def skip_eval(sequences, skips, mode: str, flow_net: EIFBiOFNet, synth_net: SynthesisNet) -> list[MetricRow]:
    """Mean PSNR / SSIM of interpolated skipped frames, one row per skip value."""
    if isinstance(sequences, ToySequence):
        sequences = [sequences]
    rows = []
    for skip in skips:
        scores = []
        for seq in sequences:
            for a, b, j in skip_indices(len(seq.frames), skip, mode):
                t = (seq.times[j] - seq.times[a]) / (seq.times[b] - seq.times[a])
                pred = interpolate(flow_net, synth_net, seq.frames[a], seq.frames[b], seq.events,
                                   seq.times[a], seq.times[b], t)[-1]
                pred = np.clip(pred, 0.0, 1.0)
                scores.append((psnr(pred, seq.frames[j]), ssim(pred, seq.frames[j])))
        arr = np.array(scores)
        rows.append(MetricRow(skip, mode, float(arr[:, 0].mean()), float(arr[:, 1].mean()), len(scores)))
    return rows


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["skip", "mode", "psnr_db", "ssim", "n_frames"])
        for r in rows:
            writer.writerow([r.skip, r.mode, f"{r.psnr_db:.6f}", f"{r.ssim:.6f}", r.n_frames])


def format_metrics(rows) -> str:
    lines = [f"{'skip':>5} {'mode':>7} {'PSNR (dB)':>10} {'SSIM':>7} {'frames':>7}"]
    lines += [f"{r.skip:>5} {r.mode:>7} {r.psnr_db:>10.3f} {r.ssim:>7.4f} {r.n_frames:>7}" for r in rows]
    return "\n".join(lines)
