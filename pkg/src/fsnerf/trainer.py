"""Two-stage optimisation of the radiance field.

Stage ``init`` fits real and pseudo views with the photometric loss only.
Stage ``finetune`` fits the real views with photometric + lambda_msc * MSC +
lambda_ip * IP.  MSC is evaluated every ``msc_interval`` iterations on a
reduced-resolution render of one training view; IP on the current ray batch.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import augment
from .augment import AugmentConfig, saliency_from_depth
from .dataio import Scene, psnr
from .field import EncodingConfig, FieldError, FieldParams, init_field, load_checkpoint, save_checkpoint
from .geometry import Intrinsics, Pose, Rays, image_rays, rays_for_pixels, rotate_pose
from .losses import LossBreakdown, area_resize_matrix, ip_loss, msc_loss, photometric_loss, resize2d
from .renderer import RenderOptions, backward_rays, render_image, render_rays

log = logging.getLogger(__name__)

STAGES = ("init", "finetune")
METRIC_COLUMNS = [
    "iteration", "stage", "lr", "total", "photometric", "photometric_fg", "photometric_bg",
    "msc", "ip", "lambda_msc", "lambda_ip", "msc_evaluated", "ip_evaluated",
    "n_fg", "n_bg", "n_real", "n_pseudo", "probe_psnr", "ip_monitor",
]


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; ``snapshot`` names the last good checkpoint, if written."""

    def __init__(self, message, snapshot=None):
        super().__init__(message if snapshot is None else f"{message} (snapshot: {snapshot})")
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    init_iterations: int = 1000
    finetune_iterations: int = 4000
    rays_per_batch: int = 1024
    learning_rate: float = 5e-3
    lr_final_factor: float = 0.1
    lambda_msc: float = 0.1
    lambda_ip: float = 0.01
    bg_weight: float = 1.0
    seed: int = 0
    n_samples: int = 64
    msc_interval: int = 10
    msc_resolution: int = 24
    ip_rays: str = "batch"
    pseudo_fraction: float | None = None
    depth: int = 2
    width: int = 32
    skip: int | None = None
    position_frequencies: int = 10
    direction_frequencies: int = 4
    checkpoint_interval: int = 500
    eval_interval: int = 500
    log_interval: int = 1

    def __post_init__(self):
        for name in ("rays_per_batch", "n_samples", "msc_interval", "msc_resolution", "checkpoint_interval",
                     "eval_interval", "log_interval", "depth", "width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("init_iterations", "finetune_iterations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_msc < 0 or self.lambda_ip < 0 or self.bg_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ip_rays not in ("batch", "unseen"):
            raise ValueError(f"ip_rays must be 'batch' or 'unseen', got {self.ip_rays!r}")
        if self.pseudo_fraction is not None and not 0 <= self.pseudo_fraction <= 1:
            raise ValueError("pseudo_fraction must lie in [0, 1]")

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    def encoding(self) -> EncodingConfig:
        return EncodingConfig(self.position_frequencies, self.direction_frequencies, True)


# optimiser -------------------------------------------------------------------


class Adam:
    def __init__(self, params: FieldParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: FieldParams, grads: dict, lr: float) -> None:
        """In-place update of ``params``; raises on non-finite gradients."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter tensor {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in params.tensors.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


def optimizer_step(params: FieldParams, grads: dict, state: Adam, lr: float) -> FieldParams:
    state.step(params, grads, lr)
    return params


def learning_rate(cfg: TrainConfig, step_in_stage: int, stage_length: int) -> float:
    """Exponential decay from ``learning_rate`` to ``lr_final_factor`` times it over a stage."""
    frac = step_in_stage / max(stage_length, 1)
    return cfg.learning_rate * cfg.lr_final_factor**frac


# views and ray batches -----------------------------------------------------------


@dataclass
class ViewSet:
    """Views sharing one camera, stacked for sampling."""

    camera: Intrinsics
    images: np.ndarray
    validity: np.ndarray
    saliency: np.ndarray
    poses: list
    is_pseudo: np.ndarray

    def __post_init__(self):
        self.valid_index = np.flatnonzero(self.validity.ravel())
        pseudo_pix = np.repeat(self.is_pseudo, self.camera.width * self.camera.height)[self.valid_index]
        self.real_index = self.valid_index[~pseudo_pix]
        self.pseudo_index = self.valid_index[pseudo_pix]

    def __len__(self):
        return len(self.poses)

    @classmethod
    def build(cls, camera, real_frames=(), pseudo_views=(), saliency_rule: str = "finite"):
        images, validity, saliency, poses, pseudo = [], [], [], [], []
        for fr in real_frames:
            images.append(fr.image)
            validity.append(np.ones(fr.image.shape[:2], dtype=bool))
            if fr.mask is not None:
                saliency.append(np.asarray(fr.mask, dtype=bool))
            elif fr.depth is not None:
                saliency.append(saliency_from_depth(fr.depth, saliency_rule))
            else:
                saliency.append(np.ones(fr.image.shape[:2], dtype=bool))
            poses.append(fr.pose)
            pseudo.append(False)
        for pv in pseudo_views:
            images.append(pv.image)
            validity.append(pv.validity)
            saliency.append(pv.saliency & pv.validity)
            poses.append(pv.pose)
            pseudo.append(True)
        if not poses:
            raise ValueError("view set is empty")
        return cls(camera, np.stack(images).astype(np.float32), np.stack(validity), np.stack(saliency), poses,
                   np.array(pseudo, dtype=bool))


@dataclass
class RayBatch:
    rays: Rays
    colors: np.ndarray
    validity: np.ndarray
    saliency: np.ndarray
    is_pseudo: np.ndarray
    view_index: np.ndarray


def _rays_for_flat(views: ViewSet, flat, near, far) -> tuple:
    h, w = views.camera.height, views.camera.width
    view, pix = np.divmod(flat, h * w)
    row, col = np.divmod(pix, w)
    origins = np.empty((flat.size, 3))
    dirs = np.empty((flat.size, 3))
    for vi in np.unique(view):
        sel = view == vi
        r = rays_for_pixels(views.camera, views.poses[vi], col[sel] + 0.5, row[sel] + 0.5, near, far)
        origins[sel] = r.origins
        dirs[sel] = r.directions
    n = flat.size
    return Rays(origins, dirs, np.full(n, float(near)), np.full(n, float(far))), view, row, col


def sample_ray_batch(views: ViewSet, rng: np.random.Generator, batch_size: int, near: float, far: float,
                     pseudo_fraction: float | None = None) -> RayBatch:
    """Draw pixels uniformly over valid pixels (or with a fixed pseudo share)."""
    if views.valid_index.size == 0:
        raise ValueError("view set has no valid pixels")
    if pseudo_fraction is None or views.pseudo_index.size == 0 or views.real_index.size == 0:
        flat = views.valid_index[rng.integers(0, views.valid_index.size, batch_size)]
    else:
        n_pseudo = int(round(batch_size * pseudo_fraction))
        flat = np.concatenate([
            views.real_index[rng.integers(0, views.real_index.size, batch_size - n_pseudo)],
            views.pseudo_index[rng.integers(0, views.pseudo_index.size, n_pseudo)],
        ])
    rays, view, row, col = _rays_for_flat(views, flat, near, far)
    return RayBatch(
        rays,
        views.images[view, row, col],
        views.validity[view, row, col],
        views.saliency[view, row, col],
        views.is_pseudo[view],
        view,
    )


# training --------------------------------------------------------------------------


@dataclass
class StepRecord:
    iteration: int
    stage: str
    lr: float
    breakdown: LossBreakdown
    n_real: int
    n_pseudo: int
    probe_psnr: float | None = None
    ip_monitor: float | None = None

    def row(self) -> dict:
        b = self.breakdown
        return {
            "iteration": self.iteration, "stage": self.stage, "lr": f"{self.lr:.9g}",
            "total": f"{b.total:.9g}", "photometric": f"{b.photometric:.9g}",
            "photometric_fg": f"{b.photometric_fg:.9g}", "photometric_bg": f"{b.photometric_bg:.9g}",
            "msc": f"{b.msc:.9g}", "ip": f"{b.ip:.9g}",
            "lambda_msc": f"{b.lambda_msc:.9g}", "lambda_ip": f"{b.lambda_ip:.9g}",
            "msc_evaluated": int(b.msc_evaluated), "ip_evaluated": int(b.ip_evaluated),
            "n_fg": b.n_fg, "n_bg": b.n_bg, "n_real": self.n_real, "n_pseudo": self.n_pseudo,
            "probe_psnr": "" if self.probe_psnr is None else f"{self.probe_psnr:.6f}",
            "ip_monitor": "" if self.ip_monitor is None else f"{self.ip_monitor:.9g}",
        }


@dataclass
class Probe:
    name: str
    image: np.ndarray
    pose: Pose


class Trainer:
    """Owns parameters, optimiser state and RNG for one training run."""

    def __init__(self, scene: Scene, cfg: TrainConfig, real_frames=None, pseudo_views=(), probes=(),
                 out_dir=None, params: FieldParams | None = None, augment_cfg: AugmentConfig | None = None):
        self.scene = scene
        self.cfg = cfg
        self.camera = scene.camera
        self.near, self.far = scene.near, scene.far
        self.background = scene.background.astype(np.float32)
        self.real_frames = list(real_frames if real_frames is not None else scene.split("train"))
        if not self.real_frames:
            raise ValueError("no training frames")
        self.augment_cfg = augment_cfg
        self.real_views = ViewSet.build(self.camera, self.real_frames)
        self.mixed_views = ViewSet.build(self.camera, self.real_frames, pseudo_views) if pseudo_views else self.real_views
        self.probes = list(probes)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.rng = np.random.default_rng(cfg.seed)
        self.params = params if params is not None else init_field(
            self.rng, cfg.encoding(), cfg.depth, cfg.width, cfg.skip)
        self.optim = Adam(self.params)
        self.stage = "init"
        self.iteration = 0
        self.history: list[StepRecord] = []
        self._msc_small = [self._downsample(fr.image) for fr in self.real_frames]
        self._csv_rows: list[dict] = []

    # -- pieces ------------------------------------------------------------------

    def _downsample(self, image):
        small = self.camera.scaled(self.cfg.msc_resolution / max(self.camera.width, self.camera.height))
        ry = area_resize_matrix(image.shape[0], small.height)
        rx = area_resize_matrix(image.shape[1], small.width)
        return resize2d(ry, image, rx).astype(np.float32)

    @property
    def stage_lengths(self) -> dict:
        return {"init": self.cfg.init_iterations, "finetune": self.cfg.finetune_iterations}

    def _stage_step(self) -> int:
        return self.iteration if self.stage == "init" else self.iteration - self.cfg.init_iterations

    def _unseen_rays(self, n: int) -> Rays:
        alpha = self.augment_cfg.alpha_deg if self.augment_cfg else 30.0
        pivot = self.augment_cfg.pivot if self.augment_cfg else None
        vi = self.rng.integers(0, len(self.real_frames))
        angles = self.rng.uniform(-alpha, alpha, 3)
        pose = rotate_pose(self.real_frames[vi].pose, angles, pivot)
        u = self.rng.uniform(0, self.camera.width, n)
        v = self.rng.uniform(0, self.camera.height, n)
        return rays_for_pixels(self.camera, pose, u, v, self.near, self.far)

    def _accumulate(self, grads, more):
        for k in grads:
            grads[k] += more[k]

    def step(self) -> StepRecord:
        try:
            return self._step()
        except FieldError as exc:
            raise TrainingError(f"{exc} at iteration {self.iteration}", self._snapshot()) from None

    def _step(self) -> StepRecord:
        cfg = self.cfg
        finetune = self.stage == "finetune"
        views = self.real_views if finetune else self.mixed_views
        batch = sample_ray_batch(views, self.rng, cfg.rays_per_batch, self.near, self.far,
                                 None if finetune else cfg.pseudo_fraction)
        out = render_rays(self.params, batch.rays, cfg.n_samples, self.rng, self.background)
        photo = photometric_loss(out.rgb, batch.colors, batch.validity, batch.saliency, cfg.bg_weight)
        bd = LossBreakdown(photo.fg, photo.bg, bg_weight=cfg.bg_weight, n_fg=photo.n_fg, n_bg=photo.n_bg)

        grad_weights = None
        if finetune and cfg.lambda_ip > 0:
            if cfg.ip_rays == "batch":
                ip = ip_loss(out.weights)
                grad_weights = cfg.lambda_ip * ip.grad
            else:
                unseen = render_rays(self.params, self._unseen_rays(cfg.rays_per_batch // 4), cfg.n_samples,
                                     self.rng, self.background)
                ip = ip_loss(unseen.weights)
            bd.ip, bd.lambda_ip, bd.ip_evaluated, bd.n_ip_rays = ip.loss, cfg.lambda_ip, True, ip.n_rays
        grads = backward_rays(self.params, out, photo.grad, grad_weights)
        if finetune and cfg.lambda_ip > 0 and cfg.ip_rays == "unseen":
            self._accumulate(grads, backward_rays(self.params, unseen, None, cfg.lambda_ip * ip.grad))

        if finetune and cfg.lambda_msc > 0 and self._stage_step() % cfg.msc_interval == 0:
            vi = (self._stage_step() // cfg.msc_interval) % len(self.real_frames)
            small_cam = self.camera.scaled(cfg.msc_resolution / max(self.camera.width, self.camera.height))
            rays = image_rays(small_cam, self.real_frames[vi].pose, self.near, self.far)
            r = render_rays(self.params, rays, cfg.n_samples, self.rng, self.background)
            image = r.rgb.reshape(small_cam.height, small_cam.width, 3)
            msc = msc_loss(image, self._msc_small[vi])
            self._accumulate(grads, backward_rays(self.params, r, cfg.lambda_msc * msc.grad.reshape(-1, 3)))
            bd.msc, bd.lambda_msc, bd.msc_evaluated = msc.loss, cfg.lambda_msc, True

        if not math.isfinite(bd.total):
            raise TrainingError(f"non-finite loss at iteration {self.iteration}", self._snapshot())
        lr = learning_rate(cfg, self._stage_step(), self.stage_lengths[self.stage])
        try:
            self.optim.step(self.params, grads, lr)
        except TrainingError as exc:
            raise TrainingError(f"{exc} at iteration {self.iteration}", self._snapshot()) from None
        n_pseudo = int(batch.is_pseudo.sum())
        rec = StepRecord(self.iteration, self.stage, lr, bd, len(batch.is_pseudo) - n_pseudo, n_pseudo)
        self.iteration += 1
        return rec

    def _snapshot(self):
        if self.out_dir is None:
            return None
        path = self.out_dir / "snapshot.ckpt"
        self.save(path)
        return path

    def probe_psnr(self) -> float | None:
        if not self.probes:
            return None
        opts = RenderOptions(self.near, self.far, self.cfg.n_samples, tuple(self.background))
        vals = [psnr(render_image(self.params, self.camera, p.pose, opts)[0], p.image) for p in self.probes]
        return float(np.mean(vals))

    def ip_monitor(self) -> float:
        """IP over every pixel ray of the training views, midpoint sampling.

        A read-only diagnostic for comparing weight sharpness between stages;
        it never enters a gradient.
        """
        weights = []
        for fr in self.real_frames:
            rays = image_rays(self.camera, fr.pose, self.near, self.far)
            weights.append(render_rays(self.params, rays, self.cfg.n_samples, None, self.background,
                                       keep_cache=False).weights)
        return ip_loss(np.concatenate(weights)).loss

    # -- loop ----------------------------------------------------------------------

    def run(self, until: int | None = None) -> FieldParams:
        """Train through both stages (or up to global iteration ``until``)."""
        cfg = self.cfg
        end = cfg.init_iterations + cfg.finetune_iterations
        if until is not None:
            end = min(end, until)
        if self.iteration == 0 and self.out_dir is not None:
            self.save(self.out_dir / "checkpoint_00000000.ckpt")
        while self.iteration < end:
            self.stage = "init" if self.iteration < cfg.init_iterations else "finetune"
            rec = self.step()
            done = self.iteration
            boundary = done == cfg.init_iterations or done == end
            if done % cfg.eval_interval == 0 or boundary:
                rec.probe_psnr = self.probe_psnr()
                rec.ip_monitor = self.ip_monitor()
            self.history.append(rec)
            if done % cfg.log_interval == 0 or boundary or rec.probe_psnr is not None:
                self._csv_rows.append(rec.row())
                self._append_csv(rec.row())
            if self.out_dir is not None and (done % cfg.checkpoint_interval == 0 or boundary):
                self.save(self.out_dir / f"checkpoint_{done:08d}.ckpt")
                self.save(self.out_dir / "last.ckpt")
        self.stage = "init" if self.iteration < cfg.init_iterations else "finetune"
        if self.out_dir is not None and self.iteration > 0:
            self.save(self.out_dir / "last.ckpt")
        return self.params

    def _append_csv(self, row):
        if self.out_dir is None:
            return
        path = self.out_dir / "metrics.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, METRIC_COLUMNS, lineterminator="\n")
            if new:
                w.writeheader()
            w.writerow(row)

    # -- persistence -----------------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        extra = {f"adam.m/{k}": v for k, v in self.optim.m.items()}
        extra.update({f"adam.v/{k}": v for k, v in self.optim.v.items()})
        meta = {
            "iteration": self.iteration,
            "stage": "init" if self.iteration < self.cfg.init_iterations else "finetune",
            "adam_t": self.optim.t,
            "rng": self.rng.bit_generator.state,
            "config": asdict(self.cfg),
        }
        save_checkpoint(path, self.params, extra, meta)

    def restore(self, path) -> None:
        params, extra, meta = load_checkpoint(path, dtype=self.params.dtype)
        self.params = params
        self.optim = Adam(params)
        for k in params.tensors:
            self.optim.m[k] = extra[f"adam.m/{k}"]
            self.optim.v[k] = extra[f"adam.v/{k}"]
        self.optim.t = int(meta["adam_t"])
        self.iteration = int(meta["iteration"])
        self.stage = meta["stage"]
        self.rng.bit_generator.state = meta["rng"]
        self._truncate_csv()

    def _truncate_csv(self):
        """Drop log rows written after the restored iteration so a resumed run matches an uninterrupted one."""
        if self.out_dir is None or not (self.out_dir / "metrics.csv").exists():
            return
        path = self.out_dir / "metrics.csv"
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["iteration"]) < self.iteration]
        buf = io.StringIO()
        w = csv.DictWriter(buf, METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        path.write_text(buf.getvalue())


def train_stage_init(trainer: Trainer) -> FieldParams:
    """Run the initialisation stage only (photometric loss on real + pseudo views)."""
    return trainer.run(until=trainer.cfg.init_iterations)


def train_stage_finetune(trainer: Trainer) -> FieldParams:
    """Run the remaining iterations; these are all fine-tuning once the init stage is done."""
    return trainer.run()


def build_pseudo_views(scene: Scene, frames, aug: AugmentConfig, saliency_provider=None) -> list:
    inputs = []
    for fr in frames:
        if fr.depth is None:
            raise ValueError(f"frame {fr.name or '?'} has no depth; pseudo-views need depth")
        inputs.append((fr.image, fr.depth, fr.pose))
    return augment.generate_pseudo_views(inputs, scene.camera, aug, saliency_provider)
