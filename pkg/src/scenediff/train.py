"""Training, sampling and evaluation of the scene diffusion model.

Stages: auto-decoding of per-Gaussian latents with the occupancy decoder,
latent diffusion on (scaffold, latent) pairs, pose and scaffold diffusion,
then a joint stage that adds the weighted alignment term.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import align as A
from . import shape as S
from .autodiff import EMA, AdamW, cosine_lr, load_checkpoint, no_grad, save_checkpoint
from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor, backward
from .condition import ConditionEncoder, normalize_box
from .config import RunConfig
from .denoiser import LatentDenoiser, LatentNetConfig, PoseDenoiser, PoseNetConfig, ShapeDenoiser, ShapeNetConfig
from .diffusion import GuidanceConfig, ddim_sample, epsilon_loss, make_linear_schedule, predict_x0, q_sample
from .pose import Box3D, Camera, Detection, PoseNormalizer, average_precision, denormalize_pose, iou3d, normalize_pose
from .synthetic import CLASS_NAMES, SceneRecord

log = logging.getLogger(__name__)

CLASS_COUNT = len(CLASS_NAMES)
LATENT_REG = 1e-3
POSE_CLIP = 1.0    # normalised poses live in [-1, 1]
CODE_CLIP = 2.0    # normalised scaffold codes stay within about +-1.2


class TrainingAborted(RuntimeError):
    def __init__(self, stage: str, step: int, reason: str):
        super().__init__(f"{stage} step {step}: {reason}")
        self.stage, self.step = stage, step


@dataclass
class ObjectTable:
    """All objects of a dataset, flattened, in scene order."""

    scene: np.ndarray         # (N,) scene index
    pose: np.ndarray          # (N, 7) normalised
    code: np.ndarray          # (N, g * 16) normalised
    boxes: np.ndarray         # (N, 4) normalised 2D boxes
    box_centers: np.ndarray   # (N, 2) pixels
    patches: np.ndarray       # (N, 8, 8, 2)
    classes: np.ndarray       # (N,)
    targets: list             # full back-projected depth points per object
    train_targets: list       # subsampled copy used by the training loss
    scaffolds: list
    n_scenes: int
    camera: Camera

    @property
    def n(self) -> int:
        return len(self.scene)

    def rows(self, scenes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.scene, np.asarray(scenes)))

    @classmethod
    def from_records(cls, records: list[SceneRecord], pose_norm: PoseNormalizer, shape_norm: S.ShapeCodeNormalizer,
                     max_targets: int, rng: np.random.Generator) -> ObjectTable:
        cols: dict[str, list] = {k: [] for k in ("scene", "pose", "code", "boxes", "centers", "patches", "classes",
                                                  "targets", "train_targets", "scaffolds")}
        for i, rec in enumerate(records):
            cam = rec.scene.camera
            for obj, ob, q in zip(rec.scene.objects, rec.observations, rec.targets()):
                cols["scene"].append(i)
                cols["pose"].append(normalize_pose(obj.pose, pose_norm))
                cols["code"].append(shape_norm.normalize(S.pack_shape_code(obj.scaffold)))
                cols["boxes"].append(normalize_box(ob.box2d, cam.width, cam.height))
                cols["centers"].append(obj.box_center)
                cols["patches"].append(ob.patch)
                cols["classes"].append(ob.class_id)
                cols["targets"].append(q)
                keep = q if len(q) <= max_targets else q[np.sort(rng.choice(len(q), max_targets, replace=False))]
                cols["train_targets"].append(keep)
                cols["scaffolds"].append(obj.scaffold)
        return cls(np.array(cols["scene"], dtype=np.int64), np.array(cols["pose"]), np.array(cols["code"]),
                   np.array(cols["boxes"]), np.array(cols["centers"]), np.array(cols["patches"]),
                   np.array(cols["classes"], dtype=np.int64), cols["targets"], cols["train_targets"],
                   cols["scaffolds"], len(records), records[0].scene.camera)


class SceneModel(nn.Module):
    """Condition encoder, the three denoisers and the occupancy decoder."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(cfg.seed)
        self.encoder = ConditionEncoder(cfg.feat_width, CLASS_COUNT, rng)
        width = self.encoder.width
        self.pose = PoseDenoiser(width, PoseNetConfig(cfg.pose_width, cfg.pose_blocks, cfg.pose_min_width,
                                                      cfg.pose_heads, cfg.pose_head_dim, cfg.cond_tokens,
                                                      cfg.use_isa), rng)
        self.shape = ShapeDenoiser(width, S.PARAMS_PER_GAUSSIAN,
                                   ShapeNetConfig(cfg.shape_width, cfg.shape_encoder_layers, cfg.shape_decoder_layers,
                                                  cfg.shape_heads, cfg.shape_head_dim, cfg.cond_tokens), rng)
        self.latent = LatentDenoiser(cfg.latent_dim, S.PARAMS_PER_GAUSSIAN,
                                     LatentNetConfig(cfg.latent_width, cfg.latent_encoder_layers,
                                                     cfg.latent_decoder_layers, cfg.latent_heads,
                                                     cfg.latent_head_dim), rng)
        self.decoder = S.OccupancyDecoder(cfg.latent_dim, cfg.decoder_hidden, rng)


@dataclass
class Trained:
    model: SceneModel
    cfg: RunConfig
    latent_scale: float
    latents: np.ndarray | None = None   # auto-decoded training latents (normalised)


class MetricLog:
    """Append-only CSV of training metrics."""

    FIELDS = ("stage", "step", "loss", "pose", "shape", "align", "seconds")

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path and not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.DictWriter(f, self.FIELDS).writeheader()

    def add(self, **row) -> None:
        row = {k: row.get(k, "") for k in self.FIELDS}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.DictWriter(f, self.FIELDS).writerow(row)


def _check_finite(stage: str, step: int, loss: Tensor, logger: MetricLog) -> None:
    if not np.isfinite(loss.data).all():
        logger.add(stage=stage, step=step, loss="nan")
        raise TrainingAborted(stage, step, "non-finite loss")


class Stepper:
    """Optimiser, learning-rate schedule and weight average for one group of parameters."""

    def __init__(self, params: list[Tensor], cfg: RunConfig, total_steps: int, lr: float | None = None,
                 ema: bool = True):
        self.opt = AdamW(params, lr=cfg.lr if lr is None else lr, betas=(cfg.beta1, cfg.beta2),
                         weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip or None)
        self.cfg = cfg
        self.total = max(1, total_steps)
        self.step = 0
        self.ema = EMA(params, cfg.ema_decay) if ema and cfg.ema_decay > 0 else None

    def lr(self) -> float:
        if not self.cfg.cosine_decay:
            return self.opt.lr
        return cosine_lr(self.opt.lr, self.step, self.total, min(self.cfg.warmup_steps, self.total // 10))

    def update(self, stage: str, loss: Tensor, logger: MetricLog) -> None:
        _check_finite(stage, self.step, loss, logger)
        self.opt.zero_grad()
        backward(loss)
        if not np.isfinite(self.opt.grad_norm()):
            logger.add(stage=stage, step=self.step, loss="nan-grad")
            raise TrainingAborted(stage, self.step, "non-finite gradient")
        self.opt.step(self.lr())
        if self.ema is not None:
            self.ema.update()
        self.step += 1

    def finish(self) -> None:
        """Leave the averaged weights in place."""
        if self.ema is not None:
            self.ema.copy_to()


def _steps_per_epoch(n: int, batch: int) -> int:
    return -(-n // batch)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield np.sort(order[i:i + size])


def _bce_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy written as softplus(l) - y l."""
    lab = Tensor(np.asarray(labels, dtype=logits.dtype))
    return T.mean(T.sub(T.softplus(logits), T.mul(lab, logits)))


# -- stage 1: occupancy decoder + auto-decoded latents ------------------------------------------


def decoder_queries(s: S.GaussianScaffold, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Half near-surface (jittered scaffold samples), half uniform queries with union labels."""
    near = S.sample_points(s, max(1, -(-n // (2 * s.g))), rng)[: n // 2]
    near = near + rng.normal(0.0, 0.03, near.shape)
    far = rng.uniform(-0.6, 0.6, (n - len(near), 3))
    x = np.concatenate([near, far])
    return x, S.union_occupancy(s, x)


def fit_autodecoder(model: SceneModel, table: ObjectTable, cfg: RunConfig, rng: np.random.Generator,
                    logger: MetricLog) -> tuple[np.ndarray, float]:
    g, h = cfg.g, cfg.latent_dim
    latents = nn.parameter(rng.normal(0.0, 0.01, (table.n, g, h)))
    batch = max(1, 4 * cfg.batch_scenes)
    stepper = Stepper(model.decoder.parameters() + [latents], cfg,
                      cfg.decoder_epochs * _steps_per_epoch(table.n, batch), lr=max(cfg.lr, 1e-3), ema=False)
    pool = [decoder_queries(s, 4 * cfg.decoder_points, rng) for s in table.scaffolds]
    t0 = time.time()
    for _ in range(cfg.decoder_epochs):
        for rows in _batches(table.n, batch, rng):
            terms = []
            for r in rows:
                x, y = pool[r]
                pick = rng.choice(len(x), cfg.decoder_points, replace=False)
                lat = T.reshape(T.take(latents, np.array([r])), (g, h))
                terms.append(T.reshape(_bce_logits(model.decoder.logits(table.scaffolds[r], lat, x[pick]), y[pick]), (1,)))
            reg = T.affine(T.mean(T.mul(T.take(latents, rows), T.take(latents, rows))), LATENT_REG)
            loss = T.add(T.mean(T.concat(terms, axis=0)), reg)
            stepper.update("decoder", loss, logger)
            if (stepper.step - 1) % cfg.log_every == 0:
                logger.add(stage="decoder", step=stepper.step - 1, loss=float(loss.data),
                           seconds=round(time.time() - t0, 2))
    lat = latents.data.astype(np.float64)
    scale = float(lat.std()) or 1.0
    return lat / scale, scale


# -- stage 2: latent diffusion --------------------------------------------------------------------


def fit_latent_diffusion(model: SceneModel, table: ObjectTable, latents: np.ndarray, cfg: RunConfig,
                         rng: np.random.Generator, logger: MetricLog) -> None:
    sched = make_linear_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    batch = max(1, 4 * cfg.batch_scenes)
    stepper = Stepper(model.latent.parameters(), cfg, cfg.latent_epochs * _steps_per_epoch(table.n, batch))
    tokens = table.code.reshape(table.n, cfg.g, S.PARAMS_PER_GAUSSIAN)
    t0 = time.time()
    for _ in range(cfg.latent_epochs):
        for rows in _batches(table.n, batch, rng):
            t = rng.integers(1, cfg.T + 1, len(rows))
            eps = rng.standard_normal(latents[rows].shape)
            zt = q_sample(latents[rows], t, eps, sched)
            loss = epsilon_loss(model.latent(zt, t, tokens[rows]), eps.astype(np.float32))
            stepper.update("latent", loss, logger)
            if (stepper.step - 1) % cfg.log_every == 0:
                logger.add(stage="latent", step=stepper.step - 1, loss=float(loss.data),
                           seconds=round(time.time() - t0, 2))
    stepper.finish()


# -- stage 3/4: pose + scaffold diffusion with optional alignment --------------------------------


def scene_losses(model: SceneModel, table: ObjectTable, scenes: np.ndarray, cfg: RunConfig, sched,
                 rng: np.random.Generator, align_weight: float,
                 pose_norm: PoseNormalizer, shape_norm: S.ShapeCodeNormalizer) -> tuple[Tensor, dict]:
    """One minibatch of L_pose + L_shape (+ align_weight * L_align)."""
    rows = table.rows(scenes)
    sid = table.scene[rows]
    slot = np.searchsorted(scenes, sid)
    dropped = (rng.random(len(scenes)) < cfg.drop_probability)[slot]
    y = model.encoder(table.boxes[rows], table.patches[rows], table.classes[rows], dropped)
    t = rng.integers(1, cfg.T + 1, len(scenes))[slot]
    n, g = len(rows), cfg.g
    parts: dict[str, float] = {}
    total = None

    pose_hat = None
    if cfg.train_pose:
        x0 = table.pose[rows]
        if cfg.regression:
            out = model.pose(np.zeros_like(x0), np.full(n, cfg.T), y, sid)
            diff = T.sub(out, Tensor(x0.astype(out.dtype)))
            loss_pose = T.mean(T.mul(diff, diff))
            pose_hat = out
        else:
            eps = rng.standard_normal(x0.shape)
            xt = q_sample(x0, t, eps, sched)
            eps_hat = model.pose(xt, t, y, sid)
            loss_pose = epsilon_loss(eps_hat, eps.astype(eps_hat.dtype))
            pose_hat = predict_x0(xt.astype(eps_hat.dtype), t, eps_hat, sched)
        parts["pose"] = float(loss_pose.data)
        total = loss_pose

    code_hat = None
    if cfg.train_shape:
        c0 = table.code[rows].reshape(n, g, S.PARAMS_PER_GAUSSIAN)
        eps = rng.standard_normal(c0.shape)
        ct = q_sample(c0, t, eps, sched)
        eps_hat = model.shape(ct, t, y)
        loss_shape = epsilon_loss(eps_hat, eps.astype(eps_hat.dtype))
        code_hat = T.reshape(predict_x0(ct.astype(eps_hat.dtype), t, eps_hat, sched), (n, g * S.PARAMS_PER_GAUSSIAN))
        parts["shape"] = float(loss_shape.data)
        total = loss_shape if total is None else T.add(total, loss_shape)

    if align_weight > 0 and pose_hat is not None and code_hat is not None:
        targets = [table.train_targets[r] if not d else np.zeros((0, 3)) for r, d in zip(rows, dropped)]
        if any(len(q) for q in targets):
            z = rng.standard_normal((n, g, cfg.align_samples, 3))
            weights = sched.alpha_bar(t)
            la = A.surface_alignment_loss(pose_hat, code_hat, table.box_centers[rows], targets,
                                          table.camera, z, pose_norm, shape_norm, weights=weights)
            parts["align"] = float(la.data)
            total = T.add(total, T.affine(la, align_weight))
    if total is None:
        raise ValueError("both pose and shape losses are masked out")
    return total, parts


def fit_scene_diffusion(model: SceneModel, table: ObjectTable, cfg: RunConfig, rng: np.random.Generator,
                        logger: MetricLog, epochs: int, align_weight: float, stage: str,
                        stepper: Stepper | None = None) -> Stepper:
    """Pose and scaffold diffusion; pass the returned stepper back in to continue the same schedule."""
    sched = make_linear_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    pose_norm, shape_norm = PoseNormalizer(), S.ShapeCodeNormalizer(cfg.g)
    if stepper is None:
        stepper = scene_stepper(model, cfg, table.n_scenes, epochs)
    t0 = time.time()
    for _ in range(epochs):
        for scenes in _batches(table.n_scenes, cfg.batch_scenes, rng):
            try:
                loss, parts = scene_losses(model, table, scenes, cfg, sched, rng, align_weight, pose_norm, shape_norm)
            except FloatingPointError as e:
                logger.add(stage=stage, step=stepper.step, loss="nan")
                raise TrainingAborted(stage, stepper.step, str(e)) from e
            stepper.update(stage, loss, logger)
            if (stepper.step - 1) % cfg.log_every == 0:
                logger.add(stage=stage, step=stepper.step - 1, loss=float(loss.data),
                           seconds=round(time.time() - t0, 2), **{k: round(v, 6) for k, v in parts.items()})
    return stepper


def scene_stepper(model: SceneModel, cfg: RunConfig, n_scenes: int, epochs: int) -> Stepper:
    params = model.encoder.parameters() + model.pose.parameters() + model.shape.parameters()
    return Stepper(params, cfg, epochs * _steps_per_epoch(n_scenes, cfg.batch_scenes))


def _pretrain(records: list[SceneRecord], cfg: RunConfig, logger: MetricLog):
    rng = np.random.default_rng(cfg.seed)
    table = ObjectTable.from_records(records, PoseNormalizer(), S.ShapeCodeNormalizer(cfg.g), cfg.align_targets, rng)
    model = SceneModel(cfg, np.random.default_rng(cfg.seed))
    latents, scale = None, 1.0
    if cfg.decoder_epochs:
        latents, scale = fit_autodecoder(model, table, cfg, rng, logger)
        if cfg.latent_epochs:
            fit_latent_diffusion(model, table, latents, cfg, rng, logger)
    stepper = scene_stepper(model, cfg, table.n_scenes, cfg.epochs + cfg.joint_epochs)
    fit_scene_diffusion(model, table, cfg, rng, logger, cfg.epochs, 0.0, "diffusion", stepper)
    return model, table, stepper, rng, latents, scale


def _final_stage(model, table, stepper, rng, cfg: RunConfig, logger: MetricLog, joint: bool) -> None:
    if cfg.joint_epochs:
        fit_scene_diffusion(model, table, cfg, rng, logger, cfg.joint_epochs,
                            cfg.align_weight if joint else 0.0, "joint" if joint else "finetune", stepper)
    stepper.finish()


def train(records: list[SceneRecord], cfg: RunConfig, out_dir: str | Path | None = None) -> Trained:
    """Run every stage; writes ``metrics.csv``, ``config.json`` and checkpoints when ``out_dir`` is given."""
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    logger = MetricLog(out / "metrics.csv" if out else None)
    model, table, stepper, rng, latents, scale = _pretrain(records, cfg, logger)
    _final_stage(model, table, stepper, rng, cfg, logger, cfg.joint)
    trained = Trained(model, cfg, scale, latents)
    if out:
        save_model(trained, out)
    return trained


def train_joint_pair(records: list[SceneRecord], cfg: RunConfig) -> tuple[Trained, Trained]:
    """Joint and no-joint models that share every stage before the last one.

    After the common pre-training the state is copied; one copy continues
    with the alignment term, the other for the same number of steps without.
    """
    logger = MetricLog(None)
    model, table, stepper, rng, latents, scale = _pretrain(records, cfg, logger)
    model2, stepper2, rng2 = copy.deepcopy((model, stepper, rng))
    _final_stage(model, table, stepper, rng, cfg, logger, True)
    _final_stage(model2, table, stepper2, rng2, cfg, logger, False)
    return (Trained(model, cfg.replace(joint=True), scale, latents),
            Trained(model2, cfg.replace(joint=False), scale, latents))


def save_model(trained: Trained, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.sde", trained.model.state_dict())
    trained.cfg.save(out / "config.json")
    (out / "run.json").write_text(json.dumps({"latent_scale": trained.latent_scale,
                                              "config_hash": trained.cfg.hash(),
                                              "checkpoint": "model.sde"}, indent=1))


def load_model(run_dir: str | Path, cfg: RunConfig | None = None) -> Trained:
    run = Path(run_dir)
    saved = RunConfig.load(run / "config.json")
    if cfg is not None:
        arch = [k for k in ("g", "latent_dim", "feat_width", "pose_width", "pose_blocks", "pose_min_width",
                            "pose_heads", "pose_head_dim", "cond_tokens", "shape_width", "shape_encoder_layers",
                            "shape_decoder_layers", "latent_width", "latent_encoder_layers", "latent_decoder_layers",
                            "decoder_hidden", "use_isa") if getattr(cfg, k) != getattr(saved, k)]
        if arch:
            raise ValueError("checkpoint/config width mismatch: " + ", ".join(
                f"{k}: checkpoint {getattr(saved, k)} vs config {getattr(cfg, k)}" for k in arch))
    cfg = cfg or saved
    meta = json.loads((run / "run.json").read_text())
    model = SceneModel(cfg)
    model.load_state_dict(load_checkpoint(run / meta["checkpoint"]))
    return Trained(model, cfg, float(meta["latent_scale"]))


# -- sampling -------------------------------------------------------------------------------------


@dataclass
class Prediction:
    pose: np.ndarray      # (N, 7) normalised
    code: np.ndarray      # (N, g * 16) normalised
    latents: np.ndarray   # (N, g, h) decoder units


def sample(trained: Trained, table: ObjectTable, rng: np.random.Generator, steps: int | None = None,
           unconditional: bool = False, guidance_weight: float | None = None) -> Prediction:
    """DDIM (eta = 0) for all objects of all scenes at once; scenes never attend to each other."""
    cfg, model = trained.cfg, trained.model
    steps = steps or cfg.steps
    sched = make_linear_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    guide = GuidanceConfig(cfg.drop_probability, cfg.guidance_weight if guidance_weight is None else guidance_weight)
    n, g = table.n, cfg.g
    sid = table.scene
    with no_grad():
        y = model.encoder(table.boxes, table.patches, table.classes)
        null = model.encoder.null_condition(n)
        cond = None if unconditional else y

        def pose_fn(x, t, c):
            return model.pose(x, np.full(n, t), null if c is None else c, sid).data

        def shape_fn(x, t, c):
            return model.shape(x, np.full(n, t), null if c is None else c).data

        if cfg.regression:
            pose = model.pose(np.zeros((n, 7)), np.full(n, cfg.T), null if cond is None else cond, sid).data
        else:
            pose = ddim_sample(pose_fn, rng.standard_normal((n, 7)), sched, steps, condition=cond, guidance=guide,
                               clip=POSE_CLIP)
        tokens = ddim_sample(shape_fn, rng.standard_normal((n, g, S.PARAMS_PER_GAUSSIAN)), sched, steps,
                             condition=cond, guidance=guide, clip=CODE_CLIP)

        def latent_fn(x, t, _):
            return model.latent(x, np.full(n, t), tokens).data

        lat = ddim_sample(latent_fn, rng.standard_normal((n, g, cfg.latent_dim)), sched, steps)
    return Prediction(np.asarray(pose, dtype=np.float64), tokens.reshape(n, -1).astype(np.float64),
                      lat * trained.latent_scale)


def sample_unconditional_shapes(trained: Trained, n: int, rng: np.random.Generator,
                                steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``n`` scaffold codes (normalised) and latents drawn with the null condition."""
    cfg, model = trained.cfg, trained.model
    steps = steps or cfg.steps
    sched = make_linear_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    g = cfg.g
    with no_grad():
        null = model.encoder.null_condition(n)
        tokens = ddim_sample(lambda x, t, _: model.shape(x, np.full(n, t), null).data,
                             rng.standard_normal((n, g, S.PARAMS_PER_GAUSSIAN)), sched, steps, clip=CODE_CLIP)
        lat = ddim_sample(lambda x, t, _: model.latent(x, np.full(n, t), tokens).data,
                          rng.standard_normal((n, g, cfg.latent_dim)), sched, steps)
    return tokens.reshape(n, -1).astype(np.float64), lat * trained.latent_scale


def predicted_scaffold(code_norm: np.ndarray, g: int) -> S.GaussianScaffold:
    s = S.unpack_shape_code(S.ShapeCodeNormalizer(g).denormalize(code_norm), g)
    s.lam = np.maximum(s.lam, A.LAM_FLOOR)
    return s


# -- evaluation -----------------------------------------------------------------------------------


def evaluate(trained: Trained, table: ObjectTable, pred: Prediction, camera, rng: np.random.Generator,
             iou_thresh: float | None = None, shape_metrics: bool | None = None,
             fscore_tau: float | None = None) -> dict:
    """Per-object and per-class IoU3D, AP, Chamfer (x10^3), F-score and L_align."""
    cfg = trained.cfg
    iou_thresh = cfg.iou_thresh if iou_thresh is None else iou_thresh
    shape_metrics = cfg.shape_metrics if shape_metrics is None else shape_metrics
    tau = cfg.fscore_tau if fscore_tau is None else fscore_tau
    pn = PoseNormalizer()
    ious, preds, gts, aligns, cds, fs = [], [], [], [], [], []
    for i in range(table.n):
        gt_pose = denormalize_pose(table.pose[i], pn)
        pr_pose = denormalize_pose(pred.pose[i], pn)
        gt_box = Box3D.from_pose(gt_pose, table.box_centers[i], camera)
        pr_box = Box3D.from_pose(pr_pose, table.box_centers[i], camera)
        ious.append(iou3d(gt_box, pr_box))
        preds.append(Detection(int(table.scene[i]), int(table.classes[i]), pr_box, 1.0))
        gts.append(Detection(int(table.scene[i]), int(table.classes[i]), gt_box))
        scaffold = predicted_scaffold(pred.code[i], cfg.g)
        q = table.targets[i]
        aligns.append(A.alignment_metric([pr_pose], [scaffold], [table.box_centers[i]], [q], camera,
                                         cfg.eval_samples, rng) if len(q) else np.nan)
        if shape_metrics:
            cd, f = shape_scores(trained, scaffold, pred.latents[i], table.scaffolds[i], cfg.mesh_res, tau, rng)
            cds.append(cd)
            fs.append(f)
    per_class_ap, mean_ap = average_precision(preds, gts, iou_thresh)
    ious = np.array(ious)
    aligns = np.array(aligns)
    rows = []
    for c in sorted(set(table.classes.tolist())):
        sel = table.classes == c
        row = {"class": CLASS_NAMES[c], "count": int(sel.sum()), "iou3d": float(ious[sel].mean()),
               "ap": 100.0 * per_class_ap.get(c, 0.0), "align": _nanmean(aligns[sel])}
        if shape_metrics:
            row["cd_x1e3"] = 1e3 * _nanmean(np.array(cds)[sel])
            row["fscore"] = float(np.mean(np.array(fs)[sel]))
        rows.append(row)
    summary = {"class": "mean", "count": int(table.n), "iou3d": float(ious.mean()), "ap": 100.0 * mean_ap,
               "align": _nanmean(aligns)}
    if shape_metrics:
        summary["cd_x1e3"] = 1e3 * _nanmean(np.array(cds))
        summary["fscore"] = float(np.mean(fs))
    return {"summary": summary, "per_class": rows, "iou": ious, "align": aligns}


def _nanmean(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.nanmean(x)) if np.isfinite(x).any() else float("nan")


def shape_scores(trained: Trained, scaffold: S.GaussianScaffold, latents: np.ndarray, gt: S.GaussianScaffold,
                 res: int, tau: float, rng: np.random.Generator, n: int = 2000) -> tuple[float, float]:
    """Chamfer and F-score between the decoded and the ground-truth mesh in the unit object frame."""
    mesh = S.decode_mesh(scaffold, latents, trained.model.decoder, res)
    ref = S.union_mesh(gt, res)
    if mesh.is_empty or ref.is_empty:
        return float("nan"), 0.0
    p, q = S.surface_sample(mesh, n, rng), S.surface_sample(ref, n, rng)
    return S.chamfer_distance(p, q), S.f_score(p, q, tau)


def write_report(path: str | Path, report: dict) -> None:
    rows = report["per_class"] + [report["summary"]]
    keys = list(rows[-1].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (round(v, 6) if isinstance(v, float) else v) for k, v in r.items() if k in keys})
