"""Training loop wiring the detector, dual assignment, losses and optimizer."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from microdet import tensor as T
from microdet.assign import AssignConfig, assign_o2m, assign_o2o, decode_cells, \
    decode_nms_free, decode_with_nms
from microdet.config import RunConfig, write_model_sidecar
from microdet.data import Sample
from microdet.evalbench import EvalReport, evaluate
from microdet.losses import (LossConfig, ProgSchedule, WIoURunningMean,
                             kd_loss, task_loss, total_loss)
from microdet.model import Detector
from microdet.optim import MuonSGD
from microdet.tensor import Tensor

LOG_COLUMNS = ("epoch", "box_loss", "cls_loss", "kd_loss", "total", "lr")


def assign_config(cfg: RunConfig) -> AssignConfig:
    ls = cfg.loss
    return AssignConfig(topk=ls.assign_topk, metric_alpha=ls.assign_alpha,
                        metric_beta=ls.assign_beta, center_radius=ls.center_radius,
                        small_target_alpha=ls.small_target_alpha, small_target_area=ls.small_target_area,
                        small_target_boost=ls.small_target_boost)


def loss_config(cfg: RunConfig) -> LossConfig:
    ls = cfg.loss
    return LossConfig(lambda_kd=ls.lambda_kd, temperature=ls.temperature,
                      wiou_alpha=ls.wiou_alpha, wiou_delta=ls.wiou_delta,
                      wiou_momentum=ls.wiou_momentum, dfl_weight=ls.dfl_weight,
                      cls_pos_weight=ls.cls_pos_weight,
                      box_weight=(ls.box_weight_initial, ls.box_weight_final),
                      cls_weight=(ls.cls_weight_initial, ls.cls_weight_final))


def predict_images(model: Detector, images_f32: np.ndarray, decode: str,
                   conf_thresh: float, iou_thresh: float, batch_size: int = 16):
    """Eval-mode detections per image for a [N,3,H,W] float array."""
    model.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(images_f32), batch_size):
            batch = Tensor(images_f32[start:start + batch_size])
            preds = model(batch)
            if decode == "o2o":
                if "o2o" not in preds:
                    raise ValueError("decode 'o2o' requires a model trained with the o2o head")
                raw = preds["o2o"]
                for i in range(batch.shape[0]):
                    out.append(decode_nms_free(raw, conf_thresh, image_index=i))
            elif decode == "nms":
                raw = preds["o2m"]
                for i in range(batch.shape[0]):
                    out.append(decode_with_nms(raw, conf_thresh, iou_thresh, image_index=i))
            else:
                raise ValueError(f"unknown decode mode {decode!r}")
    return out


def evaluate_model(model: Detector, samples: list[Sample], cfg: RunConfig,
                   decode: str | None = None) -> EvalReport:
    images = np.stack([s.image_f32() for s in samples])
    dets = predict_images(model, images, decode or cfg.train.decode,
                          cfg.train.conf_thresh, cfg.train.iou_thresh,
                          cfg.train.batch_size)
    return evaluate(dets, [s.gts for s in samples],
                    image_size=cfg.model.input_size)


@dataclass
class TrainOutcome:
    history: list[dict]
    final_map50: float | None
    best_map50: float | None


class Trainer:
    """Single-process training over an in-memory corpus."""

    def __init__(self, cfg: RunConfig, train_samples: list[Sample],
                 val_samples: list[Sample] | None = None,
                 teacher: Detector | None = None):
        if not train_samples:
            raise ValueError("empty training set")
        got = train_samples[0].image_u8.shape
        want = (3, cfg.model.input_size, cfg.model.input_size)
        if got != want:
            raise ValueError(
                f"dataset images have shape {got} but [model] input_size is "
                f"{cfg.model.input_size}")
        self.cfg = cfg
        self.model = Detector(cfg.model, seed=cfg.train.seed)
        self.teacher = teacher
        self.kd_levels: tuple[str, ...] = ()
        if teacher is not None:
            shared = tuple(lv for lv in cfg.model.levels if lv in teacher.cfg.levels)
            if not shared:
                raise ValueError(
                    f"no shared pyramid levels between student {cfg.model.levels} "
                    f"and teacher {teacher.cfg.levels}")
            if teacher.cfg.num_classes != cfg.model.num_classes:
                raise ValueError("teacher/student class count mismatch")
            if teacher.cfg.input_size != cfg.model.input_size:
                raise ValueError("teacher/student input size mismatch")
            self.kd_levels = shared
            teacher.eval()
        self.train_samples = train_samples
        self.val_samples = val_samples or []
        oc = cfg.optimizer
        self.opt = MuonSGD(self.model.named_parameters(),
                         lr_muon=oc.eta_muon, lr_sgd=oc.eta_sgd,
                         momentum=oc.momentum, ns_steps=oc.ns_steps,
                         ns_coeffs=(oc.ns_coeff_a, oc.ns_coeff_b, oc.ns_coeff_c),
                         muon_enabled=oc.muon_enabled, backbone_only=oc.backbone_only)
        self.schedule = ProgSchedule(
            total_epochs=cfg.train.epochs,
            box=(cfg.loss.box_weight_initial, cfg.loss.box_weight_final),
            cls=(cfg.loss.cls_weight_initial, cfg.loss.cls_weight_final))
        self.loss_cfg = loss_config(cfg)
        self.assign_cfg = assign_config(cfg)
        self.wiou_state = WIoURunningMean(momentum=cfg.loss.wiou_momentum)
        self.lambda_kd = cfg.loss.lambda_kd if teacher is not None else 0.0

    def lr_scale(self, epoch: int) -> float:
        e_max = max(1, self.cfg.train.epochs - 1)
        frac = self.cfg.optimizer.lr_final_frac
        return frac + 0.5 * (1.0 - frac) * (1.0 + math.cos(math.pi * epoch / e_max))

    def _batch_losses(self, images: np.ndarray, gts_batch, epoch: int) -> dict:
        model = self.model
        model.train(True)
        x = Tensor(images)
        preds = model(x)
        branch_losses = []
        for branch, assigner in (("o2m", assign_o2m), ("o2o", assign_o2o)):
            if branch not in preds:
                continue
            raw = preds[branch]
            assignments = [assigner(decode_cells(raw, i), gts_batch[i], self.assign_cfg)
                           for i in range(len(gts_batch))]
            branch_losses.append(task_loss(
                raw, assignments, gts_batch, self.schedule, epoch,
                self.loss_cfg, self.wiou_state.value))
        task_tensor = branch_losses[0].tensor
        for extra in branch_losses[1:]:
            task_tensor = task_tensor + extra.tensor

        kd_value = 0.0
        if self.teacher is not None:
            with T.no_grad():
                teacher_preds = self.teacher(x)["o2m"]
            kd_tensor = kd_loss(
                {lv: preds["o2m"].cls[lv] for lv in self.kd_levels},
                {lv: Tensor(teacher_preds.cls[lv].data) for lv in self.kd_levels},
                self.loss_cfg.temperature)
            total_tensor = total_loss(task_tensor, kd_tensor, self.lambda_kd)
            kd_value = float(kd_tensor.data)
        else:
            total_tensor = task_tensor

        total_tensor.backward()
        self.opt.step(lr_scale=self.lr_scale(epoch))
        self.opt.zero_grad()
        total_tensor.free_graph()

        assigned = sum(b.num_assigned for b in branch_losses)
        if branch_losses[0].num_assigned > 0:
            self.wiou_state.update(branch_losses[0].mean_liou)
        return {
            "box_loss": sum(b.box_loss for b in branch_losses),
            "cls_loss": sum(b.cls_loss for b in branch_losses),
            "kd_loss": kd_value,
            "total": float(total_tensor.data),
            "assigned": assigned,
        }

    def run(self, out_dir=None, log_name: str = "train_log.csv") -> TrainOutcome:
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 0x7247]))
        n = len(self.train_samples)
        bs = min(cfg.train.batch_size, n)
        history: list[dict] = []
        best_map50 = None
        best_state = None
        for epoch in range(cfg.train.epochs):
            order = rng.permutation(n)
            sums = {"box_loss": 0.0, "cls_loss": 0.0, "kd_loss": 0.0, "total": 0.0}
            n_batches = 0
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                images = np.stack([self.train_samples[i].image_f32() for i in idx])
                gts_batch = [self.train_samples[i].gts for i in idx]
                stats = self._batch_losses(images, gts_batch, epoch)
                for key in sums:
                    sums[key] += stats[key]
                n_batches += 1
            row = {"epoch": epoch,
                   **{k: sums[k] / n_batches for k in sums},
                   "lr": self.lr_scale(epoch)}
            history.append(row)
            if (cfg.train.val_every and self.val_samples
                    and (epoch + 1) % cfg.train.val_every == 0):
                report = evaluate_model(self.model, self.val_samples, cfg)
                row["val_map50"] = report.map50
                if best_map50 is None or report.map50 > best_map50:
                    best_map50 = report.map50
                    best_state = self.model.state()

        final_map50 = None
        if self.val_samples:
            final_map50 = evaluate_model(self.model, self.val_samples, cfg).map50
            if best_map50 is None or final_map50 > best_map50:
                best_map50 = final_map50
                best_state = self.model.state()

        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self._write_log(os.path.join(out_dir, log_name), history)
            self._save(os.path.join(out_dir, "final.mdt"), self.model.state())
            self._save(os.path.join(out_dir, "best.mdt"),
                       best_state if best_state is not None else self.model.state())
        return TrainOutcome(history=history, final_map50=final_map50,
                            best_map50=best_map50)

    def _save(self, path, state) -> None:
        T.save_checkpoint(path, state)
        write_model_sidecar(self.cfg.model, str(path) + ".cfg")

    @staticmethod
    def _write_log(path, history: list[dict]) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
            for row in history:
                fh.write(",".join(
                    str(row["epoch"]) if col == "epoch" else f"{row[col]:.6f}"
                    for col in LOG_COLUMNS) + "\n")


def load_model(checkpoint_path) -> Detector:
    """Rebuild a detector from a checkpoint and its [model] sidecar."""
    from microdet.config import read_model_sidecar
    sidecar = str(checkpoint_path) + ".cfg"
    model_cfg = read_model_sidecar(sidecar)
    model = Detector(model_cfg, seed=0)
    model.load(checkpoint_path)
    return model
