"""Staged training, checkpointing, and checkpoint evaluation.

Stages
  1a  geometry extractor: self-supervised depth reconstruction, then frozen
  1b  camera lift + renderer trained on current-frame depths (+ feature
      alignment to the frozen extractor)
  2   language: first only the projectors into/out of the causal core, then
      the core and the lift as well; the render-path weights stay untouched
  3   everything but the extractor, jointly: language + per-horizon depth
      losses + feature alignment (cosine and Gram) at every horizon

Checkpoints carry the config text, vocabulary, model weights, optimizer and
RNG state, so a resumed run reproduces the next step exactly.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .dataset_io import DrivingDataset, load_dataset
from .geometry import (GeometryError, extract_features, freeze_module,
                       gram_alignment_from_volumes, cosine_alignment_loss,
                       depth_render_loss, lambda_weight, pretrain_extractor,
                       total_loss, voxelize)
from .language import decode_greedy, language_loss
from .metrics import (EvalReport, Roi, chamfer, default_roi, full_roi,
                      roi_filter, rouge_l)


def _chamfer_or_inf(pred: np.ndarray, gt: np.ndarray) -> float:
    """Chamfer distance extended to empty clouds.

    An untrained model can emit no points above the weight threshold; report
    that as infinitely bad (or perfect agreement when both sides are empty)
    instead of failing the whole evaluation.
    """
    if pred.shape[0] == 0 and gt.shape[0] == 0:
        return 0.0
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        return float("inf")
    return chamfer(pred, gt)
from .model import WorldModel
from .render import VolumeGeometry, render_pointcloud
from .scene import ego_motion, lidar_directions, render_camera_views
from .vocab import Vocab

CHECKPOINT_VERSION = 1


class TrainerError(RuntimeError):
    pass


class StageOrderError(TrainerError):
    """A stage was requested before its prerequisite stage completed."""


@dataclass
class SeqTensors:
    cam: torch.Tensor          # (K, C_in, H, W) frame-0 camera features
    text_ids: list             # per QA: (L_text,) long
    sup_mask: list             # per QA: (L_text,) bool—answer span
    instr_ids: list            # per QA: (instr_len,) long
    answers: list              # per QA: answer string
    motions: torch.Tensor      # (H, 3) ego motion per horizon
    depths: np.ndarray         # (F, R) float64 ground-truth ray depths
    valid_idx: list            # per frame: int64 indices of supervisable rays
    occ: list                  # per frame: (1, Z, H, W) occupancy


def encode_qa(pair, vocab: Vocab, cfg: RunConfig):
    instr = vocab.encode(pair.instruction)
    ans = vocab.encode(pair.answer)
    li, la = cfg.llm_instr_len, cfg.llm_answer_len
    if instr.shape[0] > li:
        raise ConfigError(f"instruction longer than {li} tokens: {pair.instruction!r}")
    if ans.shape[0] > la - 2:
        raise ConfigError(f"answer longer than {la - 2} tokens: {pair.answer!r}")
    instr_ids = np.full(li, vocab.pad_id, dtype=np.int64)
    instr_ids[:instr.shape[0]] = instr
    text = np.full(li + la, vocab.pad_id, dtype=np.int64)
    text[:li] = instr_ids
    text[li] = vocab.ans_id
    text[li + 1:li + 1 + ans.shape[0]] = ans
    text[li + 1 + ans.shape[0]] = vocab.eos_id
    sup = np.zeros(li + la, dtype=bool)
    sup[li + 1:li + 2 + ans.shape[0]] = True   # answer tokens plus end marker
    return (torch.from_numpy(text), torch.from_numpy(sup),
            torch.from_numpy(instr_ids))


class DataPipeline:
    """Precomputed per-sequence tensors plus the train/val split."""

    def __init__(self, dataset: DrivingDataset, vocab: Vocab, dtype):
        self.cfg = dataset.config
        self.vocab = vocab
        self.dtype = dtype
        cfg = self.cfg
        self.geom = VolumeGeometry.from_config(cfg)
        dirs = lidar_directions(cfg)
        self.dirs = torch.from_numpy(dirs).to(dtype)
        self.origin = torch.tensor([0.0, 0.0, cfg.lidar_height], dtype=dtype)
        self.horizon = cfg.query_horizon

        self.seqs = []
        for si, seq in enumerate(dataset.sequences):
            cam = torch.from_numpy(render_camera_views(seq.frames[0], cfg)).to(dtype)
            depths = dataset.depths[si]
            valid_idx, occ = [], []
            for f in range(depths.shape[0]):
                d = depths[f]
                ok = np.isfinite(d) & (d <= cfg.render_depth_max)
                valid_idx.append(np.nonzero(ok)[0].astype(np.int64))
                hits = np.isfinite(d)
                pts = (np.array([0.0, 0.0, cfg.lidar_height])[None, :]
                       + d[hits, None] * dirs[hits])
                occ.append(voxelize(pts, self.geom, dtype=dtype))
            motions = torch.tensor(
                [[*ego_motion(seq, 0, h).delta_xy, ego_motion(seq, 0, h).delta_yaw]
                 for h in range(1, self.horizon + 1)], dtype=dtype)
            text_ids, sup_mask, instr_ids, answers = [], [], [], []
            for pair in dataset.qa[si]:
                t, s, i = encode_qa(pair, vocab, cfg)
                text_ids.append(t)
                sup_mask.append(s)
                instr_ids.append(i)
                answers.append(pair.answer)
            self.seqs.append(SeqTensors(cam=cam, text_ids=text_ids,
                                        sup_mask=sup_mask, instr_ids=instr_ids,
                                        answers=answers, motions=motions,
                                        depths=depths, valid_idx=valid_idx,
                                        occ=occ))
        n = len(self.seqs)
        n_val = max(1, math.ceil(cfg.train_val_fraction * n)) if n > 1 else 0
        self.train_ids = list(range(n - n_val))
        self.val_ids = list(range(n - n_val, n))

    # ---- batch builders ----

    def cam_batch(self, seq_ids) -> torch.Tensor:
        return torch.stack([self.seqs[i].cam for i in seq_ids])

    def motion_batch(self, seq_ids) -> torch.Tensor:
        return torch.stack([self.seqs[i].motions for i in seq_ids])

    def text_batch(self, picks):
        """picks: list of (seq_id, qa_index)."""
        text = torch.stack([self.seqs[s].text_ids[q] for s, q in picks])
        sup = torch.stack([self.seqs[s].sup_mask[q] for s, q in picks])
        return text, sup

    def ray_batch(self, seq_ids, frame: int, n_rays: int, rng: np.random.Generator):
        dirs, gts = [], []
        for s in seq_ids:
            seq = self.seqs[s]
            pool = seq.valid_idx[frame]
            sel = pool[rng.integers(0, pool.shape[0], size=n_rays)]
            dirs.append(self.dirs[sel])
            gts.append(torch.from_numpy(seq.depths[frame][sel]).to(self.dtype))
        dirs = torch.stack(dirs)
        origins = self.origin.expand(dirs.shape[0], n_rays, 3)
        return origins, dirs, torch.stack(gts)

    def target_features(self, model: WorldModel, seq_ids, frame: int,
                        cache: dict) -> torch.Tensor:
        """Frozen-extractor targets, memoised per (sequence, frame).

        The cache belongs to the caller: it is only valid for one extractor.
        """
        feats = []
        for s in seq_ids:
            key = (s, frame)
            if key not in cache:
                occ = self.seqs[s].occ[frame].unsqueeze(0)
                cache[key] = extract_features(model.extractor, occ)[0]
            feats.append(cache[key])
        return torch.stack(feats)

    def gt_cloud(self, seq_id: int, frame: int) -> np.ndarray:
        d = self.seqs[seq_id].depths[frame]
        hits = np.isfinite(d)
        dirs = self.dirs.numpy().astype(np.float64)
        origin = np.array([0.0, 0.0, self.cfg.lidar_height])
        return origin[None, :] + d[hits, None] * dirs[hits]


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: DrivingDataset,
                 log_path=None, quiet: bool = True,
                 pipeline: DataPipeline | None = None):
        self.cfg = cfg
        self.dtype = torch.float64 if cfg.train_dtype == "float64" else torch.float32
        self.vocab = Vocab()
        torch.manual_seed(cfg.train_seed)
        self.model = WorldModel(cfg, self.vocab).to(self.dtype)
        if pipeline is not None and pipeline.dtype != self.dtype:
            raise TrainerError("shared pipeline dtype does not match config")
        self.pipeline = pipeline or DataPipeline(dataset, self.vocab, self.dtype)
        self.np_rng = np.random.default_rng(cfg.train_seed)
        self.torch_gen = torch.Generator().manual_seed(cfg.train_seed)
        self.stage_done = 0
        self._stage1a_done = False
        self.step = 0
        self.quiet = quiet
        self.log_path = log_path
        self.evals = {}
        self._csv_started = False
        self.opt = None
        self.sched = None
        self._feat_cache = {}
        self._stage3_sched_steps = 0

    def _clip_grads(self):
        if self.cfg.train_grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                (p for p in self.model.parameters() if p.requires_grad),
                self.cfg.train_grad_clip)

    # ---- logging ----

    _CSV_FIELDS = ["stage", "step", "total", "lang", "cos", "gram",
                   "render_0", "render_1", "render_2", "render_3",
                   "lambda_0", "lambda_1", "lambda_2", "lambda_3", "lr"]

    def _log_row(self, stage, parts, lr):
        if self.log_path is None:
            return
        row = {k: "" for k in self._CSV_FIELDS}
        row.update({"stage": stage, "step": self.step, "lr": f"{lr:.6g}"})

        def _val(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        for key in ("total", "lang", "cos", "gram"):
            if parts.get(key) is not None:
                row[key] = f"{_val(parts[key]):.6f}"
        for i in range(4):
            if parts.get(f"render_{i}") is not None:
                row[f"render_{i}"] = f"{_val(parts[f'render_{i}']):.6f}"
                row[f"lambda_{i}"] = f"{lambda_weight(i):.6g}"
        mode = "a" if self._csv_started else "w"
        with open(self.log_path, mode, newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self._CSV_FIELDS)
            if not self._csv_started:
                writer.writeheader()
                self._csv_started = True
            writer.writerow(row)

    def _say(self, msg):
        if not self.quiet:
            print(msg, flush=True)

    # ---- stage 1 ----

    def stage1a(self):
        cfg = self.cfg
        self.model.set_trainable(["extractor", "renderer"])
        samples = []
        for s in self.pipeline.train_ids:
            seq = self.pipeline.seqs[s]
            for f in range(seq.depths.shape[0]):
                idx = seq.valid_idx[f]
                samples.append({
                    "occ": seq.occ[f],
                    "origins": self.pipeline.origin.expand(idx.shape[0], 3),
                    "dirs": self.pipeline.dirs[idx],
                    "gt": torch.from_numpy(seq.depths[f][idx]).to(self.dtype),
                })
        history = pretrain_extractor(
            self.model.extractor, self.model.renderer, samples,
            steps=cfg.train_stage1a_steps, lr=cfg.train_stage1a_lr,
            batch=cfg.train_batch, rays_per_sample=cfg.train_rays_per_frame,
            rng=self.np_rng, log=self._stage1a_log,
            grad_clip=cfg.train_grad_clip)
        self._stage1a_done = True
        return history

    def _stage1a_log(self, step, loss):
        self.step += 1
        self._log_row("1a", {"total": torch.tensor(loss)}, self.cfg.train_stage1a_lr)

    def stage1b(self):
        if not self._stage1a_done:
            raise StageOrderError("the lift/render phase requires a frozen extractor")
        cfg = self.cfg
        groups = ["tokenizer", "upsampler", "volume", "renderer"]
        self.model.set_trainable(groups)
        params = self.model.group_parameters(groups)
        opt = torch.optim.AdamW(params, lr=cfg.train_stage1b_lr, weight_decay=0.01)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=max(cfg.train_stage1b_steps, 1))
        history = []
        train = self.pipeline.train_ids
        for _ in range(cfg.train_stage1b_steps):
            seq_ids = self.np_rng.choice(train, size=min(cfg.train_batch, len(train)),
                                         replace=False)
            cams = self.pipeline.cam_batch(seq_ids)
            comp = self.model.down(self.model.lift(cams))
            vol = self.model.volume_from_comp(comp)
            o, d, gt = self.pipeline.ray_batch(seq_ids, 0,
                                               cfg.train_rays_per_frame, self.np_rng)
            pred, _, _ = self.model.renderer(vol, o, d, generator=self.torch_gen)
            render0 = depth_render_loss(pred, gt, torch.ones_like(gt, dtype=torch.bool), 0)
            target = self.pipeline.target_features(self.model, seq_ids, 0,
                                                   self._feat_cache)
            cos = cosine_alignment_loss(vol, target)
            parts = total_loss(None, [render0], cos, None,
                               render_weight=cfg.loss_render_weight,
                               use_gram=False)
            opt.zero_grad()
            parts["total"].backward()
            self._clip_grads()
            opt.step()
            sched.step()
            self.step += 1
            history.append(float(parts["total"].detach()))
            self._log_row("1b", parts, sched.get_last_lr()[0])
        self.stage_done = max(self.stage_done, 1)
        return history

    # ---- stage 2 ----

    def _qa_epoch_picks(self):
        picks = [(s, q) for s in self.pipeline.train_ids
                 for q in range(len(self.pipeline.seqs[s].text_ids))]
        perm = self.np_rng.permutation(len(picks))
        return [picks[i] for i in perm]

    def _comp_cache(self):
        """Scene summaries for every training sequence, detached.

        Valid while the camera tokenizer is frozen; lets the language
        phases skip the per-step camera encode.
        """
        cache = {}
        train = self.pipeline.train_ids
        with torch.no_grad():
            for i in range(0, len(train), self.cfg.train_lang_batch):
                ids = train[i:i + self.cfg.train_lang_batch]
                comp = self.model.down(self.model.lift(self.pipeline.cam_batch(ids)))
                for j, s in enumerate(ids):
                    cache[s] = comp[j]
        return cache

    def _stage2_step(self, picks, opt, sched, stage_tag, comp_cache=None):
        cfg = self.cfg
        seq_ids = [s for s, _q in picks]
        if comp_cache is None:
            cams = self.pipeline.cam_batch(seq_ids)
            tokens = self.model.encode(cams)["tokens"]
        else:
            tokens = self.model.to_tokens(
                torch.stack([comp_cache[s] for s in seq_ids]))
        text, sup = self.pipeline.text_batch(picks)
        out = self.model.core(tokens, text)
        lang = language_loss(out["logits"], text, sup)
        comp_b = self.model.comp_from_states(out["bev_states"])
        vol = self.model.volume_from_comp(comp_b)
        target = self.pipeline.target_features(self.model, seq_ids, 0,
                                                   self._feat_cache)
        cos = cosine_alignment_loss(vol, target)
        parts = total_loss(lang, [], cos, None, use_gram=False)
        opt.zero_grad()
        parts["total"].backward()
        self._clip_grads()
        opt.step()
        sched.step()
        self.step += 1
        self._log_row(stage_tag, parts, sched.get_last_lr()[0])
        return float(parts["total"].detach()), float(lang.detach())

    def stage2(self):
        if self.stage_done < 1:
            raise StageOrderError("stage 2 requires a completed stage 1")
        cfg = self.cfg
        history = []
        cache = self._comp_cache()
        for phase, groups, epochs, lr in (
                ("2a", ["projectors"], cfg.train_stage2a_epochs, cfg.train_stage2a_lr),
                ("2b", ["projectors", "lm"], cfg.train_stage2b_epochs,
                 cfg.train_stage2b_lr),
                ("2c", ["projectors", "lm", "tokenizer"], cfg.train_stage2c_epochs,
                 cfg.train_stage2c_lr)):
            if phase == "2c":
                cache = None  # tokenizer unfreezes, summaries go stale
            self.model.set_trainable(groups)
            params = self.model.group_parameters(groups)
            opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.01)
            picks_per_epoch = self._qa_epoch_picks()
            steps_per_epoch = math.ceil(len(picks_per_epoch) / cfg.train_lang_batch)
            sched = torch.optim.lr_scheduler.CosineAnnealingLR(
                opt, T_max=max(epochs * steps_per_epoch, 1))
            for _ep in range(epochs):
                picks = self._qa_epoch_picks()
                for i in range(0, len(picks), cfg.train_lang_batch):
                    chunk = picks[i:i + cfg.train_lang_batch]
                    tot, lang = self._stage2_step(chunk, opt, sched, phase,
                                                  comp_cache=cache)
                    history.append(lang)
                self._say(f"stage {phase}: epoch done, lang={history[-1]:.4f}")
        self.stage_done = max(self.stage_done, 2)
        return history

    # ---- stage 3 ----

    def begin_stage3(self):
        if self.stage_done < 2:
            raise StageOrderError("stage 3 requires a completed stage 2")
        cfg = self.cfg
        groups = ["tokenizer", "projectors", "lm", "queries", "link",
                  "upsampler", "volume", "renderer"]
        self.model.set_trainable(groups)
        params = self.model.group_parameters(groups)
        self.opt = torch.optim.AdamW(params, lr=cfg.train_stage3_lr, weight_decay=0.01)
        steps_per_epoch = math.ceil(len(self.pipeline.train_ids) / cfg.train_batch)
        self._stage3_sched_steps = max(cfg.train_stage3_epochs * steps_per_epoch, 1)
        self.sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            self.opt, T_max=self._stage3_sched_steps)

    def stage3_step(self, seq_ids):
        """One joint optimization step on the given sequences."""
        cfg = self.cfg
        pipe = self.pipeline
        b = len(seq_ids)
        n_frames = cfg.query_horizon + 1
        cams = pipe.cam_batch(seq_ids)
        enc = self.model.encode(cams)
        motions = pipe.motion_batch(seq_ids)
        queries = self.model.queries(enc["comp"], motions)
        picks = [(s, int(self.np_rng.integers(0, len(pipe.seqs[s].text_ids))))
                 for s in seq_ids]
        text, sup = pipe.text_batch(picks)
        out = self.model.core(enc["tokens"], text, queries.projected)
        lang = language_loss(out["logits"], text, sup)

        state_maps = [self.model.comp_from_states(out["bev_states"])]
        for fut in self.model.future_states(out["bev_states"], out, motions):
            state_maps.append(self.model.comp_from_states(fut))
        vols = self.model.volume_from_comp(torch.cat(state_maps, dim=0))
        vols_by_frame = vols.view(n_frames, b, *vols.shape[1:])

        render_terms = []
        cos_terms, gram_terms = [], []
        for f in range(n_frames):
            o, d, gt = pipe.ray_batch(seq_ids, f, cfg.train_rays_per_frame,
                                      self.np_rng)
            pred, _, _ = self.model.renderer(vols_by_frame[f], o, d,
                                             generator=self.torch_gen)
            render_terms.append(depth_render_loss(
                pred, gt, torch.ones_like(gt, dtype=torch.bool), f))
            target = pipe.target_features(self.model, seq_ids, f,
                                          self._feat_cache)
            if cfg.loss_cos:
                cos_terms.append(cosine_alignment_loss(vols_by_frame[f], target))
            if cfg.loss_gram:
                gram_terms.append(gram_alignment_from_volumes(vols_by_frame[f],
                                                              target))
        cos = torch.stack(cos_terms).mean() if cos_terms else None
        gram = torch.stack(gram_terms).mean() if gram_terms else None
        parts = total_loss(lang, render_terms, cos, gram,
                           render_weight=cfg.loss_render_weight,
                           use_cos=cfg.loss_cos, use_gram=cfg.loss_gram)
        self.opt.zero_grad()
        parts["total"].backward()
        self._clip_grads()
        self.opt.step()
        self.sched.step()
        self.step += 1
        self._log_row("3", parts, self.sched.get_last_lr()[0])
        return parts

    def stage3(self, eval_bounds: bool = True):
        self.begin_stage3()
        cfg = self.cfg
        if eval_bounds:
            self.evals["stage3_start"] = self.evaluate(stage=3)
            self._say(f"stage3 start: {self.evals['stage3_start'].chamfer_by_horizon}")
        train = list(self.pipeline.train_ids)
        for ep in range(cfg.train_stage3_epochs):
            order = self.np_rng.permutation(len(train))
            for i in range(0, len(train), cfg.train_batch):
                seq_ids = [train[j] for j in order[i:i + cfg.train_batch]]
                parts = self.stage3_step(seq_ids)
            self._say(f"stage3 epoch {ep}: total={float(parts['total'].detach()):.4f}")
        self.stage_done = max(self.stage_done, 3)
        if eval_bounds:
            self.evals["stage3_end"] = self.evaluate(stage=3)
            self._say(f"stage3 end: {self.evals['stage3_end'].chamfer_by_horizon}")
        return self.evals

    def run_all(self):
        self.stage1a()
        self.stage1b()
        self.stage2()
        return self.stage3()

    # ---- evaluation ----

    def evaluate(self, stage: int | None = None, roi: str | None = None,
                 max_frames: int | None = None) -> EvalReport:
        stage = self.stage_done if stage is None else stage
        roi_name = roi or self.cfg.eval_roi
        region = full_roi() if roi_name == "full" else default_roi(self.cfg.scene_extent)
        max_frames = max_frames or self.cfg.eval_max_frames
        return _evaluate_model(self.model, self.pipeline, self.cfg, self.vocab,
                               stage, region, max_frames)

    # ---- persistence ----

    def save_checkpoint(self, path) -> None:
        state = {
            "version": CHECKPOINT_VERSION,
            "stage": self.stage_done,
            "stage1a_done": self._stage1a_done,
            "step": self.step,
            "config": self.cfg.to_text(),
            "config_digest": self.cfg.digest(),
            "vocab": self.vocab.tokens,
            "model": self.model.state_dict(),
            "optimizer": self.opt.state_dict() if self.opt is not None else None,
            "sched_steps": self._stage3_sched_steps,
            "sched": self.sched.state_dict() if self.sched is not None else None,
            "rng": {
                "numpy": self.np_rng.bit_generator.state,
                "torch_gen": self.torch_gen.get_state(),
                "torch_global": torch.get_rng_state(),
            },
            "evals": {k: vars(v) for k, v in self.evals.items()},
        }
        torch.save(state, path)

    @classmethod
    def restore(cls, path, dataset: DrivingDataset, overrides=None,
                log_path=None, quiet: bool = True,
                pipeline: DataPipeline | None = None) -> "Trainer":
        state = torch.load(path, weights_only=False)
        if state.get("version") != CHECKPOINT_VERSION:
            raise TrainerError(f"unsupported checkpoint version {state.get('version')}")
        cfg = RunConfig.from_text(state["config"])
        if overrides:
            cfg.apply_overrides(overrides)
        trainer = cls(cfg, dataset, log_path=log_path, quiet=quiet,
                      pipeline=pipeline)
        missing, unexpected = trainer.model.load_state_dict(state["model"],
                                                            strict=False)
        fresh = {n for n in missing if n.split(".")[0] in ("link",)}
        if set(missing) - fresh:
            raise TrainerError(f"checkpoint missing parameters: {sorted(set(missing) - fresh)[:4]}")
        trainer.stage_done = state["stage"]
        trainer._stage1a_done = bool(state.get("stage1a_done", state["stage"] >= 1))
        trainer.step = state["step"]
        if state.get("optimizer") is not None:
            trainer.begin_stage3()
            trainer._stage3_sched_steps = state["sched_steps"]
            trainer.sched = torch.optim.lr_scheduler.CosineAnnealingLR(
                trainer.opt, T_max=trainer._stage3_sched_steps)
            try:
                trainer.opt.load_state_dict(state["optimizer"])
            except ValueError as exc:
                raise TrainerError(
                    "optimizer state does not fit the restored parameter set "
                    "(architecture overrides require a checkpoint saved before "
                    "the joint stage)") from exc
            trainer.sched.load_state_dict(state["sched"])
        if trainer._stage1a_done:
            freeze_module(trainer.model.extractor)
        trainer.np_rng.bit_generator.state = state["rng"]["numpy"]
        trainer.torch_gen.set_state(state["rng"]["torch_gen"])
        torch.set_rng_state(state["rng"]["torch_global"])
        return trainer


# --------------------------------------------------------------------------
# evaluation internals
# --------------------------------------------------------------------------

@torch.no_grad()
def _point_metrics(model: WorldModel, pipe: DataPipeline, cfg: RunConfig,
                   stage: int, region: Roi, max_frames: int, vocab: Vocab):
    horizons = list(range(cfg.query_horizon + 1)) if stage >= 3 else [0]
    sums = {h: 0.0 for h in horizons}
    count = 0
    val = pipe.val_ids[:max_frames]
    dirs = pipe.dirs.unsqueeze(0)
    origin = pipe.origin.expand(1, pipe.dirs.shape[0], 3)
    for s in val:
        cams = pipe.cam_batch([s])
        enc = model.encode(cams)
        if stage <= 1:
            vols = [model.volume_from_comp(enc["comp"])]
        else:
            motions = pipe.motion_batch([s])
            queries = model.queries(enc["comp"], motions) if stage >= 3 else None
            decoded = decode_greedy(model.core, enc["tokens"],
                                    pipe.seqs[s].instr_ids[0].unsqueeze(0), vocab)
            text, _sup, _instr = _text_with_answer(pipe.seqs[s].instr_ids[0],
                                                   decoded[0], vocab, cfg)
            out = model.core(enc["tokens"], text.unsqueeze(0),
                             queries.projected if queries is not None else None)
            maps = [model.comp_from_states(out["bev_states"])]
            if stage >= 3:
                for fut in model.future_states(out["bev_states"], out, motions):
                    maps.append(model.comp_from_states(fut))
            vols_all = model.volume_from_comp(torch.cat(maps, dim=0))
            vols = [vols_all[i:i + 1] for i in range(vols_all.shape[0])]
        for h in horizons:
            pred_d, wsum, _ = model.renderer(vols[h], origin, dirs)
            pts = render_pointcloud(pred_d, wsum, pipe.origin.numpy().astype(np.float64),
                                    pipe.dirs.numpy().astype(np.float64),
                                    cfg.render_weight_threshold)
            gt = pipe.gt_cloud(s, h)
            pred_roi = roi_filter(pts, region)
            gt_roi = roi_filter(gt, region)
            sums[h] += _chamfer_or_inf(pred_roi, gt_roi)
        count += 1
    return {h: sums[h] / max(count, 1) for h in horizons}, count


def _text_with_answer(instr_ids: torch.Tensor, answer_ids, vocab: Vocab,
                      cfg: RunConfig):
    li, la = cfg.llm_instr_len, cfg.llm_answer_len
    text = torch.full((li + la,), vocab.pad_id, dtype=torch.long)
    text[:li] = instr_ids
    text[li] = vocab.ans_id
    ids = list(answer_ids)[:la - 2]
    for j, t in enumerate(ids):
        text[li + 1 + j] = int(t)
    text[li + 1 + len(ids)] = vocab.eos_id
    sup = torch.zeros(li + la, dtype=torch.bool)
    sup[li + 1:li + 2 + len(ids)] = True
    return text, sup, instr_ids


@torch.no_grad()
def _qa_metrics(model: WorldModel, pipe: DataPipeline, cfg: RunConfig,
                vocab: Vocab, batch: int = 16):
    items = [(s, q) for s in pipe.val_ids
             for q in range(len(pipe.seqs[s].text_ids))]
    if not items:
        return None, None
    correct = 0
    rouge_sum = 0.0
    for i in range(0, len(items), batch):
        chunk = items[i:i + batch]
        cams = pipe.cam_batch([s for s, _q in chunk])
        enc = model.encode(cams)
        instr = torch.stack([pipe.seqs[s].instr_ids[q] for s, q in chunk])
        decoded = decode_greedy(model.core, enc["tokens"], instr, vocab)
        for (s, q), ids in zip(chunk, decoded):
            text = vocab.decode(ids)
            ref = pipe.seqs[s].answers[q]
            correct += int(text == ref)
            rouge_sum += rouge_l(text, ref)
    return correct / len(items), rouge_sum / len(items)


def _evaluate_model(model: WorldModel, pipe: DataPipeline, cfg: RunConfig,
                    vocab: Vocab, stage: int, region: Roi,
                    max_frames: int) -> EvalReport:
    model.eval()
    try:
        cd, n = _point_metrics(model, pipe, cfg, stage, region, max_frames, vocab)
        qa_acc, rouge_mean = (None, None)
        if stage >= 2:
            qa_acc, rouge_mean = _qa_metrics(model, pipe, cfg, vocab)
    finally:
        model.train()
    return EvalReport(config_digest=cfg.digest(), stage=stage, n_frames=n,
                      chamfer_by_horizon=cd, qa_accuracy=qa_acc,
                      rouge_mean=rouge_mean)


def evaluate_checkpoint(checkpoint_path, dataset_path, roi: str = "default") -> EvalReport:
    state = torch.load(checkpoint_path, weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise TrainerError(f"unsupported checkpoint version {state.get('version')}")
    cfg = RunConfig.from_text(state["config"])
    dataset = load_dataset(dataset_path)
    if dataset.config.query_horizon != cfg.query_horizon:
        raise TrainerError("checkpoint horizon does not match dataset")
    vocab = Vocab(state["vocab"])
    dtype = torch.float64 if cfg.train_dtype == "float64" else torch.float32
    torch.manual_seed(cfg.train_seed)
    model = WorldModel(cfg, vocab).to(dtype)
    model.load_state_dict(state["model"])
    pipe = DataPipeline(dataset, vocab, dtype)
    region = full_roi() if roi == "full" else default_roi(cfg.scene_extent)
    return _evaluate_model(model, pipe, cfg, vocab, state["stage"], region,
                           cfg.eval_max_frames)
