"""
Inference stack and metrics: checkpoint averaging (SWA), flip test-time
augmentation, multi-pass temporal sampling, weighted ensembles and
Top-1 / Top-5 evaluation.
"""
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from torch.optim.swa_utils import update_bn
from tqdm import tqdm

from simple_mmar import reports
from simple_mmar.errors import CheckpointError, ConfigError, DatasetError
from simple_mmar.mm_data import read_clip, stack_modalities
from simple_mmar.sampling_augment import SamplerConfig, apply_test_augment, sample_indices
from simple_mmar.tsm_model import (FusionWeights, ModelConfig, TsmModel, fuse_logits,
                                   load_checkpoint, read_checkpoint, save_checkpoint)
from simple_mmar.utils import check_float_in_range, check_int_in_range

LOGGER = logging.getLogger(__name__)

SWEEP_AXES = ('alpha', 'segments', 'input_size', 'epochs', 'stack')


@dataclass
class CheckpointEntry:
    path: Path
    score: float
    epoch: Optional[int]
    config_hash: str


class CheckpointSet(object):
    """Checkpoints of one model config with their validation scores."""

    def __init__(self, entries):
        self.entries = list(entries)

    def __len__(self):
        return len(self.entries)

    def config_hash(self):
        hashes = sorted({entry.config_hash for entry in self.entries})
        if len(hashes) > 1:
            raise CheckpointError('checkpoints mix config hashes {}'
                                  .format(', '.join(h[:12] for h in hashes)))
        return hashes[0] if hashes else None

    def top(self, k):
        """The k best entries, highest score first (earlier entry wins a tie)."""
        ranked = sorted(range(len(self.entries)), key=lambda i: -self.entries[i].score)
        return [self.entries[i] for i in ranked[:k]]

    def best(self):
        if not self.entries:
            raise CheckpointError('checkpoint set is empty')
        return self.top(1)[0]

    def by_epoch(self):
        return sorted(self.entries, key=lambda entry: entry.epoch or 0)

    def write(self, path, relative_to=None):
        def location(entry):
            if relative_to is not None:
                return str(Path(entry.path).relative_to(relative_to))
            return str(entry.path)
        data = {
            'config_hash': self.config_hash(),
            'checkpoints': [{'path': location(e), 'score': e.score, 'epoch': e.epoch}
                            for e in self.entries],
        }
        return reports.write_json(data, path)

    @classmethod
    def from_run(cls, run_dir):
        """Read ``<run>/ckpt/scores.json``; paths are relative to the run directory."""
        run_dir = Path(run_dir)
        scores_path = run_dir / 'ckpt' / 'scores.json'
        if not scores_path.is_file():
            raise CheckpointError('no checkpoints in {}: missing {}'.format(run_dir, scores_path))
        with open(scores_path) as source:
            data = json.load(source)
        entries = [CheckpointEntry(path=run_dir / item['path'], score=float(item['score']),
                                   epoch=item.get('epoch'), config_hash=data['config_hash'])
                   for item in data.get('checkpoints', [])]
        for entry in entries:
            if not entry.path.is_file():
                raise CheckpointError('checkpoint {} listed in {} is missing'.format(entry.path, scores_path))
            if not np.isfinite(entry.score):
                raise CheckpointError('checkpoint {} has a non-finite score in {}'.format(entry.path, scores_path))
        if not entries:
            raise CheckpointError('no checkpoints in {}'.format(run_dir))
        return cls(entries)


@dataclass
class EvalConfig:
    """
    :param passes: temporal sampling passes per clip (2 = twice sampling)
    :param dense: dense strided windows instead of segment centres
    :param tta_flip: average the identity and the horizontally flipped view
    :param input_size: crop side, None keeps the augment setting (256 = full-resolution preset)
    :param scale_size: short-side scale target, None keeps the augment setting
    :param fusion: FusionWeights used to fuse modality logits
    :param member_weights: per ensemble member weight, None weighs members equally
    :param swa_top: members given as run directories are replaced by the SWA of their best n epochs (0 = best epoch)
    :param segments: evaluate at another segment count, None keeps the trained S
    """
    passes: int = 1
    dense: bool = False
    tta_flip: bool = False
    input_size: Optional[int] = None
    scale_size: Optional[int] = None
    fusion: FusionWeights = field(default_factory=FusionWeights)
    member_weights: Optional[List[float]] = None
    swa_top: int = 0
    segments: Optional[int] = None

    def __post_init__(self):
        check_int_in_range(self.passes, 'eval.passes', 1, 64)
        for name in ('input_size', 'scale_size'):
            if getattr(self, name) is not None:
                check_int_in_range(getattr(self, name), 'eval.' + name, 8, 4096)
        if self.member_weights is not None:
            self.member_weights = [check_float_in_range(w, 'eval.member_weights', 0.0)
                                   for w in self.member_weights]
            if not any(w > 0 for w in self.member_weights):
                raise ConfigError('eval.member_weights must not be all zero')
        check_int_in_range(self.swa_top, 'eval.swa_top', 0, 1000)
        if self.segments is not None:
            check_int_in_range(self.segments, 'eval.segments', 1, 256)

    def augment_for(self, augment):
        """The test-time AugmentConfig with this evaluation's input size applied."""
        changes = {}
        if self.input_size is not None:
            changes['input_size'] = self.input_size
        if self.scale_size is not None:
            changes['scale_size'] = self.scale_size
        return dataclasses.replace(augment, **changes) if changes else augment

    def sampler_for(self, segments):
        if self.dense:
            return SamplerConfig(segments=segments, mode='dense')
        return SamplerConfig(segments=segments, mode='center', passes=self.passes)


@dataclass
class Member:
    """One ensemble member: a model in eval mode and its scalar weight."""
    model: TsmModel
    weight: float = 1.0
    name: str = ''


def _average_state(payloads):
    """Floating tensors averaged, integer counters taken from the first payload."""
    states = [payload['state_dict'] for payload in payloads]
    averaged = {}
    for key, value in states[0].items():
        if value.is_floating_point():
            stacked = torch.stack([state[key].double() for state in states])
            averaged[key] = stacked.mean(dim=0).to(value.dtype)
        else:
            averaged[key] = value.clone()
    return averaged


def swa_average(ckpts, top_k, bn_loader=None, out_path=None):
    """
    Stochastic weight averaging of the ``top_k`` best checkpoints.

    Every floating tensor becomes the arithmetic mean of the selected
    checkpoints. With ``bn_loader`` the batch-normalization running statistics
    are then recomputed by one pass over that data.

    :param ckpts: CheckpointSet of one config
    :param top_k: number of best checkpoints to average
    :param bn_loader: optional DataLoader of training clips
    :param out_path: optional checkpoint file to write
    :return: TsmModel in eval mode
    """
    check_int_in_range(top_k, 'top_k', 1, None)
    if top_k > len(ckpts):
        raise ConfigError('top_k {} exceeds the {} available checkpoints'.format(top_k, len(ckpts)))
    config_hash = ckpts.config_hash()
    selected = ckpts.top(top_k)
    payloads = [read_checkpoint(entry.path) for entry in selected]
    for entry, payload in zip(selected, payloads):
        if payload['config_hash'] != config_hash:
            raise CheckpointError('{} has config hash {}, expected {}'.format(
                entry.path, payload['config_hash'][:12], config_hash[:12]))

    cfg = dataclasses.replace(ModelConfig.from_dict(payloads[0]['model_config']), pretrained=None)
    model = TsmModel(cfg)
    model.load_state_dict(_average_state(payloads))
    LOGGER.info('averaged %d checkpoints (epochs %s, scores %s)', top_k,
                [e.epoch for e in selected], ['{:.4f}'.format(e.score) for e in selected])
    if bn_loader is not None:
        update_bn(bn_loader, model)
        LOGGER.info('recomputed batch-norm statistics over %d clips', len(bn_loader.dataset))
    model.eval()
    if out_path is not None:
        save_checkpoint(model, out_path, score=selected[0].score,
                        extra={'swa_epochs': [e.epoch for e in selected],
                               'swa_sources': [str(e.path) for e in selected],
                               'bn_refreshed': bn_loader is not None})
        LOGGER.info('wrote %s', out_path)
    return model


def resolve_member(location, weight=1.0, swa_top=0, bn_loader_for=None, segments=None):
    """
    Load one ensemble member from a checkpoint file or a run directory.

    A run directory yields its best epoch, or the SWA of its ``swa_top`` best.

    :param bn_loader_for: optional callable ModelConfig -> DataLoader used for SWA
    """
    location = Path(location)
    if location.is_dir():
        ckpts = CheckpointSet.from_run(location)
        if swa_top:
            payload = read_checkpoint(ckpts.best().path)
            cfg = ModelConfig.from_dict(payload['model_config'])
            loader = bn_loader_for(cfg) if bn_loader_for is not None else None
            model = swa_average(ckpts, min(swa_top, len(ckpts)), bn_loader=loader)
        else:
            model, _ = load_checkpoint(ckpts.best().path)
    else:
        model, _ = load_checkpoint(location)
    if segments is not None:
        model.set_segments(segments)
    return Member(model=model, weight=weight, name=str(location))


def _check_members(members):
    if not members:
        raise ConfigError('at least one model is required')
    classes = {member.model.num_classes for member in members}
    if len(classes) > 1:
        raise ConfigError('ensemble members disagree on the number of classes: {}'.format(sorted(classes)))
    if not any(member.weight > 0 for member in members):
        raise ConfigError('ensemble weights must not be all zero')


@torch.no_grad()
def member_scores(model, frames, cfg, augment):
    """
    Fused logits of one model on one decoded clip, averaged over views then passes.

    :param frames: dict modality -> uint8 array (T, H, W, C)
    :return: tensor (K,)
    """
    total = next(iter(frames.values())).shape[0]
    passes = sample_indices(total, cfg.sampler_for(model.segments))
    views = [False, True] if cfg.tta_flip else [False]
    inputs = []
    for indices in passes:
        sampled = {modality: frames[modality][indices] for modality in model.modalities}
        for flip in views:
            stacks = apply_test_augment(sampled, augment, tta_flip=flip)
            inputs.append(stack_modalities(stacks, model.modalities))
    model.eval()
    fused = fuse_logits(model(torch.stack(inputs)), cfg.fusion, model.modalities)
    return fused.view(len(passes), len(views), -1).mean(dim=1).mean(dim=0)


def predict_frames(members, frames, cfg, augment):
    """
    Ensemble class probabilities for one decoded clip.

    sum_m u_m * softmax(score_m) / sum_m u_m, where score_m averages the fused
    logits of member m over views and sampling passes.

    :param members: list of Member
    :param frames: dict modality -> uint8 array (T, H, W, C)
    :param cfg: EvalConfig
    :param augment: AugmentConfig with mean/std resolved
    :return: numpy array (K,)
    """
    _check_members(members)
    augment = cfg.augment_for(augment)
    total = np.zeros(members[0].model.num_classes, dtype=np.float64)
    weight_sum = 0.0
    for member in members:
        if member.weight == 0:
            continue
        probabilities = torch.softmax(member_scores(member.model, frames, cfg, augment).double(), dim=0)
        total += member.weight * probabilities.numpy()
        weight_sum += member.weight
    return total / weight_sum


def predict_clip(members, clip, cfg, augment):
    """:func:`predict_frames` on a MultimodalClip read from disk."""
    return predict_frames(members, read_clip(clip), cfg, augment)


def topk_accuracy(scores, labels, ks=(1, 5)):
    """
    Fraction of rows whose label is among the k highest scores.

    Ties rank the lower class index first; k larger than K counts as K.

    :param scores: array (N, K)
    :param labels: array (N,)
    :return: list of floats, one per k
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError('scores must be (N, K) with one label per row')
    if scores.shape[0] == 0:
        raise ValueError('cannot compute accuracy of an empty set')
    order = np.argsort(-scores, axis=1, kind='stable')
    results = []
    for k in ks:
        check_int_in_range(int(k), 'k', 1, None)
        top = order[:, :min(int(k), scores.shape[1])]
        results.append(float(np.mean(np.any(top == labels[:, None], axis=1))))
    return results


def confusion_matrix(predictions, labels, num_classes):
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (np.asarray(labels), np.asarray(predictions)), 1)
    return confusion


def evaluate(members, index, cfg, augment):
    """
    Run the scoring stack over every clip of an index.

    :param members: list of Member
    :param index: DatasetIndex with labels
    :param cfg: EvalConfig
    :param augment: AugmentConfig with mean/std resolved
    :return: dict with top1, top5, per_class accuracy (None for absent classes),
        confusion counts (rows = true class) and the score array
    """
    if len(index) == 0:
        raise DatasetError('cannot evaluate an empty dataset')
    _check_members(members)
    if members[0].model.num_classes != index.num_classes:
        raise ConfigError('models predict {} classes, dataset has {}'
                          .format(members[0].model.num_classes, index.num_classes))
    trained = [member.model.segments for member in members]
    started = time.time()
    try:
        if cfg.segments is not None:
            for member in members:
                member.model.set_segments(cfg.segments)
        scores = np.stack([predict_clip(members, clip, cfg, augment)
                           for clip in tqdm(index.clips, desc='Scoring', leave=False, disable=None)])
    finally:
        for member, segments in zip(members, trained):
            member.model.set_segments(segments)
    labels = np.asarray(index.labels())
    top1, top5 = topk_accuracy(scores, labels, ks=(1, 5))
    predictions = np.argmax(scores, axis=1)
    confusion = confusion_matrix(predictions, labels, index.num_classes)
    per_class = []
    for label in range(index.num_classes):
        count = int(confusion[label].sum())
        per_class.append(float(confusion[label, label]) / count if count else None)
    seconds = time.time() - started
    LOGGER.info('evaluated %d clips: top1 %.4f top5 %.4f (%.1fs)', len(index), top1, top5, seconds)
    return {'top1': top1, 'top5': top5, 'per_class': per_class,
            'confusion': confusion.tolist(), 'scores': scores, 'seconds': seconds}


def write_results(result, path, config=None, classes=None):
    """Results file: config, top1, top5, per_class, confusion."""
    data = {key: result[key] for key in ('top1', 'top5', 'per_class', 'confusion')}
    data['config'] = config
    if classes is not None:
        data['classes'] = list(classes)
    return reports.write_json(data, path)


def staircase(runs, index, cfg, augment, swa_top=3, full_size=256, bn_loader_for=None):
    """
    Scoring-stack ablation, each stage adding to the previous one:
    base, +TTA, +SWA+ensemble, +twice sampling, +full resolution.

    :param runs: run directories; the first one gives the base model
    :return: list of rows {stage, top1, top5, seconds}
    """
    if not runs:
        raise ConfigError('staircase needs at least one run directory')
    base_cfg = dataclasses.replace(cfg, passes=1, dense=False, tta_flip=False, segments=None)
    tta_cfg = dataclasses.replace(base_cfg, tta_flip=True)
    twice_cfg = dataclasses.replace(tta_cfg, passes=2)
    full_cfg = dataclasses.replace(twice_cfg, input_size=full_size)

    base = [resolve_member(runs[0])]
    averaged = [resolve_member(run, swa_top=swa_top, bn_loader_for=bn_loader_for) for run in runs]
    stages = [
        ('base', base, base_cfg),
        ('+tta', base, tta_cfg),
        ('+swa+ensemble', averaged, tta_cfg),
        ('+twice sampling', averaged, twice_cfg),
        ('+full resolution', averaged, full_cfg),
    ]
    rows = []
    for stage, members, stage_cfg in stages:
        result = evaluate(members, index, stage_cfg, augment)
        rows.append({'stage': stage, 'top1': result['top1'], 'top5': result['top5'],
                     'seconds': result['seconds']})
        LOGGER.info('stage %-18s top1 %.4f top5 %.4f', stage, result['top1'], result['top5'])
    return rows


def sweep(axis, values, index, cfg, augment, out_dir, members=None, runs=None, bn_loader_for=None):
    """
    Re-evaluate across the values of one axis and write sweep.tsv, sweep.json and sweep.png.

    * alpha: DEPTH fusion weight
    * segments: segment count S at evaluation (consensus averages over any S)
    * input_size: crop side
    * epochs: every epoch checkpoint of ``runs[0]`` (values filter epochs, None = all)
    * stack: :func:`staircase` over ``runs`` (values unused)

    :return: list of row dicts
    """
    if axis not in SWEEP_AXES:
        raise ConfigError('sweep axis must be in {}'.format(list(SWEEP_AXES)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if axis == 'stack':
        rows = staircase(runs or [], index, cfg, augment, swa_top=max(cfg.swa_top, 1),
                         full_size=int(values[0]) if values else 256, bn_loader_for=bn_loader_for)
        x = [row['stage'] for row in rows]
        columns = ('stage', 'top1', 'top5', 'seconds')
    else:
        rows = []
        if axis == 'epochs':
            if not runs:
                raise ConfigError('the epochs axis needs a run directory')
            entries = CheckpointSet.from_run(runs[0]).by_epoch()
            if values:
                wanted = {int(v) for v in values}
                entries = [e for e in entries if e.epoch in wanted]
            points = [(entry.epoch, [Member(load_checkpoint(entry.path)[0])], cfg) for entry in entries]
        else:
            if not members:
                raise ConfigError('the {} axis needs at least one model'.format(axis))
            if not values:
                raise ConfigError('sweep values must not be empty')
            points = []
            for value in values:
                if axis == 'alpha':
                    fusion = dataclasses.replace(cfg.fusion, alpha=float(value))
                    points.append((float(value), members, dataclasses.replace(cfg, fusion=fusion)))
                elif axis == 'segments':
                    points.append((int(value), members, dataclasses.replace(cfg, segments=int(value))))
                else:
                    points.append((int(value), members, dataclasses.replace(cfg, input_size=int(value))))
        for value, point_members, point_cfg in points:
            result = evaluate(point_members, index, point_cfg, augment)
            rows.append({'axis': axis, 'value': value, 'top1': result['top1'],
                         'top5': result['top5'], 'seconds': result['seconds']})
            LOGGER.info('%s=%s top1 %.4f top5 %.4f (%.1fs)', axis, value,
                        result['top1'], result['top5'], result['seconds'])
        x = [row['value'] for row in rows]
        columns = ('axis', 'value', 'top1', 'top5', 'seconds')

    reports.write_table(rows, columns, out_dir / 'sweep.tsv')
    reports.write_json({'axis': axis, 'rows': rows}, out_dir / 'sweep.json')
    reports.plot_curves(x, {'Top-1': [row['top1'] for row in rows],
                            'Top-5': [row['top5'] for row in rows]},
                        out_dir / 'sweep.png', xlabel=axis, categorical=axis in ('stack', 'alpha'))
    (out_dir / 'sweep.txt').write_text(reports.format_table(rows, columns))
    return rows
