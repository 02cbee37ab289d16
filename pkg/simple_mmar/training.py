"""
Optimization of the fused-logit cross entropy with momentum SGD.
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from simple_mmar import reports
from simple_mmar.errors import ConfigError, TrainingError
from simple_mmar.scoring import CheckpointEntry, CheckpointSet, topk_accuracy
from simple_mmar.tsm_model import FusionWeights, fuse_logits, save_checkpoint
from simple_mmar.utils import check_float_in_range, check_int_in_range

LOGGER = logging.getLogger(__name__)

SCORES_FILE = 'scores.json'


@dataclass
class TrainConfig:
    """
    :param epochs: number of epochs
    :param batch_size: clips per mini-batch
    :param lr: initial learning rate
    :param lr_milestones: epochs after which the rate is multiplied by ``lr_factor``;
        None means one third and five sixths of ``epochs``
    :param lr_factor: step decay factor
    :param momentum: SGD momentum
    :param weight_decay: L2 penalty added to the gradient before momentum
    :param clip_grad: global gradient-norm threshold
    :param fusion: FusionWeights of the training objective
    :param seed: None takes the experiment seed
    :param save_every_epoch: write a checkpoint after every epoch, else only the last
    :param num_workers: DataLoader workers (0 keeps runs bit-reproducible)
    """
    epochs: int = 30
    batch_size: int = 6
    lr: float = 0.01
    lr_milestones: Optional[List[int]] = None
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_grad: float = 20.0
    fusion: FusionWeights = field(default_factory=FusionWeights)
    seed: Optional[int] = None
    save_every_epoch: bool = True
    num_workers: int = 0

    def __post_init__(self):
        check_int_in_range(self.epochs, 'train.epochs', 1, 100000)
        check_int_in_range(self.batch_size, 'train.batch_size', 1, 100000)
        self.lr = check_float_in_range(self.lr, 'train.lr', 0.0, min_inclusive=False)
        self.lr_factor = check_float_in_range(self.lr_factor, 'train.lr_factor', 0.0, min_inclusive=False)
        self.momentum = check_float_in_range(self.momentum, 'train.momentum', 0.0, 1.0)
        self.weight_decay = check_float_in_range(self.weight_decay, 'train.weight_decay', 0.0)
        self.clip_grad = check_float_in_range(self.clip_grad, 'train.clip_grad', 0.0, min_inclusive=False)
        if self.seed is not None:
            check_int_in_range(self.seed, 'train.seed', 0, None)
        check_int_in_range(self.num_workers, 'train.num_workers', 0, 256)
        if self.lr_milestones is not None:
            for milestone in self.lr_milestones:
                check_int_in_range(milestone, 'train.lr_milestones', 1, None)
            if sorted(self.lr_milestones) != list(self.lr_milestones):
                raise ConfigError('train.lr_milestones must be increasing')

    def milestones(self):
        if self.lr_milestones is not None:
            return list(self.lr_milestones)
        return sorted({m for m in (self.epochs // 3, self.epochs * 5 // 6) if m >= 1})


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_top1: float
    val_top1: float
    val_top5: float
    lr: float
    checkpoint: Optional[str]
    seconds: float
    step_losses: List[float] = field(default_factory=list)


@dataclass
class TrainReport:
    records: List[EpochRecord] = field(default_factory=list)

    COLUMNS = ('epoch', 'train_loss', 'train_top1', 'val_top1', 'val_top5', 'lr', 'checkpoint')

    def rows(self):
        return [asdict(record) for record in self.records]

    def summary(self):
        return reports.format_table(self.rows(), self.COLUMNS)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        (out_dir / 'summary.txt').write_text(self.summary())
        if self.records:
            epochs = [r.epoch for r in self.records]
            reports.plot_curves(epochs, {'train Top-1': [r.train_top1 for r in self.records],
                                         'val Top-1': [r.val_top1 for r in self.records]},
                                out_dir / 'epochs.png', xlabel='epoch')


def fusion_loss(logits, labels, weights, modalities=('rgb', 'tir', 'depth')):
    """
    Cross entropy of the fused logits, mean over the batch

    :param logits: tensor (B, M, K)
    :param labels: tensor (B,) of class indices in [0, K)
    :param weights: FusionWeights
    """
    num_classes = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError('labels must be between 0 and {}'.format(num_classes - 1))
    return F.cross_entropy(fuse_logits(logits, weights, modalities), labels)


def global_norm(gradients):
    gradients = [g for g in gradients if g is not None]
    if not gradients:
        return 0.0
    norms = torch.stack([torch.linalg.vector_norm(g.detach().double()) for g in gradients])
    return float(torch.linalg.vector_norm(norms))


def grad_clip(gradients, max_norm):
    """
    Scale all gradients in place by max_norm / g when their global L2 norm g
    exceeds max_norm.

    :return: the gradient list
    """
    check_float_in_range(max_norm, 'max_norm', 0.0, min_inclusive=False)
    gradients = [g for g in gradients if g is not None]
    norm = global_norm(gradients)
    if norm > max_norm:
        scale = max_norm / norm
        for gradient in gradients:
            gradient.mul_(scale)
    return gradients


def make_optimizer(parameters, cfg):
    return torch.optim.SGD(parameters, lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def make_scheduler(optimizer, cfg):
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=cfg.milestones(),
                                                gamma=cfg.lr_factor)


def epoch_learning_rates(cfg):
    """Learning rate used in every epoch of a schedule."""
    optimizer = make_optimizer([torch.zeros(1, requires_grad=True)], cfg)
    scheduler = make_scheduler(optimizer, cfg)
    rates = []
    for _ in range(cfg.epochs):
        rates.append(optimizer.param_groups[0]['lr'])
        optimizer.step()
        scheduler.step()
    return rates


@torch.no_grad()
def evaluate_split(model, dataset, weights, batch_size=6, num_workers=0):
    """
    Top-1 / Top-5 of the fused logits over a (test-pipeline) dataset.

    :return: dict with top1, top5 and the fused scores tensor (N, K)
    """
    if len(dataset) == 0:
        return {'top1': float('nan'), 'top5': float('nan'), 'scores': None}
    model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=num_workers)
    scores, labels = [], []
    for inputs, targets in loader:
        scores.append(fuse_logits(model(inputs), weights, model.modalities))
        labels.append(targets)
    scores = torch.cat(scores).numpy()
    labels = torch.cat(labels).numpy()
    top1, top5 = topk_accuracy(scores, labels, ks=(1, 5))
    return {'top1': top1, 'top5': top5, 'scores': scores}


def train(model, train_set, val_set, cfg, out_dir, seed=0):
    """
    Train ``model`` and checkpoint it every epoch.

    Batch normalization runs in training mode over the whole mini-batch
    (B * M * S frames); gradients are clipped by global norm before each step
    and the learning rate follows step decay.

    :param model: TsmModel
    :param train_set: MultimodalDataset (training pipeline)
    :param val_set: MultimodalDataset (test pipeline), may be empty
    :param cfg: TrainConfig
    :param out_dir: run directory; writes ckpt/epoch_<n>.bin, ckpt/scores.json, report.jsonl
    :param seed: used when ``cfg.seed`` is None
    :return: (TrainReport, CheckpointSet)
    """
    seed = cfg.seed if cfg.seed is not None else seed
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / 'ckpt'
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / 'report.jsonl'
    if report_path.exists():
        report_path.unlink()
    if len(train_set) == 0:
        raise TrainingError('training split is empty')

    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    optimizer = make_optimizer(model.parameters(), cfg)
    scheduler = make_scheduler(optimizer, cfg)
    report = TrainReport()
    checkpoints = CheckpointSet([])
    LOGGER.info('training %d epochs on %d clips (%d val), batch %d, lr %g, milestones %s',
                cfg.epochs, len(train_set), len(val_set), cfg.batch_size, cfg.lr, cfg.milestones())

    for epoch in range(1, cfg.epochs + 1):
        started = time.time()
        lr = optimizer.param_groups[0]['lr']
        train_set.set_epoch(epoch)
        loader = DataLoader(train_set, batch_size=cfg.batch_size, shuffle=True,
                            num_workers=cfg.num_workers,
                            generator=torch.Generator().manual_seed(seed * 100003 + epoch))
        model.train()
        loss_sum, correct, seen = 0.0, 0, 0
        step_losses = []
        progress = tqdm(loader, desc='epoch {}/{}'.format(epoch, cfg.epochs), leave=False, disable=None)
        for step, (inputs, labels) in enumerate(progress, 1):
            optimizer.zero_grad()
            logits = model(inputs)
            batch_loss = fusion_loss(logits, labels, cfg.fusion, model.modalities)
            if not torch.isfinite(batch_loss):
                raise TrainingError('non-finite loss {} at epoch {} step {}'
                                    .format(float(batch_loss), epoch, step))
            batch_loss.backward()
            grad_clip([p.grad for p in model.parameters()], cfg.clip_grad)
            optimizer.step()

            batch = labels.shape[0]
            loss_sum += float(batch_loss) * batch
            step_losses.append(float(batch_loss))
            seen += batch
            with torch.no_grad():
                predicted = fuse_logits(logits, cfg.fusion, model.modalities).argmax(dim=1)
            correct += int((predicted == labels).sum())
            LOGGER.debug('epoch %d step %d loss %.5f', epoch, step, float(batch_loss))
        scheduler.step()

        train_top1 = correct / seen
        val = evaluate_split(model, val_set, cfg.fusion, cfg.batch_size, cfg.num_workers)
        score = val['top1'] if len(val_set) else train_top1

        checkpoint = None
        if cfg.save_every_epoch or epoch == cfg.epochs:
            path = save_checkpoint(model, ckpt_dir / 'epoch_{}.bin'.format(epoch),
                                   score=score, epoch=epoch)
            checkpoint = str(path.relative_to(out_dir))
            checkpoints.entries.append(CheckpointEntry(path=path, score=score, epoch=epoch,
                                                       config_hash=model.cfg.digest()))
            checkpoints.write(ckpt_dir / SCORES_FILE, relative_to=out_dir)

        record = EpochRecord(epoch=epoch, train_loss=loss_sum / seen, train_top1=train_top1,
                             val_top1=val['top1'], val_top5=val['top5'], lr=lr,
                             checkpoint=checkpoint, seconds=time.time() - started,
                             step_losses=step_losses)
        report.records.append(record)
        reports.append_jsonl(asdict(record), report_path)
        LOGGER.info('epoch %d/%d loss %.4f train top1 %.3f val top1 %.3f top5 %.3f lr %g (%.1fs)',
                    epoch, cfg.epochs, record.train_loss, train_top1, val['top1'], val['top5'],
                    lr, record.seconds)

    report.write(out_dir)
    return report, checkpoints
