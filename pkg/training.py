# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Desk-scale training, evaluation, branch ablation and kernel-size sweep."""

import collections
import csv
import dataclasses
import json
import logging
import math
import pathlib
import warnings
from typing import List, Optional, Tuple

import matplotlib

matplotlib.use('AGG')
import matplotlib.pyplot as plt
import torch

import backbones
import checkpoint
import complexity
import dataset
from common import AttentionType, ConfigurationError, NonFiniteLossError
from nn_ops import cross_entropy
from tensor_core import Tape, Tensor4, backward

METRICS_HEADER = ('epoch', 'train_loss', 'train_acc', 'eval_acc')
MOMENTUM_PREFIX = 'optimizer.momentum.'

MetricsRow = collections.namedtuple('MetricsRow', METRICS_HEADER)


def _reject_unknown(data, cls, what):
    unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
    if unknown:
        raise ConfigurationError('unknown %s keys: %s' % (what, ', '.join(unknown)))


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    """SGD with momentum; the rate decays at the given fractions of the run."""
    name: str = 'sgd-momentum'
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: Tuple[float, ...] = (0.5, 0.75)
    decay: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, 'milestones', tuple(float(m) for m in self.milestones))
        if self.name != 'sgd-momentum':
            raise ConfigurationError('unsupported optimizer %r (only sgd-momentum)' % (self.name,))
        if self.learning_rate < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigurationError('invalid optimizer settings: %r' % (self,))
        if any(not 0 < m <= 1 for m in self.milestones) or not 0 < self.decay <= 1:
            raise ConfigurationError('milestones must lie in (0, 1] and decay in (0, 1]')


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    kind: str = 'synthetic'
    path: Optional[str] = None
    classes: int = 2
    train_samples: int = 64
    eval_samples: int = 32
    noise: float = 0.0
    flip: bool = False

    def __post_init__(self):
        if self.kind not in ('synthetic', 'cifar10-binary'):
            raise ConfigurationError('dataset kind must be synthetic or cifar10-binary, got %r' % (self.kind,))
        if self.kind == 'cifar10-binary' and not self.path:
            raise ConfigurationError('cifar10-binary needs a path')


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    arch: backbones.ArchSpec
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    dataset: DatasetConfig = DatasetConfig()
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError('epochs must be positive, got %r' % (self.epochs,))
        if self.batch_size < 2:
            raise ConfigurationError('batch_size must be at least 2 for batch norm, got %r' % (self.batch_size,))
        if self.dataset.kind == 'synthetic' and self.dataset.classes != self.arch.num_classes:
            raise ConfigurationError('synthetic classes (%d) differ from num_classes (%d)'
                                     % (self.dataset.classes, self.arch.num_classes))

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(data, cls, 'training config')
        data = dict(data)
        if 'arch' not in data:
            raise ConfigurationError('training config needs an "arch"')
        data['arch'] = load_arch(data['arch'])
        if 'optimizer' in data:
            _reject_unknown(data['optimizer'], OptimizerConfig, 'optimizer')
            data['optimizer'] = OptimizerConfig(**data['optimizer'])
        if 'dataset' in data:
            _reject_unknown(data['dataset'], DatasetConfig, 'dataset')
            data['dataset'] = DatasetConfig(**data['dataset'])
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigurationError('cannot read %s: %s' % (path, e.strerror)) from None
        except ValueError as e:
            raise ConfigurationError('%s is not valid JSON: %s' % (path, e)) from None
        return cls.from_dict(data)

    def to_dict(self):
        data = dataclasses.asdict(self)
        data['arch'] = self.arch.to_dict()
        data['optimizer']['milestones'] = list(self.optimizer.milestones)
        return data

    def milestone_epochs(self):
        return sorted({max(1, int(round(m * self.epochs))) for m in self.optimizer.milestones})


def load_arch(value) -> backbones.ArchSpec:
    """An ArchSpec from an object, a JSON path or a preset name."""
    if isinstance(value, backbones.ArchSpec):
        return value
    if isinstance(value, dict):
        return backbones.ArchSpec.from_dict(value)
    if isinstance(value, str) and value in backbones.PRESETS:
        return backbones.PRESETS[value]()
    if isinstance(value, str):
        return backbones.ArchSpec.from_json(value)
    raise ConfigurationError('arch must be an object, a JSON path or one of %s' % ', '.join(backbones.PRESETS))


@dataclasses.dataclass
class TrainResult:
    net: backbones.Network
    metrics: List[MetricsRow]
    checkpoint_path: pathlib.Path


def load_datasets(cfg: TrainConfig):
    """Training and held-out splits matching the architecture input."""
    spec = cfg.dataset
    if spec.kind == 'synthetic':
        train_set = dataset.gen_synthetic(spec.classes, spec.train_samples, cfg.seed, spec.noise,
                                          cfg.arch.input_shape, noise_seed=cfg.seed + 1)
        eval_set = dataset.gen_synthetic(spec.classes, spec.eval_samples, cfg.seed, spec.noise,
                                         cfg.arch.input_shape, noise_seed=cfg.seed + 2)
    else:
        train_set, eval_set = dataset.load_cifar10_dir(spec.path)
        if eval_set is None:
            logging.warning('No test_batch.bin next to %s, evaluating on the training split', spec.path)
            eval_set = train_set
    if train_set.image_shape != cfg.arch.input_shape:
        raise ConfigurationError('images of shape %r do not fit input_shape %r'
                                 % (train_set.image_shape, cfg.arch.input_shape))
    return train_set, eval_set


def make_optimizer(net, cfg: TrainConfig):
    optimizer = torch.optim.SGD(net.parameters(), lr=cfg.optimizer.learning_rate,
                                momentum=cfg.optimizer.momentum, weight_decay=cfg.optimizer.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=cfg.milestone_epochs(),
                                                     gamma=cfg.optimizer.decay)
    return optimizer, scheduler


def _first_non_finite_gradient(net):
    for name, param in net.named_parameters():
        if param.grad is not None and not torch.isfinite(param.grad).all():
            return name
    return None


def train_epoch(net, optimizer, train_set, cfg: TrainConfig, epoch):
    """One pass over the shuffled training split; returns (mean loss, running accuracy)."""
    net.train()
    total_loss = 0.0
    correct = 0
    seen = 0
    for step, (images, labels) in enumerate(dataset.batches(train_set, cfg.batch_size, cfg.seed, epoch,
                                                            shuffle=True, flip=cfg.dataset.flip)):
        with Tape() as tape:
            logits = net(Tensor4(images))
            loss = cross_entropy(logits, labels)
            backward(loss)
        tape.write_parameter_grads(net)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError('loss %r at epoch %d step %d; first non-finite gradient: %s'
                                     % (value, epoch + 1, step, _first_non_finite_gradient(net)))
        optimizer.step()
        total_loss += value * len(labels)
        correct += int((logits.data.reshape(len(labels), -1).argmax(dim=1) == labels).sum())
        seen += len(labels)
    return total_loss / seen, correct / seen


def evaluate(net, handle, batch_size=64):
    """Top-1 accuracy in eval mode."""
    if len(handle) == 0:
        return 0.0
    net.eval()
    correct = 0
    for images, labels in dataset.batches(handle, batch_size, shuffle=False):
        logits = net(Tensor4(images))
        correct += int((logits.data.reshape(len(labels), -1).argmax(dim=1) == labels).sum())
    return correct / len(handle)


def save_training_checkpoint(path, net, optimizer, cfg, epoch, metrics):
    names = {id(p): name for name, p in net.named_parameters()}
    momentum = collections.OrderedDict()
    for group in optimizer.param_groups:
        for param in group['params']:
            state = optimizer.state.get(param, {})
            if state.get('momentum_buffer') is not None:
                momentum[MOMENTUM_PREFIX + names[id(param)]] = state['momentum_buffer']
    meta = {'epoch': epoch, 'seed': cfg.seed, 'arch': cfg.arch.to_dict(),
            'metrics': [list(row) for row in metrics]}
    checkpoint.save_parameters(net, path, meta=meta, extra=momentum)


def restore_training_checkpoint(path, net, optimizer, scheduler):
    """Loads weights, statistics and momentum; returns (completed epochs, metrics)."""
    meta, extra = checkpoint.load_parameters(net, path)
    params = dict(net.named_parameters())
    for name, value in extra.items():
        if not name.startswith(MOMENTUM_PREFIX):
            continue
        param = params.get(name[len(MOMENTUM_PREFIX):])
        if param is None:
            raise ConfigurationError('%s: momentum for unknown parameter %s' % (path, name))
        optimizer.state[param]['momentum_buffer'] = value.clone()
    epoch = int(meta.get('epoch', 0))
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        for _ in range(epoch):
            scheduler.step()
    metrics = [MetricsRow(int(r[0]), *(float(v) for v in r[1:])) for r in meta.get('metrics', [])]
    return epoch, metrics


def write_metrics(path, metrics):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for row in metrics:
            writer.writerow(row)


def plot_losses(metrics, path):
    fig = plt.figure(figsize=(12.8, 7.2), constrained_layout=True)
    loss_ax = fig.add_subplot(1, 2, 1)
    acc_ax = fig.add_subplot(1, 2, 2)
    epochs = [row.epoch for row in metrics]
    loss_ax.set_title('Train Loss')
    loss_ax.set_xlabel('Epoch')
    loss_ax.set_ylabel('Loss')
    loss_ax.plot(epochs, [row.train_loss for row in metrics])
    acc_ax.set_title('Accuracy')
    acc_ax.set_xlabel('Epoch')
    acc_ax.set_ylabel('Top-1')
    acc_ax.plot(epochs, [row.train_acc for row in metrics], label='train')
    acc_ax.plot(epochs, [row.eval_acc for row in metrics], label='eval')
    acc_ax.legend()
    fig.savefig(path)
    plt.close(fig)


def log_recipe(cfg: TrainConfig):
    opt = cfg.optimizer
    logging.info('Recipe: %s lr=%g momentum=%g weight_decay=%g decay x%g at epochs %s, %d epochs, batch %d, seed %d',
                 opt.name, opt.learning_rate, opt.momentum, opt.weight_decay, opt.decay,
                 cfg.milestone_epochs(), cfg.epochs, cfg.batch_size, cfg.seed)


def train(cfg: TrainConfig, out_dir, stop_after=None) -> TrainResult:
    """Trains from scratch, or from `cfg.checkpoint` when set.

    Writes log/metrics.csv, log/config.json, log/Train_Loss.png and
    checkpoint/model.bin under `out_dir`. `stop_after` ends the run early after
    that many completed epochs, leaving a resumable checkpoint.
    """
    out_dir = pathlib.Path(out_dir)
    log_dir = out_dir / 'log'
    checkpoint_path = out_dir / 'checkpoint' / 'model.bin'
    log_dir.mkdir(parents=True, exist_ok=True)
    with open(log_dir / 'config.json', 'w') as f:
        json.dump(cfg.to_dict(), f, indent=2)
    log_recipe(cfg)

    train_set, eval_set = load_datasets(cfg)
    net = backbones.build(cfg.arch, seed=cfg.seed)
    optimizer, scheduler = make_optimizer(net, cfg)
    start_epoch, metrics = 0, []
    if cfg.checkpoint:
        start_epoch, metrics = restore_training_checkpoint(cfg.checkpoint, net, optimizer, scheduler)
        logging.info('Resumed from %s after epoch %d', cfg.checkpoint, start_epoch)

    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start_epoch, end_epoch):
        train_loss, train_acc = train_epoch(net, optimizer, train_set, cfg, epoch)
        scheduler.step()
        eval_acc = evaluate(net, eval_set, cfg.batch_size)
        metrics.append(MetricsRow(epoch + 1, train_loss, train_acc, eval_acc))
        logging.info('Epoch %d/%d train_loss %.6f train_acc %.4f eval_acc %.4f',
                     epoch + 1, cfg.epochs, train_loss, train_acc, eval_acc)
        save_training_checkpoint(checkpoint_path, net, optimizer, cfg, epoch + 1, metrics)
        write_metrics(log_dir / 'metrics.csv', metrics)

    write_metrics(log_dir / 'metrics.csv', metrics)
    if metrics:
        plot_losses(metrics, log_dir / 'Train_Loss.png')
    return TrainResult(net, metrics, checkpoint_path)


def evaluate_checkpoint(cfg: TrainConfig, path):
    _, eval_set = load_datasets(cfg)
    net = backbones.build(cfg.arch, seed=cfg.seed)
    checkpoint.load_parameters(net, path)
    return evaluate(net, eval_set, cfg.batch_size)


VariantRow = collections.namedtuple(
    'VariantRow', ['variant', 'gates', 'params', 'attention_params', 'macs', 'best_train_acc',
                   'final_train_acc', 'eval_acc'])


def ablation_variants(k=7):
    return [
        ('baseline', {'type': 'none'}),
        ('channel-off', {'type': 'triplet', 'k': k, 'branch_channel_enabled': False}),
        ('spatial-off', {'type': 'triplet', 'k': k, 'branch_spatial_enabled': False}),
        ('full', {'type': 'triplet', 'k': k}),
    ]


def _run_variant(cfg, name, attention_value, out_dir):
    variant_cfg = dataclasses.replace(cfg, arch=cfg.arch.with_attention(attention_value), checkpoint=None)
    logging.info('Variant %s: attention %s', name, variant_cfg.arch.attention.to_value())
    result = train(variant_cfg, pathlib.Path(out_dir) / name)
    net = result.net
    report = complexity.exact_count(net)
    attention = variant_cfg.arch.attention
    gates = attention.triplet_config().gate_count if attention.type == AttentionType.TRIPLET else 0
    return VariantRow(variant=name,
                      gates=gates,
                      params=sum(p.numel() for p in net.parameters()),
                      attention_params=report.totals['exact_params_with_bn'],
                      macs=report.network['total_macs'],
                      best_train_acc=max(row.train_acc for row in result.metrics),
                      final_train_acc=result.metrics[-1].train_acc,
                      eval_acc=result.metrics[-1].eval_acc)


def write_variant_table(rows, out_dir, name):
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / (name + '.csv'), 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(VariantRow._fields)
        for row in rows:
            writer.writerow(row)
    text = variant_text(rows)
    (out_dir / (name + '.txt')).write_text(text)
    return text


def variant_text(rows):
    lines = ['%-12s %5s %10s %10s %12s %10s %10s %9s' % ('variant', 'gates', 'params', 'attn', 'macs',
                                                        'best_train', 'last_train', 'eval')]
    for r in rows:
        lines.append('%-12s %5d %10d %10d %12d %10.4f %10.4f %9.4f' % (r.variant, r.gates, r.params,
                                                                      r.attention_params, r.macs,
                                                                      r.best_train_acc, r.final_train_acc,
                                                                      r.eval_acc))
    return '\n'.join(lines) + '\n'


def ablate(cfg: TrainConfig, out_dir):
    """Baseline and three triplet branch variants under one seed and schedule."""
    k = cfg.arch.attention.k
    rows = [_run_variant(cfg, name, value, out_dir) for name, value in ablation_variants(k)]
    logging.info('\n%s', write_variant_table(rows, out_dir, 'ablation'))
    return rows


def sweep(cfg: TrainConfig, out_dir, kernel_sizes=(3, 5, 7)):
    """Full triplet attention trained once per gate kernel size."""
    rows = [_run_variant(cfg, 'k%d' % k, {'type': 'triplet', 'k': k}, out_dir) for k in kernel_sizes]
    logging.info('\n%s', write_variant_table(rows, out_dir, 'sweep'))
    return rows
