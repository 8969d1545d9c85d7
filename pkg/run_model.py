# Lint as: python3
# pylint: disable=g-bad-file-header
# ============================================================================
"""Runs training, evaluation, ablations, gradient checks, reports and Grad-CAM.

Usage: python run_model.py <subcommand> [--flags]

Subcommands: train, eval, ablate, sweep, gradcheck, report, gradcam.
"""
import dataclasses
import datetime
import json
import logging
import pathlib
import time
from typing import Optional, Tuple

from absl import app
from absl import flags

import backbones
import checkpoint
import complexity
import explain
import gradcheck
import training
from common import AttentionLibError, ConfigurationError, ExitCode
from tensor_core import Tensor4

COMMANDS = ('train', 'eval', 'ablate', 'sweep', 'gradcheck', 'report', 'gradcam')

FLAGS = flags.FLAGS
# global configuration
flags.DEFINE_integer('seed', None, 'Seed overriding the one in --config (gradcheck defaults to 0)')
flags.DEFINE_string('config', None, 'Path to a TrainConfig JSON file')
flags.DEFINE_string('out', 'output', 'Output directory for logs, checkpoints and reports')

# report configuration
flags.DEFINE_string('spec', None, 'Path to an ArchSpec JSON file')
flags.DEFINE_enum('preset', 'resnet50', list(backbones.PRESETS), 'Architecture preset used when --spec is not set')
flags.DEFINE_string('attention', None, 'Attention override: a type name or a JSON object')

# gradient check configuration
flags.DEFINE_multi_enum('scope', list(gradcheck.SCOPES), list(gradcheck.SCOPES), 'Gradient check suites to run')
flags.DEFINE_integer('instances', 20, 'Random instances per gradient check case')

# training configuration
flags.DEFINE_integer('epochs', None, 'Epoch count overriding the one in --config')
flags.DEFINE_string('resume', None, 'Checkpoint to continue training from')
flags.DEFINE_list('kernel_sizes', ['3', '5', '7'], 'Gate kernel sizes for the sweep')

# explanation configuration
flags.DEFINE_string('checkpoint', None, 'Trained weights (defaults to <out>/checkpoint/model.bin)')
flags.DEFINE_integer('class_index', None, 'Target class (defaults to the top-1 prediction)')
flags.DEFINE_string('layer', None, 'Layer to explain (defaults to the last block)')
flags.DEFINE_integer('image_index', 0, 'Held-out sample to explain')


@dataclasses.dataclass(frozen=True)
class RunOptions:
    command: str
    out: str = 'output'
    seed: Optional[int] = None
    config: Optional[str] = None
    spec: Optional[str] = None
    preset: str = 'resnet50'
    attention: Optional[str] = None
    scopes: Tuple[str, ...] = gradcheck.SCOPES
    instances: int = 20
    epochs: Optional[int] = None
    resume: Optional[str] = None
    kernel_sizes: Tuple[int, ...] = (3, 5, 7)
    checkpoint: Optional[str] = None
    class_index: Optional[int] = None
    layer: Optional[str] = None
    image_index: int = 0


def options_from_flags(command):
    try:
        kernel_sizes = tuple(int(k) for k in FLAGS.kernel_sizes)
    except ValueError:
        raise app.UsageError('--kernel_sizes must be integers, got %s' % FLAGS.kernel_sizes) from None
    return RunOptions(command=command, out=FLAGS.out, seed=FLAGS.seed, config=FLAGS.config, spec=FLAGS.spec,
                      preset=FLAGS.preset, attention=FLAGS.attention, scopes=tuple(FLAGS.scope),
                      instances=FLAGS.instances, epochs=FLAGS.epochs, resume=FLAGS.resume,
                      kernel_sizes=kernel_sizes, checkpoint=FLAGS.checkpoint, class_index=FLAGS.class_index,
                      layer=FLAGS.layer, image_index=FLAGS.image_index)


def logger_setup(log_path):
    """File handler at `log_path` plus console output on the root logger."""
    root_logger = logging.getLogger()
    root_logger.setLevel(logging.INFO)
    for handler in list(root_logger.handlers):
        if isinstance(handler, logging.FileHandler):
            root_logger.removeHandler(handler)
            handler.close()
    pathlib.Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    formatter = logging.Formatter(fmt='%(asctime)s - %(message)s')
    file_log_handler = logging.FileHandler(filename=log_path, mode='w', encoding='utf-8')
    file_log_handler.setFormatter(formatter)
    root_logger.addHandler(file_log_handler)
    if not any(type(h) is logging.StreamHandler for h in root_logger.handlers):
        console_output_handler = logging.StreamHandler()
        console_output_handler.setFormatter(formatter)
        root_logger.addHandler(console_output_handler)
    return root_logger


def log_run_summary(root_logger, options, arch=None):
    root_logger.info("")
    root_logger.info("=======================Run Summary=======================")
    root_logger.info("Subcommand is " + options.command)
    if arch is not None:
        root_logger.info("Architecture is " + arch.block_type.value + " with stages "
                         + str([[s.channels, s.block_count, s.stride] for s in arch.stage_channels]))
        root_logger.info("Attention is " + json.dumps(arch.attention.to_value()))
    if options.seed is not None:
        root_logger.info("Seed is " + str(options.seed))
    root_logger.info("Run output directory is " + str(options.out))
    root_logger.info("=========================================================")
    root_logger.info("")


def parse_attention(value):
    value = value.strip()
    if value.startswith('{'):
        try:
            return json.loads(value)
        except ValueError as e:
            raise ConfigurationError('--attention is not valid JSON: %s' % e) from None
    return value


def load_train_config(options) -> training.TrainConfig:
    if not options.config:
        raise app.UsageError('%s needs --config' % options.command)
    cfg = training.TrainConfig.from_json(options.config)
    overrides = {}
    if options.seed is not None:
        overrides['seed'] = options.seed
    if options.epochs is not None:
        overrides['epochs'] = options.epochs
    if options.resume is not None:
        overrides['checkpoint'] = options.resume
    if options.attention is not None:
        overrides['arch'] = cfg.arch.with_attention(parse_attention(options.attention))
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def load_report_arch(options) -> backbones.ArchSpec:
    arch = training.load_arch(options.spec if options.spec else options.preset)
    if options.attention is not None:
        arch = arch.with_attention(parse_attention(options.attention))
    return arch


def weights_path(options):
    return options.checkpoint or str(pathlib.Path(options.out) / 'checkpoint' / 'model.bin')


def run_train(options):
    cfg = load_train_config(options)
    log_run_summary(logging.getLogger(), options, cfg.arch)
    result = training.train(cfg, options.out)
    logging.info("Finished training, checkpoint in %s", result.checkpoint_path)
    return ExitCode.SUCCESS


def run_eval(options):
    cfg = load_train_config(options)
    log_run_summary(logging.getLogger(), options, cfg.arch)
    path = weights_path(options)
    accuracy = training.evaluate_checkpoint(cfg, path)
    out = pathlib.Path(options.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / 'eval.json', 'w') as f:
        json.dump({'checkpoint': path, 'eval_acc': accuracy}, f, indent=2, sort_keys=True)
    logging.info("Held-out top-1 accuracy of %s is %.4f", path, accuracy)
    return ExitCode.SUCCESS


def run_ablate(options):
    cfg = load_train_config(options)
    log_run_summary(logging.getLogger(), options, cfg.arch)
    training.ablate(cfg, options.out)
    return ExitCode.SUCCESS


def run_sweep(options):
    cfg = load_train_config(options)
    log_run_summary(logging.getLogger(), options, cfg.arch)
    training.sweep(cfg, options.out, options.kernel_sizes)
    return ExitCode.SUCCESS


def run_gradcheck(options):
    log_run_summary(logging.getLogger(), options)
    seed = 0 if options.seed is None else options.seed
    results = gradcheck.run(options.scopes, options.instances, seed)
    text = gradcheck.report_text(results)
    out = pathlib.Path(options.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / 'gradcheck.txt').write_text(text)
    logging.info('\n%s', text)
    gradcheck.verify(results)
    return ExitCode.SUCCESS


def run_report(options):
    arch = load_report_arch(options)
    log_run_summary(logging.getLogger(), options, arch)
    net = backbones.build(arch, materialize=False)
    report = complexity.exact_count(net)
    text = report.to_text() + '\n' + complexity.overhead_text(complexity.overhead_table(arch.attention.r))
    out = pathlib.Path(options.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / 'report.json').write_text(report.to_json() + '\n')
    (out / 'report.txt').write_text(text)
    logging.info('\n%s', text)
    return ExitCode.SUCCESS


def run_gradcam(options):
    cfg = load_train_config(options)
    log_run_summary(logging.getLogger(), options, cfg.arch)
    _, eval_set = training.load_datasets(cfg)
    if not 0 <= options.image_index < len(eval_set):
        raise ConfigurationError('--image_index %d outside the %d held-out samples'
                                 % (options.image_index, len(eval_set)))
    net = backbones.build(cfg.arch, seed=cfg.seed)
    checkpoint.load_parameters(net, weights_path(options))
    image = eval_set.images[options.image_index:options.image_index + 1]
    heatmap = explain.gradcam(net, Tensor4(eval_set.normalize(image)), options.class_index, options.layer)
    out = pathlib.Path(options.out)
    out.mkdir(parents=True, exist_ok=True)
    explain.emit_image(heatmap, out / 'gradcam.pgm')
    gray = image[0].mean(dim=0).numpy()
    explain.emit_image(heatmap, out / 'gradcam_overlay.ppm', overlay_with=gray)
    logging.info("Wrote Grad-CAM of sample %d (label %d, class %d) at %s",
                 options.image_index, int(eval_set.labels[options.image_index]), heatmap.class_index,
                 heatmap.source_layer)
    return ExitCode.SUCCESS


RUNNERS = {
    'train': run_train,
    'eval': run_eval,
    'ablate': run_ablate,
    'sweep': run_sweep,
    'gradcheck': run_gradcheck,
    'report': run_report,
    'gradcam': run_gradcam,
}


def execute(options: RunOptions) -> int:
    """Runs one subcommand; library errors become their exit codes."""
    root_logger = logger_setup(str(pathlib.Path(options.out) / 'log' / 'log.log'))
    start_time = time.time()
    root_logger.info("Program started at time " + datetime.datetime.fromtimestamp(start_time).strftime('%c'))
    try:
        code = int(RUNNERS[options.command](options))
    except AttentionLibError as e:
        logging.error("%s: %s", type(e).__name__, e)
        code = int(e.exit_code)
    except app.UsageError as e:
        logging.error("Usage error: %s", e)
        code = int(ExitCode.USAGE)
    except OSError as e:
        logging.error("Cannot access %s: %s", e.filename, e.strerror)
        code = int(ExitCode.USAGE)
    end_time = time.time()
    root_logger.info("Program ended at time " + datetime.datetime.fromtimestamp(end_time).strftime('%c'))
    log_run_summary(root_logger, options)
    root_logger.info("Run total elapsed time " + str(datetime.timedelta(seconds=end_time - start_time))
                     + " with exit code " + str(code) + "\n")
    return code


def main(argv):
    if len(argv) != 2 or argv[1] not in COMMANDS:
        raise app.UsageError('expected exactly one subcommand out of: %s' % ', '.join(COMMANDS))
    return execute(options_from_flags(argv[1]))


if __name__ == '__main__':
    app.run(main)
