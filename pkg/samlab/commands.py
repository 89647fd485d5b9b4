"""
Command handlers. Every handler takes the parsed arguments and the lab
settings and returns an exit code; failures are mapped by exit_code_guard.

Artifacts land in the output directory as `<command>-<run_id>.csv`, plus
`checkpoint-<run_id>.bin` from train and `report-<run_id>.pdf` from report.
"""
import argparse
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone

import numpy as np

from samlab.config import config_digest, load_experiment_config
from samlab.decorators.failures import exit_code_guard
from samlab.errors import ArgumentError, ConfigError
from samlab.utils.data_utils import (
    gen_gaussian_task,
    load_char_corpus,
    load_checkpoint,
    load_mnist,
    metrics_path,
    metrics_sink,
    restore_params,
    save_checkpoint,
    shift_dataset,
    split_tail,
)
from samlab.utils.grouping_utils import build_partition
from samlab.utils.landscape_utils import ATTACK_COLUMNS, attack_sweep, corruption_attack, fisher_spectrum
from samlab.utils.model_utils import build_mlp, build_rnn_lm, model_from_descriptor
from samlab.utils.optim_utils import build_optimizer
from samlab.utils.report_utils import generate_run_report
from samlab.utils.sam_utils import SamConfig, parse_norm
from samlab.utils.shift_utils import (
    CURVE_COLUMNS,
    SUMMARY_COLUMNS,
    TRIAL_COLUMNS,
    FinetuneConfig,
    MixSpec,
    curve_correlation,
    exact_minimizer,
    finetune,
    interpolation_curve,
    mix_datasets,
    random_quadratic_problem,
    run_quadratic_trials,
    run_shift_trials,
)
from samlab.utils.train_utils import metric_columns, train

DEFAULT_PRESETS = ["baseline", "sam", "asam", "layer-sam", "multistep-defense", "ga-sam"]
SPECTRUM_COLUMNS = ["rank", "eigenvalue", "sample_count", "trace", "method"]
STRENGTH_COLUMNS = ["group", "strength"]
COMPARE_COLUMNS = ["preset", "seed", "metric_name", "test_metric", "top_eigenvalue", "attack_loss_increase"]
COMPARE_SUMMARY_COLUMNS = ["preset", "seeds", "metric_name", "test_metric", "top_eigenvalue",
                           "attack_loss_increase"]


# --------------------------------------------------------------
# Shared plumbing
# --------------------------------------------------------------

def _timestamp():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def load_config(args, settings=None):
    cfg = load_experiment_config(args.config, settings)
    return cfg.with_overrides(seed=args.seed, directory=args.out, run_id=args.run_id)


def output_dir(cfg, settings):
    directory = cfg.output.directory or settings.output_dir
    os.makedirs(directory, exist_ok=True)
    return directory


def checkpoint_path(directory, run_id):
    return os.path.join(directory, f"checkpoint-{run_id}.bin")


def open_sink(directory, command, run_id, columns):
    """Each command run starts its CSV afresh; run_id leads and timestamp trails every row."""
    path = metrics_path(directory, command, run_id)
    if os.path.exists(path):
        os.remove(path)
    logging.info(f"Writing {path}")
    return metrics_sink(path, ["run_id"] + list(columns) + ["timestamp"])


def stamp(row, run_id):
    return {"run_id": run_id, **row, "timestamp": _timestamp()}


def build_datasets(cfg, settings):
    data = cfg.data
    if data.source == "gaussian":
        train_set, test_set = gen_gaussian_task(data.classes, data.dim, data.per_class, data.shift, data.seed,
                                                data.separation)
    elif data.source == "mnist":
        train_set, test_set = load_mnist(data.path or os.path.join(settings.data_dir, "mnist"), data.limit)
    elif data.source == "char":
        corpus = load_char_corpus(data.path or os.path.join(settings.data_dir, "corpus.txt"), data.window)
        if data.limit:
            corpus = corpus.subset(np.arange(min(data.limit, len(corpus))))
        train_set, test_set = split_tail(corpus, data.test_fraction)
    else:
        raise ConfigError("quadratic problems only drive shift-trial and interp-curve", key="data.source")
    if data.mix > 0:
        train_set = mix_datasets(MixSpec(data.mix, train_set, test_set), data.seed)
    return train_set, test_set


def shifted_split(cfg, test_set):
    data = cfg.data
    if data.source == "mnist":
        return shift_dataset(test_set, data.intensity_bias, data.label_noise, data.seed)
    if data.source == "gaussian":
        return test_set
    raise ConfigError(f"no shifted split for source '{data.source}'", key="data.source")


def build_model(cfg, train_set):
    model = cfg.model
    if model.kind == "mlp":
        if train_set.kind != "classification":
            raise ConfigError(f"mlp needs classification data, source gives {train_set.kind}", key="model.kind")
        if model.sizes[0] != train_set.features.shape[1] or model.sizes[-1] != train_set.num_classes:
            raise ConfigError(f"sizes {list(model.sizes)} do not fit {train_set.features.shape[1]} features and "
                              f"{train_set.num_classes} classes", key="model.sizes")
        return build_mlp(model.sizes, model.seed, model.activation)
    if train_set.kind != "sequence":
        raise ConfigError(f"rnn needs sequence data, source gives {train_set.kind}", key="model.kind")
    return build_rnn_lm(train_set.num_classes, model.embed, model.hidden, model.tied, model.seed)


def run_training(cfg, settings, model, train_set, eval_set, sam=None, seed=None, on_epoch=None):
    opt = cfg.optimizer
    optimizer = build_optimizer(opt.name, opt.lr, opt.clip)
    return train(model, train_set, optimizer, sam or cfg.sam, opt.epochs,
                 seed=cfg.model.seed if seed is None else seed, batch_size=opt.batch_size, eval_set=eval_set,
                 lr_decay=opt.lr_decay, decay_every=opt.decay_every, on_epoch=on_epoch, debug=settings.debug)


def load_trained(args, cfg, directory):
    path = args.checkpoint or checkpoint_path(directory, cfg.output.run_id)
    checkpoint = load_checkpoint(path)
    model = model_from_descriptor(checkpoint.descriptor["model"], checkpoint.descriptor.get("seed", 0))
    return model, restore_params(model, checkpoint)


def _jobs(args, settings):
    return args.jobs or settings.jobs


def _finetune_config(cfg):
    trial = cfg.trial
    return FinetuneConfig(trial.finetune_epochs, trial.finetune_lr, trial.finetune_tol, trial.patience)


def _shift_pool(cfg, settings):
    """Training pool D and shifted pool D* of equal size for mixing."""
    train_set, test_set = build_datasets(cfg, settings)
    shifted = shifted_split(cfg, test_set)
    size = min(len(train_set), len(shifted))
    return train_set.subset(np.arange(size)), shifted


def _train_minimum(cfg, settings, pool):
    model = build_model(cfg, pool)
    base = cfg.optimizer.epochs if cfg.trial.base_epochs is None else cfg.trial.base_epochs
    optimizer = build_optimizer(cfg.optimizer.name, cfg.optimizer.lr, cfg.optimizer.clip)
    theta, _ = train(model, pool, optimizer, SamConfig(), base, seed=cfg.model.seed,
                     batch_size=cfg.optimizer.batch_size, lr_decay=cfg.optimizer.lr_decay,
                     decay_every=cfg.optimizer.decay_every, debug=settings.debug)
    return model, theta


# --------------------------------------------------------------
# Commands
# --------------------------------------------------------------

@exit_code_guard
def cmd_train(args, settings):
    cfg = load_config(args, settings)
    train_set, test_set = build_datasets(cfg, settings)
    model = build_model(cfg, train_set)
    if args.dry_run:
        logging.info(f"Config {cfg.path or 'defaults'} is valid (digest {config_digest(cfg)[:12]})")
        return 0

    directory = output_dir(cfg, settings)
    run_id = cfg.output.run_id
    with open_sink(directory, "train", run_id, metric_columns(model.layout)) as sink:
        params, metrics = run_training(cfg, settings, model, train_set, test_set,
                                       on_epoch=lambda m: sink.write(stamp(m.row(), run_id)))
    save_checkpoint(checkpoint_path(directory, run_id), params, model.descriptor(), cfg.model.seed,
                    config_digest(cfg))
    logging.info(f"Training finished after {metrics.passes} forward/backward passes")
    return 0


@exit_code_guard
def cmd_attack(args, settings):
    cfg = load_config(args, settings)
    p = parse_norm(args.p) if args.p else cfg.eval.p
    epsilons = args.epsilon or list(cfg.eval.epsilons)
    steps = args.steps or cfg.eval.steps
    train_set, test_set = build_datasets(cfg, settings)
    directory = output_dir(cfg, settings)
    model, params = load_trained(args, cfg, directory)
    if args.dry_run:
        logging.info(f"Attack config valid: {len(epsilons)} budgets, {steps} steps")
        return 0

    data = test_set if (args.split or cfg.eval.split) == "test" else train_set
    reports = attack_sweep(model, params, data, p, epsilons, steps)
    with open_sink(directory, "attack", cfg.output.run_id, ATTACK_COLUMNS) as sink:
        for report in reports:
            sink.write(stamp(report.row(), cfg.output.run_id))
    return 0


@exit_code_guard
def cmd_spectrum(args, settings):
    cfg = load_config(args, settings)
    k = args.k or cfg.eval.k
    samples = args.samples or cfg.eval.samples
    train_set, test_set = build_datasets(cfg, settings)
    directory = output_dir(cfg, settings)
    model, params = load_trained(args, cfg, directory)
    if args.dry_run:
        logging.info(f"Spectrum config valid: k={k}, samples={samples}")
        return 0

    data = test_set if (args.split or cfg.eval.split) == "test" else train_set
    partition = build_partition(model.layout, cfg.sam.granularity)
    report = fisher_spectrum(model, params, data, k, samples, cfg.model.seed, partition)
    run_id = cfg.output.run_id
    with open_sink(directory, "spectrum", run_id, SPECTRUM_COLUMNS) as sink:
        for row in report.rows():
            row.update(sample_count=report.sample_count, trace=report.trace, method=report.method)
            sink.write(stamp(row, run_id))
    with open_sink(directory, "strengths", run_id, STRENGTH_COLUMNS) as sink:
        for group, strength in report.strengths.items():
            sink.write(stamp({"group": group, "strength": strength}, run_id))
    return 0


@exit_code_guard
def cmd_shift_trial(args, settings):
    cfg = load_config(args, settings)
    fractions = list(cfg.trial.etas)
    if cfg.data.source == "quadratic":
        problem = random_quadratic_problem(cfg.data.instances, cfg.data.dim, cfg.data.shift_scale,
                                           cfg.data.shared_hessian, cfg.data.seed)
        if args.dry_run:
            logging.info(f"Shift-trial config valid: {len(fractions)} quadratic trials")
            return 0
        summary = run_quadratic_trials(problem, fractions)
    else:
        pool, shifted = _shift_pool(cfg, settings)
        build_model(cfg, pool)
        if args.dry_run:
            logging.info(f"Shift-trial config valid: {len(fractions)} trials over {len(pool)} instances")
            return 0
        model, theta = _train_minimum(cfg, settings, pool)
        summary = run_shift_trials(model, theta, pool, shifted, fractions, _finetune_config(cfg), cfg.model.seed,
                                   _jobs(args, settings))

    directory = output_dir(cfg, settings)
    run_id = cfg.output.run_id
    with open_sink(directory, "shift-trial", run_id, TRIAL_COLUMNS) as sink:
        for record in summary.records:
            sink.write(stamp(record.row(), run_id))
    with open_sink(directory, "shift-trial-summary", run_id, SUMMARY_COLUMNS) as sink:
        sink.write(stamp(summary.summary_row(), run_id))
    return 0


@exit_code_guard
def cmd_interp_curve(args, settings):
    cfg = load_config(args, settings)
    if cfg.data.source == "quadratic":
        problem = random_quadratic_problem(cfg.data.instances, cfg.data.dim, cfg.data.shift_scale,
                                           cfg.data.shared_hessian, cfg.data.seed)
        if args.dry_run:
            logging.info("Interp-curve config valid (quadratic)")
            return 0
        model, train_data, test_data = problem.model, problem.base, problem.shifted
        theta = exact_minimizer(problem, problem.base)
        theta_star = exact_minimizer(problem, problem.shifted)
    else:
        train_data, test_data = _shift_pool(cfg, settings)
        build_model(cfg, train_data)
        if args.dry_run:
            logging.info("Interp-curve config valid")
            return 0
        model, theta = _train_minimum(cfg, settings, train_data)
        theta_star = finetune(model, theta, test_data, _finetune_config(cfg), cfg.model.seed).params

    points = interpolation_curve(model, theta, theta_star, train_data, test_data, cfg.trial.alphas)
    try:
        logging.info(f"Shifted-train vs test correlation over [0, 1]: {curve_correlation(points):.6f}")
    except ArgumentError:
        logging.warning("Too few alpha points in [0, 1] to correlate the curves")

    directory = output_dir(cfg, settings)
    with open_sink(directory, "interp-curve", cfg.output.run_id, CURVE_COLUMNS) as sink:
        for point in points:
            sink.write(stamp(point.row(), cfg.output.run_id))
    return 0


def evaluate_preset(cfg, settings, preset, sam, seed, train_set, test_set):
    """Train one preset at one seed and measure test metric, top eigenvalue and attack loss increase."""
    eval_set = test_set if cfg.eval.split == "test" else train_set
    model = build_model(cfg.with_overrides(seed=seed), train_set)
    params, _ = run_training(cfg, settings, model, train_set, None, sam=sam, seed=seed)
    evaluation = model.evaluate(params, test_set)
    samples = min(cfg.eval.samples, len(eval_set))
    spectrum = fisher_spectrum(model, params, eval_set, min(cfg.eval.k, samples), samples, seed)
    attack = corruption_attack(model, params, eval_set, cfg.eval.p, cfg.eval.epsilons[0], cfg.eval.steps)
    logging.info(f"Preset {preset} seed {seed}: {evaluation.metric_name}={evaluation.metric:.6f} "
                 f"top_eigenvalue={spectrum.top:.6g} attack_increase={attack.loss_increase:.6g}")
    return {
        "preset": preset,
        "seed": seed,
        "metric_name": evaluation.metric_name,
        "test_metric": evaluation.metric,
        "top_eigenvalue": spectrum.top,
        "attack_loss_increase": attack.loss_increase,
    }


def summarize_comparison(rows, presets):
    summary = []
    for preset in presets:
        mine = [r for r in rows if r["preset"] == preset]
        if not mine:
            continue
        summary.append({
            "preset": preset,
            "seeds": len(mine),
            "metric_name": mine[0]["metric_name"],
            "test_metric": float(np.mean([r["test_metric"] for r in mine])),
            "top_eigenvalue": float(np.mean([r["top_eigenvalue"] for r in mine])),
            "attack_loss_increase": float(np.mean([r["attack_loss_increase"] for r in mine])),
        })
    return summary


@exit_code_guard
def cmd_compare(args, settings):
    cfg = load_config(args, settings)
    presets = args.presets or DEFAULT_PRESETS
    sams = {name: load_experiment_config(name, settings).sam for name in presets}
    train_set, test_set = build_datasets(cfg, settings)
    build_model(cfg, train_set)
    seeds = [cfg.model.seed + i for i in range(cfg.eval.seeds)]
    if args.dry_run:
        logging.info(f"Compare config valid: {len(presets)} presets x {len(seeds)} seeds")
        return 0

    jobs = [(name, seed) for name in presets for seed in seeds]
    with ThreadPoolExecutor(max_workers=_jobs(args, settings)) as pool:
        rows = list(pool.map(lambda job: evaluate_preset(cfg, settings, job[0], sams[job[0]], job[1],
                                                         train_set, test_set), jobs))

    directory = output_dir(cfg, settings)
    run_id = cfg.output.run_id
    with open_sink(directory, "compare", run_id, COMPARE_COLUMNS) as sink:
        for row in rows:
            sink.write(stamp(row, run_id))
    with open_sink(directory, "compare-summary", run_id, COMPARE_SUMMARY_COLUMNS) as sink:
        for row in summarize_comparison(rows, presets):
            sink.write(stamp(row, run_id))
    return 0


@exit_code_guard
def cmd_report(args, settings):
    cfg = load_config(args, settings)
    if args.dry_run:
        logging.info("Report config valid")
        return 0
    directory = output_dir(cfg, settings)
    pdf_data = generate_run_report(directory, cfg.output.run_id, args.title)
    path = os.path.join(directory, f"report-{cfg.output.run_id}.pdf")
    with open(path, "wb") as f:
        f.write(pdf_data)
    logging.info(f"Wrote {path} ({len(pdf_data)} bytes)")
    return 0


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "spectrum": cmd_spectrum,
    "shift-trial": cmd_shift_trial,
    "interp-curve": cmd_interp_curve,
    "compare": cmd_compare,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file or preset name")
    common.add_argument("--seed", type=int, help="overrides model.seed")
    common.add_argument("--out", help="overrides output.directory")
    common.add_argument("--run-id", dest="run_id", help="overrides output.run_id")
    common.add_argument("--jobs", type=int, help="parallel trials or seeds")
    common.add_argument("--dry-run", dest="dry_run", action="store_true", help="validate and exit")

    parser = argparse.ArgumentParser(prog="samlab", description="Sharpness-aware minimization lab")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model and save a checkpoint")

    attack = sub.add_parser("attack", parents=[common], help="parameter corruption attack on a checkpoint")
    attack.add_argument("--checkpoint")
    attack.add_argument("--p", help="2 or inf")
    attack.add_argument("--epsilon", type=float, action="append", help="repeat for a sweep")
    attack.add_argument("--steps", type=int)
    attack.add_argument("--split", choices=["train", "test"])

    spectrum = sub.add_parser("spectrum", parents=[common], help="top Fisher eigenvalues of a checkpoint")
    spectrum.add_argument("--checkpoint")
    spectrum.add_argument("--k", type=int)
    spectrum.add_argument("--samples", type=int)
    spectrum.add_argument("--split", choices=["train", "test"])

    sub.add_parser("shift-trial", parents=[common], help="mix fraction vs parameter shift trials")
    sub.add_parser("interp-curve", parents=[common], help="losses along the segment between two minima")

    compare = sub.add_parser("compare", parents=[common], help="train presets over seeds and compare")
    compare.add_argument("--presets", nargs="+")

    report = sub.add_parser("report", parents=[common], help="render a run's CSV artifacts to PDF")
    report.add_argument("--title")
    return parser
