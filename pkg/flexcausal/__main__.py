import argparse
import json
import os.path
import pathlib
import shutil
import sys

import numpy as np
import pandas as pd
import pytest

import flexcausal.about as about
from flexcausal.errors import EXIT_CODES, FlexCausalError, MalformedRow
from flexcausal.dgp import generate, write_replication
from flexcausal.estimands import estimate
from flexcausal.evaluation import run_study
from flexcausal.panel import CovariateSchema, analysis_frame, build_design, load_panel, propensity_features
from flexcausal.propensity import fit_propensity, predict_ps
from flexcausal.sampler import PosteriorArchive, fit
from flexcausal.settings import RunConfig


TESTS_FOLDER = 'tests'
HTML_RESULTS_FILENAME = 'results.html'
QKIT_RESULTS_FOLDER = 'qkit_results'
EFFECTIVE_CONFIG = 'effective_config.json'


def info_package():
    info = '\n'
    info += 'flexcausal package\n'
    info += '==================\n'
    info += f'Name: {about.__package__}\n'
    info += f'Version: {about.__version__}\n'
    info += f'Author: {about.__author__}\n'
    info += f'Email: {about.__email__}\n'
    info += f'Description: {about.__description__}\n'
    info += f'URL: {about.__url__}\n'
    print(info)


class UsageParser(argparse.ArgumentParser):
    """Argument parser exiting with the usage exit code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f'error: usage: {message}', file=sys.stderr)
        sys.exit(EXIT_CODES['usage'])


def build_parser():
    parser = UsageParser(
        prog=about.__package__,
        description=about.__description__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument('--version', help='prints library information', action='store_true')
    parser.add_argument('--test', help='runs self test', action='store_true')
    commands = parser.add_subparsers(dest='command')

    def add_command(name, help_text, data=False):
        command = commands.add_parser(name, help=help_text)
        command.add_argument('--config', help='JSON run configuration')
        command.add_argument('--seed', type=int, help='overrides every seed of the configuration')
        command.add_argument('--out', required=True, help='output directory')
        if data:
            command.add_argument('--data', required=True, help='panel CSV file')
            command.add_argument('--schema', required=True, help='covariate schema JSON file')
        return command

    simulate = add_command('simulate', 'generates synthetic panels and their truth files')
    simulate.add_argument('--category', type=int, choices=range(1, 6), help='evaluation category 1..5')

    ps = add_command('ps', 'fits the practice propensity model', data=True)
    ps.add_argument('--method', help='lasso or gbm, defaults to the configuration')

    fit_command = add_command('fit', 'runs the sampler and writes the posterior archive', data=True)
    fit_command.add_argument('--ps', required=True, help='ps.csv written by the ps command')
    fit_command.add_argument('--save-mu-forest', action='store_true', help='also archives the prognostic forest')

    predict = add_command('predict', 'summarizes the estimands from a posterior archive', data=True)
    predict.add_argument('--archive', required=True, help='archive directory written by the fit command')
    predict.add_argument('--workers', type=int, default=1, help='parallel processes')

    evaluate = add_command('evaluate', 'runs the simulation study')
    evaluate.add_argument('--workers', type=int, default=1, help='parallel processes')
    evaluate.add_argument('--plot-data', action='store_true', help='also writes plot_data.csv')
    evaluate.add_argument('--cache', help='directory of cached replication results, <out>/cache by default')
    return parser


def load_config(args):
    config = RunConfig.load(args.config).with_seed(args.seed)
    if getattr(args, 'save_mu_forest', False):
        config.sampler.save_mu_forest = True
    return config


def echo_config(config, out_dir):
    pathlib.Path(out_dir).mkdir(parents=True, exist_ok=True)
    config.save(os.path.join(out_dir, EFFECTIVE_CONFIG))


def load_data(args):
    return load_panel(args.data, CovariateSchema.load(args.schema))


def cmd_simulate(args, config):
    echo_config(config, args.out)
    for rep in range(config.dgp.replications):
        dataset, truth = generate(config.dgp.dgp_config(seed=config.study.seed, category=args.category), rep)
        write_replication(dataset, truth, os.path.join(args.out, f'rep_{rep:03d}'))
    print(f'==> {config.dgp.replications} replication(s) written to {args.out}')


def cmd_ps(args, config):
    echo_config(config, args.out)
    data = load_data(args)
    method = args.method or config.propensity.method
    features = propensity_features(data, config.sampler.max_cuts)
    model = fit_propensity(features, method, config.propensity, np.random.default_rng(config.sampler.seed))
    model.save(os.path.join(args.out, 'propensity_model.json'))
    table = pd.DataFrame({'practice_id': features.keys['practice_id'], 'ps': predict_ps(model, features)})
    table.to_csv(os.path.join(args.out, 'ps.csv'), index=False)
    print(f'==> Propensity estimates of {len(table)} practices written to {args.out}')


def load_ps_table(path):
    table = pd.read_csv(path, dtype={'practice_id': str})
    missing = [name for name in ('practice_id', 'ps') if name not in table.columns]
    if missing:
        raise MalformedRow(f'{path}: missing column(s) {", ".join(missing)}')
    return pd.Series(table['ps'].to_numpy(dtype=float), index=table['practice_id'].to_numpy())


def cmd_fit(args, config):
    echo_config(config, args.out)
    data = load_data(args)
    ps = load_ps_table(args.ps)
    level = config.sampler.level
    mu_design = build_design(data, 'mu', level, ps=ps, max_cuts=config.sampler.max_cuts)
    tau_design = build_design(data, 'tau', level, max_cuts=config.sampler.max_cuts)
    y = analysis_frame(data, level)['outcome'].to_numpy(dtype=float)
    fit(mu_design, tau_design, y, tau_design.zmask(), config.sampler_config(), out_dir=args.out,
        metadata={'level': level})
    print(f'==> Posterior archive written to {args.out}')


def cmd_predict(args, config):
    echo_config(config, args.out)
    data = load_data(args)
    archive = PosteriorArchive(args.archive)
    level = archive.metadata.get('level', config.sampler.level)
    tau_design = build_design(data, 'tau', level, max_cuts=config.sampler.max_cuts)
    request = config.estimands.request(data.schema)
    results = estimate(archive, tau_design, request, workers=args.workers)
    items = [summary.to_dict(label, request.years) for label, summary in results.items()]
    with open(os.path.join(args.out, 'estimates.json'), 'w', encoding='utf-8') as f:
        json.dump(items, f, indent=2)
    print(f'==> {len(items)} estimate(s) written to {args.out}')


def cmd_evaluate(args, config):
    echo_config(config, args.out)
    cache = args.cache or os.path.join(args.out, 'cache')
    report = run_study(settings=config, workers=args.workers, cache_dir=cache)
    report.save(args.out, plot_data=args.plot_data)
    print(f'==> Report of {len(report.records)} estimate(s), {len(report.failures)} failure(s) written to {args.out}')


COMMANDS = {
    'simulate': cmd_simulate,
    'ps': cmd_ps,
    'fit': cmd_fit,
    'predict': cmd_predict,
    'evaluate': cmd_evaluate,
}


def run_command(args):
    """Runs one subcommand and maps failures to the exit codes 1 (usage), 2 (io), 3 (parse) and 4 (numeric)."""
    try:
        config = load_config(args)
        COMMANDS[args.command](args, config)
    except FlexCausalError as error:
        print(f'error: {error.category}: {error}', file=sys.stderr)
        return error.exit_code
    except json.JSONDecodeError as error:
        print(f'error: parse: {error}', file=sys.stderr)
        return EXIT_CODES['parse']
    except OSError as error:
        print(f'error: io: {error}', file=sys.stderr)
        return EXIT_CODES['io']
    except (KeyError, ValueError, pd.errors.ParserError) as error:
        print(f'error: parse: {error}', file=sys.stderr)
        return EXIT_CODES['parse']
    except (FloatingPointError, np.linalg.LinAlgError) as error:
        print(f'error: numeric: {error}', file=sys.stderr)
        return EXIT_CODES['numeric']
    return 0


def parse_parameters(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.test:
        return run_tests()
    if args.version:
        info_package()
        return 0
    if args.command is None:
        parser.print_help()
        return EXIT_CODES['usage']
    return run_command(args)


def delete_folder(folder):
    if os.path.exists(folder):
        try:
            shutil.rmtree(folder)
            print(f'==> Deleted existing results folder {folder}\n')
        except OSError as error:
            print(f'Error deleting existing results folder {folder}')
            print(f'OS error: {error.strerror}')


def create_folder(folder_name):
    pathlib.Path(folder_name).mkdir(parents=True, exist_ok=True)


def run_tests():
    # get current path for this package
    dir_path = os.path.dirname(__file__)
    # build output folder path
    user_output_folder = os.path.abspath(f'./{QKIT_RESULTS_FOLDER}/{about.__package__}')
    # create output report folder
    delete_folder(user_output_folder)
    create_folder(user_output_folder)
    filepath_report = os.path.join(user_output_folder, HTML_RESULTS_FILENAME)
    ret_code = pytest.main([
        '-k qkit',
        '-W ignore::DeprecationWarning',
        f'--html={filepath_report}',
        os.path.join(dir_path, TESTS_FOLDER)
    ])

    if ret_code == pytest.ExitCode.OK:
        text = f'\n==> All tests passed OK. Results stored in folder {user_output_folder}\n'
    elif ret_code == pytest.ExitCode.TESTS_FAILED:
        text = f'\n==> Some test failed, see results stored in folder {user_output_folder}\n'
    else:
        text = f'\n==> Internal error {ret_code} when executing the tests\n'
    print(text)
    return int(ret_code)


def main():
    sys.exit(parse_parameters())


if __name__ == '__main__':
    main()
