"""The following test cases verify the feature [Command line](../reqs/reqs.md#11-feature-command-line) described in
the requirements.

The test cases do not need any prior condition before being executed, unless explicitly stated otherwise.
"""
import json
import logging

import pandas as pd
import pytest

import flexcausal as fc
import helpers
from flexcausal.__main__ import parse_parameters


def setup_module():
    fc.set_logging_level(logging.CRITICAL)


def teardown_module():
    pass


def write_config(folder, document):
    path = folder / 'run.json'
    path.write_text(json.dumps(document))
    return str(path)


def data_arguments(simulated):
    replication = simulated / 'rep_000'
    return ['--data', str(replication / 'panel.csv'), '--schema', str(replication / 'panel.schema.json')]


@pytest.fixture(scope='module')
def chain(tmp_path_factory):
    """Runs simulate, ps, fit and predict once; returns the folders and exit codes."""
    root = tmp_path_factory.mktemp('chain')
    config = write_config(root, helpers.tiny_run_config())
    folders = {name: root / name for name in ('simulate', 'ps', 'fit', 'predict')}
    codes = {
        'simulate': parse_parameters(['simulate', '--config', config, '--out', str(folders['simulate'])]),
    }
    data = data_arguments(folders['simulate'])
    codes['ps'] = parse_parameters(['ps', '--config', config, *data, '--out', str(folders['ps'])])
    codes['fit'] = parse_parameters(['fit', '--config', config, *data, '--ps', str(folders['ps'] / 'ps.csv'),
                                     '--out', str(folders['fit'])])
    codes['predict'] = parse_parameters(['predict', '--config', config, *data, '--archive', str(folders['fit']),
                                         '--out', str(folders['predict'])])
    return root, config, folders, codes


def test__command_chain_qkit(chain):
    """**Description**: Chains the simulate, ps, fit and predict commands

    **Requirements tested**:

    - [31001](../reqs/reqs.md#req-id-31001) Chained subcommands
    - [31003](../reqs/reqs.md#req-id-31003) Effective configuration

    **Actions to be performed**:

    - Simulate a category 3 panel, fit its propensity model and both forests, then summarize the estimands

    **Evaluation criteria**:

    - Check every command exits with 0 and writes its files and the effective configuration
    - Check one propensity estimate per practice inside the clip bounds and the ATT listed first
    """
    _, _, folders, codes = chain

    assert codes == {'simulate': 0, 'ps': 0, 'fit': 0, 'predict': 0}
    for name in ('panel.csv', 'panel.schema.json', 'truth.json'):
        assert (folders['simulate'] / 'rep_000' / name).exists()
    assert (folders['ps'] / 'propensity_model.json').exists()
    assert (folders['fit'] / 'archive.json').exists()
    for folder in folders.values():
        assert (folder / 'effective_config.json').exists()

    ps = pd.read_csv(folders['ps'] / 'ps.csv', dtype={'practice_id': str})
    assert len(ps) == helpers.SMALL_DGP['practices']
    assert ps['ps'].between(0.01, 0.99).all()

    estimates = json.loads((folders['predict'] / 'estimates.json').read_text())
    assert estimates[0]['estimand'] == 'ATT'
    assert estimates[0]['years'] == [3, 4]
    assert all(item['draws'] == 10 and item['lower'] <= item['upper'] for item in estimates)


def test__effective_config_qkit(chain):
    """**Description**: Echoes the configuration actually used

    **Requirements tested**:

    - [31003](../reqs/reqs.md#req-id-31003) Effective configuration

    **Evaluation criteria**:

    - Check the echoed configuration loads back to the input configuration
    """
    _, config, folders, _ = chain

    assert fc.RunConfig.load(folders['fit'] / 'effective_config.json') == fc.RunConfig.load(config)


def test__predict_idempotent_qkit(chain):
    """**Description**: Summarizes the same archive twice

    **Requirements tested**:

    - [31001](../reqs/reqs.md#req-id-31001) Chained subcommands

    **Evaluation criteria**:

    - Check both estimate files are byte-identical
    """
    root, config, folders, _ = chain
    again = root / 'predict_again'

    code = parse_parameters(['predict', '--config', config, *data_arguments(folders['simulate']),
                             '--archive', str(folders['fit']), '--out', str(again)])

    assert code == 0
    assert (again / 'estimates.json').read_bytes() == (folders['predict'] / 'estimates.json').read_bytes()


def test__seed_argument_qkit(tmp_path):
    """**Description**: Simulates with a seed given on the command line

    **Requirements tested**:

    - [31003](../reqs/reqs.md#req-id-31003) Effective configuration

    **Evaluation criteria**:

    - Check the echoed configuration carries the seed and another seed gives another panel
    """
    config = write_config(tmp_path, helpers.tiny_run_config())

    for seed in (5, 6):
        assert parse_parameters(['simulate', '--config', config, '--seed', str(seed),
                                 '--out', str(tmp_path / str(seed))]) == 0

    echoed = fc.RunConfig.load(tmp_path / '5' / 'effective_config.json')
    assert (echoed.study.seed, echoed.sampler.seed) == (5, 5)
    first = (tmp_path / '5' / 'rep_000' / 'panel.csv').read_bytes()
    assert first != (tmp_path / '6' / 'rep_000' / 'panel.csv').read_bytes()


def test__exit_codes_qkit(tmp_path, chain, capsys):
    """**Description**: Maps failures to exit codes

    **Requirements tested**:

    - [31002](../reqs/reqs.md#req-id-31002) Exit codes

    **Actions to be performed**:

    - Omit a required argument, pass an unknown configuration key, a malformed panel and a missing panel file,
      then ask for the version

    **Evaluation criteria**:

    - Check the exit codes 1, 1, 3, 2 and 0 and the error category printed for the failures
    """
    _, config, folders, _ = chain
    schema = str(folders['simulate'] / 'rep_000' / 'panel.schema.json')
    panel = pd.read_csv(folders['simulate'] / 'rep_000' / 'panel.csv')
    panel.drop(columns='X1').to_csv(tmp_path / 'broken.csv', index=False)

    with pytest.raises(SystemExit) as error:
        parse_parameters(['ps', '--config', config, '--out', str(tmp_path / 'ps')])
    assert error.value.code == 1

    unknown = write_config(tmp_path, helpers.tiny_run_config(sampler={'burnin': 10}))
    assert parse_parameters(['simulate', '--config', unknown, '--out', str(tmp_path / 'simulate')]) == 1
    assert 'error: usage' in capsys.readouterr().err

    assert parse_parameters(['ps', '--config', config, '--data', str(tmp_path / 'broken.csv'), '--schema', schema,
                             '--out', str(tmp_path / 'ps')]) == 3
    assert 'error: parse' in capsys.readouterr().err

    assert parse_parameters(['ps', '--config', config, '--data', str(tmp_path / 'missing.csv'), '--schema', schema,
                             '--out', str(tmp_path / 'ps')]) == 2
    assert 'error: io' in capsys.readouterr().err

    assert parse_parameters(['--version']) == 0
    assert fc.__version__ in capsys.readouterr().out


def test__malformed_propensity_file_qkit(tmp_path, chain, capsys):
    """**Description**: Runs the fit command on a propensity file without its estimates

    **Requirements tested**:

    - [31002](../reqs/reqs.md#req-id-31002) Exit codes

    **Initial conditions**:

    - A ps.csv file holding the practice ids only

    **Evaluation criteria**:

    - Check the command exits with the parse code and a one-line message naming the missing column
    """
    _, config, folders, _ = chain
    ps = pd.read_csv(folders['ps'] / 'ps.csv', dtype={'practice_id': str})
    ps[['practice_id']].to_csv(tmp_path / 'ps.csv', index=False)

    code = parse_parameters(['fit', '--config', config, *data_arguments(folders['simulate']),
                             '--ps', str(tmp_path / 'ps.csv'), '--out', str(tmp_path / 'fit')])

    assert code == 3
    error = capsys.readouterr().err
    assert error.startswith('error: parse:')
    assert "missing column(s) ps" in error
    assert 'Traceback' not in error


def test__evaluate_command_qkit(tmp_path):
    """**Description**: Runs a small simulation study from the command line

    **Requirements tested**:

    - [31001](../reqs/reqs.md#req-id-31001) Chained subcommands
    - [29004](../reqs/reqs.md#req-id-29004) Cache and report files

    **Evaluation criteria**:

    - Check the command exits with 0 and writes the CSV and JSON reports, records, failures and plot data files
    """
    config = write_config(tmp_path, helpers.tiny_run_config())

    code = parse_parameters(['evaluate', '--config', config, '--plot-data', '--out', str(tmp_path / 'study')])

    assert code == 0
    for name in ('report.csv', 'report.json', 'records.csv', 'failures.csv', 'plot_data.csv',
                 'effective_config.json'):
        assert (tmp_path / 'study' / name).exists()
    records = pd.read_csv(tmp_path / 'study' / 'records.csv')
    assert set(records['method']) == {'LASSO(S)'}
    assert sorted(records['rep'].unique()) == [0, 1]
