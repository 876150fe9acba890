import os


def pytest_html_report_title(report):
    this_path = os.path.dirname(os.path.abspath(__file__))
    meta = {}
    with open(os.path.join(this_path, '../about.py')) as f:
        exec(f.read(), meta)

    report.title = f"flexcausal {meta['__version__']} Qualification Kit Results"


def pytest_configure(config):
    # pytest-metadata exposes the table only when installed
    if hasattr(config, '_metadata'):
        config._metadata['Computer'] = os.environ.get('COMPUTERNAME', os.environ.get('HOSTNAME', 'unknown'))
        config._metadata['User'] = os.environ.get('USERNAME', os.environ.get('USER', 'unknown'))
    config.addinivalue_line('markers', 'slow: long-running statistical acceptance studies')
