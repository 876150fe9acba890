from setuptools import setup

meta = {}
with open('flexcausal/about.py') as f:
    exec(f.read(), meta)

long_description = open('README.md').read()

setup(
    name=meta['__package__'],
    version=meta['__version__'],
    description=meta['__description__'],
    url=meta['__url__'],
    author=meta['__author__'],
    author_email=meta['__email__'],
    license='MIT',
    platforms='any',
    long_description=long_description,
    long_description_content_type='text/markdown',
    include_package_data=True,
    packages=['flexcausal'],
    package_data={
        'flexcausal': [
            './tests/*.*',
            './reqs/*.*',
        ]
    },
    entry_points={
        'console_scripts': ['flexcausal=flexcausal.__main__:main'],
    },
    install_requires=[
        # 1st level dependencies
        'numpy>=1.22',
        'scipy>=1.8',
        'pandas>=1.4',
        'scikit-learn>=1.1',
        'joblib>=1.1',              # also required by scikit-learn
        'pytest>=7.1.1,<9',
        'pytest-html>=3.1.1,<4',
        'pytest-cov>=3.0',
        # 2nd level dependencies
        'py>=1.11.0',               # required by pytest-html
        'pytest-metadata>=2.0.1,<3',    # required by pytest-html
        'threadpoolctl>=2.0.0',     # required by scikit-learn
    ],
    python_requires='>=3.8',
)

print(f'\n==> Package {meta["__package__"]} {meta["__version__"]} generated successfully in ./dist folder')
