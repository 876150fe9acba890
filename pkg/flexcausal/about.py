__package__ = 'flexcausal'
__author__ = 'flexcausal developers'
__version__ = '1.0.0.dev1'
__email__ = 'flexcausal-dev@users.noreply.github.com'
__description__ = 'Scalable Bayesian causal forests for longitudinal treatment-effect studies'
__url__ = 'https://github.com/flexcausal/flexcausal'
