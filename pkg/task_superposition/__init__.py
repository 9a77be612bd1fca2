"""superposition of in-context tasks in small transformers: training, construction, probing and task vectors"""

__version__ = '0.1.0'
