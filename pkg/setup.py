"""install task superposition"""
from setuptools import setup, find_packages

setup(
    name='task_superposition',
    version='0.1.0',
    packages=find_packages(exclude=['tests', 'tests.*']),
    python_requires='>=3.10',
    install_requires=[
        'numpy', 'scipy', 'cerberus', 'pydantic', 'quart', 'quart-schema[pydantic]',
        'httpx', 'peewee', 'tqdm', 'tomli; python_version < "3.11"',
    ],
    entry_points={'console_scripts': ['task-superposition = task_superposition.cli:main']},
)
