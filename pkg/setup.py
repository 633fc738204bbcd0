"""
conda create -n fedtsad python=3.9
conda activate fedtsad
pip install -e .
"""
from setuptools import find_packages, setup

import pathlib

# The directory containing this file
HERE = pathlib.Path(__file__).parent

# The text of the README file
README = (HERE / "README.md").read_text()

setup(
    name='fedtsad-bench',
    version='0.1.0',
    description='Federated time-series anomaly detection benchmark harness in PyTorch',
    long_description=README,
    long_description_content_type="text/markdown",
    python_requires='>=3.9.0',
    license='MIT',

    packages=find_packages(exclude=('tests', 'sanity_checks')),

    install_requires=['torch>=1.10.0',
                      'tqdm',
                      'numpy',
                      'pandas',
                      'scikit-learn',
                      'PyYAML',
                      'matplotlib',
                      ],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['fedtsad=fedtsad.__main__:main']},
)
