"""
Setup script for TRG Lab
"""

from setuptools import setup, find_packages
import os

# Sections of requirements.txt that only the test suite needs
TEST_SECTIONS = ('# Development', '# Test oracles')


# Read requirements
def read_requirements():
    runtime, test = [], []
    req_file = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'requirements.txt')
    if os.path.exists(req_file):
        target = runtime
        with open(req_file, 'r') as f:
            for line in f:
                line = line.strip()
                if line.startswith('#'):
                    target = test if line.startswith(TEST_SECTIONS) else runtime
                elif line:
                    target.append(line)
    return runtime, test


install_requires, test_requires = read_requirements()

setup(
    name="trg-lab",
    version="1.0.0",
    description="Temporal Reasoning Graph toolkit for order-sensitive clip classification",
    packages=find_packages(exclude=['tests', 'examples', 'examples.*']),
    py_modules=['main'],
    install_requires=install_requires,
    extras_require={
        'test': test_requires,
    },
    python_requires=">=3.8",
    include_package_data=True,
    package_data={
        '': ['*.txt', '*.md'],
    },
    entry_points={
        'console_scripts': [
            'trg-lab=main:run',
        ],
    },
)
