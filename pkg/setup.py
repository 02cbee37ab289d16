#!/usr/bin/env python
# -*- coding: utf-8 -*-

from setuptools import setup

with open('README.rst') as readme_file:
    readme = readme_file.read()

with open('HISTORY.rst') as history_file:
    history = history_file.read()

requirements = [
    'torch>=1.13',
    'torchvision>=0.14',
    'numpy',
    'Pillow',
    'PyYAML',
    'matplotlib',
    'tqdm',
    'requests',
]

test_requirements = [
    'pytest',
]

setup(
    name='simple_mmar',
    version='0.1.0',
    description="Multimodal (RGB, thermal, depth) action recognition with temporal shift 2D-CNNs.",
    long_description=readme + '\n\n' + history,
    author="simple_mmar developers",
    packages=[
        'simple_mmar',
    ],
    package_dir={'simple_mmar':
                 'simple_mmar'},
    entry_points={
        'console_scripts': [
            'simple_mmar=simple_mmar.cli:main'
        ]
    },
    include_package_data=True,
    install_requires=requirements,
    license="MIT license",
    zip_safe=False,
    keywords='simple_mmar action-recognition temporal-shift multimodal',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Natural Language :: English',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
    python_requires='>=3.8',
    test_suite='tests',
    tests_require=test_requirements
)
