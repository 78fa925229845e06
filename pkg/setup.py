#!/usr/bin/env python

from setuptools import setup

setup(
    name="matcontext",
    description="Local material recognition in global context",
    version="0.1",
    packages=["matcontext"],
    package_data={"matcontext": ["data/*.json"]},
    python_requires=">=3.8",
    install_requires=["numpy>=1.20", "Pillow"],
    extras_require={"test": ["hypothesis"]},
    entry_points={"console_scripts": ["matcontext=matcontext.cli:main"]},
    license="GPLv3"
)
