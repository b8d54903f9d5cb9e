#!/usr/bin/env python

import setuptools
from pkg_resources import parse_requirements

with open("requirements.txt", "r") as req_file:
    requirements = req_file.readlines()
    requirements = parse_requirements(requirements)


setuptools.setup(
    name="refseg",
    version="1.0",
    packages=setuptools.find_packages(exclude=["tests"]),
    license="BSD 3-Clause License",
    description=(
        "Reference-guided segmentation assistant and semi-supervised trainer"
    ),
    install_requires=[str(r) for r in requirements],
    scripts=[
        "bin/refseg",
    ],
)
