import os
from io import open

from setuptools import setup

from hapcac import __version__

with open("README.md") as readme_file:
    long_description = readme_file.read()

with open(os.path.join(os.path.dirname(__file__), "requirements.in")) as f:
    required = f.read().splitlines()

with open(os.path.join(os.path.dirname(__file__), "test_requirements.in")) as f:
    test_required = f.read().splitlines()

setup(
    name="hapcac",
    version=__version__,
    packages=["hapcac"],
    install_requires=required,
    tests_require=test_required,
    test_suite="nose.collector",
    include_package_data=True,
    python_requires=">=3.8",
    license="MIT License",
    description="Lossless point cloud attribute compression with learned context models",
    long_description=long_description,
    long_description_content_type="text/markdown",
    entry_points={
        "console_scripts": [
            "hapcac=hapcac.cli:handle",
        ]
    },
    classifiers=[
        "Environment :: Console",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Topic :: Multimedia :: Graphics :: 3D Modeling",
        "Topic :: System :: Archiving :: Compression",
    ],
)
