import json
import pathlib

from setuptools import setup

# The directory containing this file
HERE = pathlib.Path(__file__).parent

with open(HERE / 'nextscale_seg' / 'package-info.json') as f:
    package = json.load(f)

package_name = package["name"].replace(" ", "_").replace("-", "_")

# The text of the README file
README = (HERE / "README.md").read_text()

setup(
    name=package["name"],
    version=package["version"],
    author=package['author'],
    packages=[package_name],
    include_package_data=True,
    package_data={package_name: ["package-info.json"]},
    license=package['license'],
    long_description=README,
    long_description_content_type="text/markdown",
    description=package.get('description', package_name),
    python_requires=">=3.9",
    install_requires=["torch>=2.0", "numpy", "scipy", "pydantic>=2", "pyyaml", "Pillow", "plotly", "tqdm",
                      "more_itertools", "Flask-Caching"],
    entry_points={"console_scripts": ["nextscale-seg=nextscale_seg.cli:main"]},
    classifiers=[
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
    ],
)
