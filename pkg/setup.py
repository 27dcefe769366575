from setuptools import setup, find_packages

setup(
    name="stability_pruner",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "networkx>=2.8.0",
        "numpy>=1.21.0",
        "tqdm>=4.64.0",
    ],
    entry_points={
        "console_scripts": [
            "stab-prune=stability_pruner.cli:main"
        ]
    },
    description="Stability-based structured filter pruning for small CNNs, with FLOPS and memory cost analysis",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    license="MIT",
    python_requires=">=3.8",
)
