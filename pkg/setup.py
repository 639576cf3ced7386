from setuptools import setup, find_packages

setup(
    name="reduxion",
    version="0.1.0",
    packages=find_packages(include=["src", "src.*"]),
    install_requires=[
        "numpy",
        "pyyaml",
        "python-dotenv",
        "loguru",
        "networkx",
        "sympy",
        "einops",
    ],
    extras_require={
        "test": ["hypothesis", "pytest"],
    },
    entry_points={
        'console_scripts': [
            'reduxion=src.main:main',
        ],
    },
)
