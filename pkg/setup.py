import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="petsr",
    version="0.0.1",
    description="Super-resolution workbench for PET images: phantoms, scan simulation, classical and CNN methods",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "click>=8.1",
        "matplotlib>=3.8",
        "numpy>=1.26,<2",
        "pandas>=2.1",
        "Pillow>=10.1",
        "scikit-learn>=1.3",
        "scipy>=1.11",
        "tenacity>=8.2",
    ],
    entry_points={
        "console_scripts": ["petsr=petsr.cli:main"],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent"
    ],
    python_requires='>=3.9',
)
