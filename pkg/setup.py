from setuptools import setup, find_packages

setup(
    name="sivi_sglmm",
    version="0.1.0",
    packages=find_packages(include=["backend", "backend.*"]),
    package_data={"backend.database": ["schema.sql"]},
    install_requires=[
        'numpy',
        'scipy',
        'pandas',
        'numba',
        'python-dotenv',
    ],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': ['sglmm=backend.app:main'],
    },
    python_requires='>=3.8',
)
