from setuptools import setup, find_packages


setup(
    name='vrkf',
    version="0.1.0",
    description='Robust and adaptive Kalman filters with Student-t style channel losses, plus a Monte Carlo benchmark.',
    long_description="Fixed-point robust Kalman filtering with adaptive channel scales and the experiments that "
                     "compare it against the Kalman filter and variational filters.",
    license='MIT',
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10'
    ],
    keywords='kalman filter robust estimation student-t monte-carlo',
    packages=find_packages(exclude=['contrib', 'docs', 'tests']),
    package_data={'vrkf': ['data/panels/*.json']},
    include_package_data=True,
    python_requires='>=3.8',
    install_requires=['tqdm', 'numpy', 'h5py', 'scipy', 'pandas>=1.5'],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['vrkf=vrkf.cli:main']},
)
