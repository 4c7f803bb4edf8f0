from setuptools import setup, find_packages

setup(name='simstore_orl', version='1.0', packages=find_packages(),
      install_requires=['numpy', 'torch', 'einops', 'torchtyping', 'scipy', 'pyyaml', 'pandas',
                        'gymnasium'],
      extras_require={'test': ['scikit-learn']},
      entry_points={'console_scripts': ['simstore-orl=simstore_orl.cli:main']})
