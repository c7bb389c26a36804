try:
    from setuptools import setup
except ImportError:
    from distutils.core import setup


setup(
    name='pudesk',
    version='0.1',
    description='Geometry, losses and evaluation for a two-stage pressure '
                'ulcer detector, with a detection ingestion gateway.',
    license='BSD',
    platforms=['any'],
    packages=['pudesk'],
    python_requires='>=3.8',
    tests_require=[
        'pytest',
        'hypothesis',
    ],
    install_requires=[
        'setuptools >= 0.6b1',
        'numpy',
        'pandas >= 1.5',
        'simplejson',
        'flask',
        'matplotlib',
    ],
    entry_points={
        'console_scripts': ['pudesk = pudesk.cli:main'],
    },
    )
