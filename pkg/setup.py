from setuptools import setup

setup(
    name="manet-ids",
    version="0.1.0",
    py_modules=[
        'cli',
        'config',
        'crypto_primitives',
        'esom_detector',
        'gka_protocol',
        'key_tree',
        'manet_sim',
        'response_engine',
        'security_suite',
        'utils',
    ],
    include_package_data=True,
    install_requires=[
        'cryptography>=42.0.0',
        'networkx>=3.2',
        'numpy>=1.26.2',
        'pandas>=2.1.3',
        'psutil>=5.9.6',
        'python-dotenv>=1.0.0',
    ],
    extras_require={
        'test': ['pytest>=8.0'],
    },
    entry_points={
        'console_scripts': [
            'manet-ids=cli:main',
        ],
    },
    python_requires='>=3.10',
)
