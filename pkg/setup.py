from setuptools import find_packages, setup

setup(
    name="w2c_pipeline",
    version="0.1.0",
    description="Consistency-filtered region annotation pipeline with code-format output",
    packages=find_packages(include=["w2c_pipeline*"]),
    package_data={"w2c_pipeline": ["data/*.tsv"]},
    python_requires=">=3.10",
    install_requires=[
        "structlog>=23.0.0",
        "httpx>=0.24.0",
        "cachetools>=5.3.0",
        "tenacity>=8.2.0",
        "pillow>=10.0.0",
        "aiosqlite>=0.19.0",
        "sqlalchemy>=2.0.0",
        "click>=8.1.0",
        "rich>=13.0.0",
        "pydantic>=2.0.0",
        "pydantic-settings>=2.0.0",
    ],
    entry_points={"console_scripts": ["w2c=w2c_pipeline.cli:main"]},
)
