# develop: python setup.py develop
# install: python setup.py install
from setuptools import setup, find_packages

setup(
    name="flex_scheduling",
    version="1.0",
    packages=find_packages(),
    package_data={"flex_scheduling": ["examples/*.csv", "examples/*.ini"]},
    install_requires=["numpy", "scipy", "pandas", "osqp"],
    entry_points={
        "console_scripts": [
            "flex_scheduling=flex_scheduling.entrypoint:main",
            "schedule-da=flex_scheduling.cli.schedule_da:main",
            "run-rt=flex_scheduling.cli.run_rt:main",
            "report=flex_scheduling.cli.report:main",
            "simulate=flex_scheduling.cli.simulate:main",
        ]
    },
)
