import numpy as np
import pytest
from hypothesis import settings

from mixopt.dataset import MixComposition
from mixopt.gp import KernelHyperparams

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


MIXES_CSV = """mix_id,kind,cement,fly_ash_c,fly_ash_f,slag,water,fine_agg,coarse_agg,hrwr,curing_temp,phase
M1,mortar,900,0,100,0,450,1400,0,5,22,I
C1,concrete,500,100,0,150,300,1300,1700,2.5,22,II
C2,concrete,450,0,120,180,330,1250,1750,0,22,III
"""

STRENGTHS_CSV = """mix_id,age_days,mean_ksi,std_ksi,n
M1,1,2.1,0.1,3
M1,28,9.5,0.3,3
C1,1,1.5,0.05,3
C1,3,3.25,0.1,3
C1,28,7.125,0.2,3
C2,28,6.5,0.25,3
"""


@pytest.fixture
def concrete_mix():
    return MixComposition(
        cement=500, fly_ash_c=100, fly_ash_f=0, slag=150, water=300,
        fine_agg=1300, coarse_agg=1700, hrwr=2.5, curing_temp=22, kind="concrete",
    )


def random_hyper(rng, dim=11, noise=True):
    return KernelHyperparams(
        alpha=float(rng.uniform(0.2, 3.0)),
        beta=float(rng.uniform(0.2, 3.0)),
        ell_time=float(rng.uniform(0.3, 3.0)),
        ell_joint=rng.uniform(0.3, 3.0, size=dim),
        noise_var=float(rng.uniform(0.01, 0.5)) if noise else 0.0,
        mean_const=float(rng.normal()),
    )


def random_problem(rng, n, dim=11):
    X = rng.uniform(0, 1, size=(n, dim))
    y = np.sin(3 * X[:, 0]) + X[:, -1] + 0.1 * rng.normal(size=n)
    return X, y


# acceptance criterion number -> (status, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
