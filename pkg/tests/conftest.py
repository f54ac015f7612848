import pytest

from bilinear_mediation.simulation import ConditionSpec, run_condition

# Monte Carlo runs shared by several test modules; each is computed once.
MAIN_CONDITION = ConditionSpec(model=1, n=500, J=10, knots=(4.5, 4.5), theta=1.0,
                               scenario="medium", reps=200, base_seed=20240)
NULL_CONDITION = ConditionSpec(model=1, n=500, J=6, knots=(2.5, 2.5), theta=1.0,
                               scenario="zero", r2_xy=0.0, immediate=0.0, delayed=0.0,
                               reps=200, base_seed=31337)
HARD_CONDITION = ConditionSpec(model=1, n=200, J=6, knots=(2.5, 2.5), theta=2.0,
                               scenario="medium", reps=100, base_seed=4242)


@pytest.fixture(scope="session")
def main_condition_result():
    return run_condition(MAIN_CONDITION)


@pytest.fixture(scope="session")
def null_condition_result():
    return run_condition(NULL_CONDITION)


@pytest.fixture(scope="session")
def hard_condition_result():
    return run_condition(HARD_CONDITION)
