import pytest

from .gradient_suite import OPS, SHAPES_PER_OP, TOLERANCE, run_case


@pytest.mark.parametrize("op", OPS)
@pytest.mark.parametrize("shape_seed", range(SHAPES_PER_OP))
def test_finite_difference_float64(op, shape_seed):
    assert run_case(op, 7919 * shape_seed + len(op)) < TOLERANCE
