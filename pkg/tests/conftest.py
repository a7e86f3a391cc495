import numpy as np
import pytest

from streamcg.matrix_io import CsrMatrix


@pytest.fixture
def spd2():
    return CsrMatrix.from_dense(np.array([[4.0, 1.0], [1.0, 3.0]]))


SPD2_MTX = """%%MatrixMarket matrix coordinate real symmetric
% small SPD test matrix
2 2 3
1 1 4
2 1 1
2 2 3
"""


@pytest.fixture
def spd2_file(tmp_path):
    path = tmp_path / "spd2.mtx"
    path.write_text(SPD2_MTX)
    return path
