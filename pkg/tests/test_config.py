import pytest

from stkron.config import ExperimentConfig
from stkron.errors import BadInputError


def test_text_round_trip():
    cfg = ExperimentConfig(block_grid=(4, 4), tie=(2, 2), crop=(0, 8, 1, 9), shifts=[(1, 0), (0, -1)],
                           halo=None, estimator="dc-kron", leave_out=False, ridge=0.1)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_parse_aliases_comments_and_case():
    cfg = ExperimentConfig.from_text("# demo\nestimator = KRON\nlambda = 0.2  # sparsity\n"
                                     "tie_groups = 2x2\nblock_grid = 4x4\n\n")
    assert cfg.estimator == "kron" and cfg.lam == 0.2 and cfg.tie == (2, 2)


@pytest.mark.parametrize("text", [
    "estimator = nope", "rank = 0", "bogus = 1", "no equals sign", "leave_out = maybe",
    "block_grid = 3x3\ntie = 2x2", "model_frames = 30", "crop = 1,2",
])
def test_bad_config_raises(text):
    with pytest.raises(BadInputError):
        ExperimentConfig.from_text(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(BadInputError):
        ExperimentConfig.load(tmp_path / "missing.cfg")


def test_replace_validates():
    cfg = ExperimentConfig()
    assert cfg.replace(rank=2).rank == 2
    with pytest.raises(BadInputError):
        cfg.replace(shrinkage=2.0)
