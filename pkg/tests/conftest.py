import pytest

from unlearnlab import corpus as C
from unlearnlab import model as M

SMALL = M.ModelConfig(num_layers=2, d_model=32, num_heads=2, d_ff=64, vocab_size=80, max_seq_len=12, init_seed=0)


@pytest.fixture(scope="session")
def tiny_world():
    """A 40-fact corpus memorized by a 2-layer model."""
    splits = C.generate(0, 20, 2, fractions=(0.1, 0.2, 0.5), vocab_limit=80)
    pairs = [f.pair(t) for f in splits.all_facts() for t in (0, 1)]
    res = M.pretrain(M.ModelSnapshot.initial(SMALL), pairs, M.PretrainSettings(max_steps=600, eval_every=50, min_steps=300))
    assert res.accuracy == 1.0
    return res.snapshot, splits
