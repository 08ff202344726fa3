import pytest

from mpquant.model import ModelConfig, TransformerModel, gen_classification, train
from mpquant.rng import Rng


@pytest.fixture(scope="session")
def desk_trained():
    """Lightly trained 4-layer desk classifier shared by analysis tests."""
    train_ds = gen_classification(Rng(7).spawn(1), 512, seq_len=16, vocab_size=16,
                                  batch_size=32)
    eval_ds = gen_classification(Rng(7).spawn(2), 128, seq_len=16, vocab_size=16,
                                 batch_size=32)
    cfg = ModelConfig(4, 32, 4, 64, 16, 16, task="classification", n_classes=2)
    model = TransformerModel.init(cfg, Rng(7).spawn(4))
    train(model, train_ds, epochs=8, lr=0.01, rng=Rng(7).spawn(104))
    return model, eval_ds


@pytest.fixture()
def param_snapshot():
    """Byte snapshot helper for purity assertions."""
    def snap(model):
        return {k: v.tobytes() for k, v in model.params.items()}
    return snap
