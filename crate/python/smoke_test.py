"""Smoke test for the nearnd Python bindings.

Build the extension and put it on the path first, e.g.

    cargo build -p nearnd-py --release
    cp target/release/libnearnd_py.so python/nearnd_py.so
    python3 python/smoke_test.py
"""

import pathlib
import sys
import tempfile

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent))

import nearnd_py as nd

CONFIG = """
name = "smoke"
seed = 1

[data]
normal_class = 0

[data.source]
kind = "toy-digits"
digits = [3, 8, 1]
per_class_train = 20
per_class_test = 8

[backbone]
width = 8
hidden = 16
depth = 2
embed_dim = 4

[generator]
width = 16
hidden = 32
depth = 1
max_steps = 20
batch_size = 8
probe_every = 10
probe_size = 16
band = [0.0, 1000.0]
sampler_steps = 5
num_samples = 20

[finetune]
learning_rate = 0.05
max_epochs = 1

[closeness]
max_epochs = 1
"""


def main():
    assert nd.auroc([0.1, 0.2], [0.3, 0.4]) == 1.0
    assert nd.auroc([1.0, 1.0], [1.0]) == 0.5
    assert abs(nd.rank_correlation([1, 2, 3, 4], [10, 20, 30, 40]) - 1.0) < 1e-12
    assert nd.bottom_i([0.9, 0.7, 0.8], 1) == 0.7
    fid = nd.frechet_distance([0.0, 0.0], [[1.0, 0.0], [0.0, 4.0]], [1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
    assert abs(fid - 2.0) < 1e-9, fid

    bank = nd.MemoryBank([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    assert len(bank) == 3 and bank.dim == 2 and nd.DEFAULT_K == 2
    (row, dist), = bank.nearest([0.9, 0.0], 1)
    assert row == 1 and abs(dist - 0.01) < 1e-12
    assert abs(bank.score([0.0, 0.0]) - 1.0) < 1e-12
    assert bank.score_many([[0.0, 0.0], [0.0, 2.0]], k=1) == [0.0, 0.0]
    try:
        bank.score([0.0, 0.0], k=7)
    except ValueError:
        pass
    else:
        raise AssertionError("k beyond the bank size must fail")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        bank.save(tmp / "m.ndmb")
        assert nd.MemoryBank.load(tmp / "m.ndmb").content_hash() == bank.content_hash()

        cfg = tmp / "exp.toml"
        cfg.write_text(CONFIG)
        p = nd.Pipeline(cfg, out=tmp / "run")
        assert p.gen_train()[0] == "ok"
        assert p.gen_sample()[0] == "ok"
        assert p.finetune()[0] == "ok"
        assert p.build_memory()[0] == "ok"
        status, message = p.eval()
        assert status == "ok", message
        assert (tmp / "run" / "reports" / "eval-near-nd.json").exists()
        status, _ = nd.Pipeline(cfg, out=tmp / "other", band=(0.0, 1e-9)).gen_train()
        assert status == "band_not_reached"
    print("python smoke test passed")


if __name__ == "__main__":
    main()
