"""Smoke test for the Python bindings.

Build and install first, e.g. `pip install ./crates/py` or
`maturin develop -m crates/py/Cargo.toml`, then run this file.
"""

import csv
import math
import os
import random
import tempfile

import trits


def check_wavelets():
    rng = random.Random(0)
    x = [rng.uniform(-1, 1) for _ in range(96)]
    for name in ("haar", "db2"):
        coeffs = trits.wavedec(x, name, 3)
        assert len(coeffs) == 4
        back = trits.waverec(coeffs, name, len(x))
        assert max(abs(a - b) for a, b in zip(x, back)) < 1e-10, name


def check_period_and_trend():
    x = [math.sin(2 * math.pi * t / 24) for t in range(240)]
    assert trits.detect_period(x) == 24
    trend = trits.ema_trend([1.0, 0.0, 0.0], 0.5)
    assert trend == [1.0, 0.5, 0.25]
    ramp = [0.1 * t for t in range(300)]
    assert abs(trits.season_trend_ratio([ramp], 25)) < 1e-9


def check_config():
    cfg = trits.Config()
    cfg.set("model.horizon", "24")
    assert cfg.get("model.horizon") == "24"
    again = trits.Config(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    try:
        cfg.set("freq.wavlet", "db2")
    except ValueError as e:
        assert "freq.wavelet" in str(e)
    else:
        raise AssertionError("unknown key accepted")


def tiny_config():
    cfg = trits.Config()
    for key, value in {
        "model.lookback": "48",
        "model.horizon": "12",
        "freq.levels": "2",
        "freq.patch_len": "8",
        "freq.d_model": "8",
        "vision.period": "24",
        "vision.patch": "4",
        "vision.depth": "1",
        "vision.d_model": "8",
        "vision.d_state": "4",
        "fusion.hidden": "8",
        "trainer.batch_size": "32",
        "trainer.max_epochs": "2",
    }.items():
        cfg.set(key, value)
    return cfg


def check_model(tmp):
    cfg = tiny_config()
    model = trits.Model(cfg, 2)
    x = [[[math.sin(t / 4 + c) for c in range(2)] for t in range(48)] for _ in range(3)]
    y, gates = model.predict(x)
    assert (len(y), len(y[0]), len(y[0][0])) == (3, 12, 2)
    assert set(gates) == {"time", "freq", "vision"}
    total = sum(gates[m][0][0][0] for m in gates)
    assert abs(total - 1.0) < 1e-12

    path = os.path.join(tmp, "model.trts")
    model.save(path)
    back = trits.Model.load(cfg, 2, path)
    y2, _ = back.predict(x)
    assert y2 == y


def check_training(tmp):
    path = os.path.join(tmp, "sine.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["date", "a", "b"])
        for t in range(600):
            w.writerow([t, math.sin(2 * math.pi * t / 24) + 0.002 * t, math.cos(2 * math.pi * t / 24)])
    stats = trits.stats(path, lookback=48)
    assert stats["dim"] == 2 and stats["rows"] == 600
    model, info = trits.train(tiny_config(), path)
    assert len(info["history"]) == 2
    assert info["test_mse"] > 0.0
    assert model.num_parameters > 0


def main():
    check_wavelets()
    check_period_and_trend()
    check_config()
    with tempfile.TemporaryDirectory() as tmp:
        check_model(tmp)
        check_training(tmp)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
