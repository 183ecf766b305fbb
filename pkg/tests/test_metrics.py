import numpy as np
import pytest

from diffusec.channel import Classifier
from diffusec.errors import ConfigError, ShapeError
from diffusec.metrics import (BatchOutcome, RewardConfig, adv_rate, err_rate,
                              reward, ssim_avg)
from diffusec.nn import DenseLayer, DenseNet
from diffusec.tensor import make_rng, ssim

from _oracles import straightline_ssim

N_PIXELS = 16
N_CLASSES = 4
BUMP = 0.03


def readout_classifier():
    """Class = argmax of the first four pixels (ties to the lowest index)."""
    w = np.zeros((N_CLASSES, N_PIXELS), dtype=np.float32)
    w[:, :N_CLASSES] = np.eye(N_CLASSES, dtype=np.float32)
    return Classifier(DenseNet([DenseLayer(w, np.zeros(N_CLASSES, np.float32),
                                           "linear")]), N_CLASSES)


def bumped(base: float, cls: int, delta: float = BUMP) -> np.ndarray:
    row = np.full(N_PIXELS, base, dtype=np.float64)
    row[cls] += delta
    return row.astype(np.float32)


def solve_base_for_target_ssim(target: float, mu_a: float = 0.5,
                               delta: float = BUMP) -> float:
    """Bisection: constant level mu_b such that ssim between a constant
    mu_a image and (constant mu_b + one bump of delta) equals target."""
    a = np.full(N_PIXELS, mu_a)

    def value(mu_b):
        return straightline_ssim(a, bumped(mu_b, 0, delta).astype(np.float64))

    lo, hi = 0.05, mu_a - delta / N_PIXELS
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if value(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def make_outcome(adv_classes, final_classes, final_base: float,
                 true_classes=None) -> BatchOutcome:
    if true_classes is None:
        x = np.full((len(adv_classes), N_PIXELS), 0.5, dtype=np.float32)
    else:
        x = np.stack([bumped(0.5, c) for c in true_classes])
    x_adv = np.stack([bumped(0.5, c) for c in adv_classes])
    x_final = np.stack([bumped(final_base, c) for c in final_classes])
    return BatchOutcome(x=x, x_adv=x_adv, x_final=x_final,
                        classifier=readout_classifier())


def test_reward_config_validation():
    with pytest.raises(ConfigError):
        RewardConfig(eta1=float("nan"))


def test_batch_outcome_shape_check():
    with pytest.raises(ShapeError):
        BatchOutcome(np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((3, 4)),
                     readout_classifier())


def test_ssim_avg_identity_and_single_image():
    rng = make_rng(4)
    batch = rng.random((6, N_PIXELS)).astype(np.float32)
    assert ssim_avg(batch, batch) == 1.0
    one = batch[:1]
    other = rng.random((1, N_PIXELS)).astype(np.float32)
    assert ssim_avg(one, other) == pytest.approx(ssim(one[0], other[0]))


def test_ssim_avg_is_the_arithmetic_mean():
    base = solve_base_for_target_ssim(0.8)
    x = np.full((4, N_PIXELS), 0.5, dtype=np.float32)
    x_final = np.concatenate([x[:2], np.stack([bumped(base, 0)] * 2)])
    s = ssim(x[0], bumped(base, 0))
    assert ssim_avg(x, x_final) == pytest.approx((1.0 + 1.0 + s + s) / 4, abs=1e-9)


def test_adv_rate_cases():
    # attack never changes the class
    o = make_outcome(adv_classes=[0, 0, 0, 0], final_classes=[0, 0, 0, 0],
                     final_base=0.4)
    assert adv_rate(o) == 0.0
    # one of four keeps its adversarial class after purification
    o = make_outcome(adv_classes=[1, 0, 0, 0], final_classes=[1, 0, 0, 0],
                     final_base=0.4)
    assert adv_rate(o) == pytest.approx(0.5)
    # every image keeps its adversarial class
    o = make_outcome(adv_classes=[1, 2, 3, 1], final_classes=[1, 2, 3, 1],
                     final_base=0.4)
    assert adv_rate(o) == 1.0


def test_err_rate_cases():
    # purification returns everything to the true class
    o = make_outcome(adv_classes=[1, 2, 1, 3], final_classes=[0, 0, 0, 0],
                     final_base=0.4)
    assert err_rate(o) == 0.0
    # four of sixteen land in a class that is new but still wrong
    adv = [1] * 4 + [0] * 12
    fin = [2] * 4 + [0] * 12
    o = make_outcome(adv_classes=adv, final_classes=fin, final_base=0.4)
    assert err_rate(o) == pytest.approx(0.5)


def test_surviving_and_new_but_wrong_are_mutually_exclusive():
    rng = make_rng(13)
    for _ in range(50):
        adv = rng.integers(0, N_CLASSES, size=12)
        fin = rng.integers(0, N_CLASSES, size=12)
        o = make_outcome(adv.tolist(), fin.tolist(), final_base=0.4)
        c, c_adv, c_fin = o.classes()
        g = (c != c_adv) & (c_adv == c_fin)
        j = (c != c_adv) & (c_adv != c_fin) & (c != c_fin)
        assert not np.any(g & j)


def test_reward_zero_at_perfect_purification():
    x = np.full((8, N_PIXELS), 0.5, dtype=np.float32)
    o = BatchOutcome(x=x, x_adv=x.copy(), x_final=x.copy(),
                     classifier=readout_classifier())
    assert reward(o, RewardConfig()) == pytest.approx(0.0, abs=1e-12)


def test_reward_hand_value():
    # components engineered to (ssim=0.9, adv=0.5, err=0.25) exactly:
    # 16 images, 4 keep the adversarial class, 1 lands new-but-wrong
    base = solve_base_for_target_ssim(0.9)
    adv = [1] * 4 + [1] + [0] * 11
    fin = [1] * 4 + [2] + [0] * 11
    o = make_outcome(adv, fin, final_base=base)
    # float32 pixel quantization keeps the engineered component within 1e-7
    assert ssim_avg(o.x, o.x_final) == pytest.approx(0.9, abs=1e-6)
    assert adv_rate(o) == pytest.approx(0.5, abs=1e-12)
    assert err_rate(o) == pytest.approx(0.25, abs=1e-12)
    assert reward(o, RewardConfig()) == pytest.approx(-0.555, abs=1e-6)


def test_reward_is_never_positive_with_default_weights():
    rng = make_rng(3)
    for _ in range(20):
        adv = rng.integers(0, N_CLASSES, size=8).tolist()
        fin = rng.integers(0, N_CLASSES, size=8).tolist()
        o = make_outcome(adv, fin, final_base=float(rng.uniform(0.2, 0.5)))
        assert reward(o, RewardConfig()) <= 1e-12


def test_reward_monotonicity():
    cfg = RewardConfig()
    lo = solve_base_for_target_ssim(0.7)
    hi = solve_base_for_target_ssim(0.95)
    benign = [0] * 8
    # higher similarity, same classes -> higher reward
    assert reward(make_outcome(benign, benign, hi), cfg) \
        > reward(make_outcome(benign, benign, lo), cfg)
    # more surviving attacks -> lower reward
    one = make_outcome([1] + [0] * 7, [1] + [0] * 7, hi)
    four = make_outcome([1] * 4 + [0] * 4, [1] * 4 + [0] * 4, hi)
    assert reward(four, cfg) < reward(one, cfg)
    # more new-but-wrong purifications -> lower reward
    j_one = make_outcome([1] + [0] * 7, [2] + [0] * 7, hi)
    j_two = make_outcome([1, 1] + [0] * 6, [2, 2] + [0] * 6, hi)
    assert reward(j_two, cfg) < reward(j_one, cfg)


def test_rates_invariant_under_class_relabeling():
    # tie-free images, so every class transforms consistently under relabeling
    rng = make_rng(31)
    true = rng.integers(0, N_CLASSES, size=10).tolist()
    adv = rng.integers(0, N_CLASSES, size=10).tolist()
    fin = rng.integers(0, N_CLASSES, size=10).tolist()
    o = make_outcome(adv, fin, final_base=0.4, true_classes=true)
    base_adv, base_err = adv_rate(o), err_rate(o)
    for _ in range(5):
        perm = rng.permutation(N_CLASSES)
        w = o.classifier.net.layers[0].weight
        permuted = Classifier(DenseNet([DenseLayer(w[perm], np.zeros(
            N_CLASSES, np.float32), "linear")]), N_CLASSES)
        po = BatchOutcome(o.x, o.x_adv, o.x_final, permuted)
        assert adv_rate(po) == pytest.approx(base_adv, abs=1e-12)
        assert err_rate(po) == pytest.approx(base_err, abs=1e-12)
