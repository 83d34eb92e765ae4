"""Acceptance suite: each test carries a ``criterion`` mark and the terminal
summary prints one pass/fail line per criterion. Tolerances are the contract
values; nothing here is loosened to make a run pass.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from gradcheck import LAYERS, module_check, rel_err
from test_kernels import CONV_CASES, _adjoint_gap, naive_conv3d
from test_metrics import _random_mask_pair, brute_hd95
from transbts import kernels
from transbts.complexity import count_macs, count_params, transformer_layer_params
from transbts.config import PRESETS
from transbts.data import PhantomSpec, generate_phantom, normalize_sample
from transbts.data.nifti import NiftiDatatypeError, NiftiMagicError, NiftiTruncatedError, read_nifti1, parse_nifti1
from transbts.inference import FLIP_SETS, coverage, tta_probabilities, window_positions
from transbts.metrics import dice_score, evaluate_case, hausdorff95, index_to_label, region_masks, softmax_dice_loss
from transbts.model import build_model, model_forward
from transbts.nn import Dropout
from transbts.tensor import Tensor, no_grad
from transbts.train import load_checkpoint, poly_lr, save_checkpoint, train_loop

FIXTURES = Path(__file__).parent / "fixtures"

# -- 1. shape conformance ------------------------------------------------

STAGE_SHAPES = {
    "InitConv": (16, 128, 128, 128),
    "EnBlock1": (16, 128, 128, 128),
    "DownSample1": (32, 64, 64, 64),
    "EnBlock2": (32, 64, 64, 64),
    "DownSample2": (64, 32, 32, 32),
    "EnBlock3": (64, 32, 32, 32),
    "DownSample3": (128, 16, 16, 16),
    "EnBlock4": (128, 16, 16, 16),
    "LinearProjection": (512, 4096),
    "Transformer": (512, 4096),
    "FeatureMapping": (128, 16, 16, 16),
    "DeBlock1": (128, 16, 16, 16),
    "UpSample1": (64, 32, 32, 32),
    "DeBlock2": (64, 32, 32, 32),
    "UpSample2": (32, 64, 64, 64),
    "DeBlock3": (32, 64, 64, 64),
    "UpSample3": (16, 128, 128, 128),
    "DeBlock4": (16, 128, 128, 128),
    "EndConv": (4, 128, 128, 128),
}


@pytest.mark.criterion(1, "stage output shapes of an instrumented 4x128^3 forward pass, < 5 min")
def test_shape_conformance(detail):
    start = time.perf_counter()
    model = build_model(PRESETS["full"], 0).eval()
    x = np.random.default_rng(0).standard_normal((1, 4, 128, 128, 128)).astype(np.float32)
    seen = {}
    with no_grad():
        model_forward(model, Tensor(x), hook=lambda name, t: seen.setdefault(name, t.shape[1:]))
    elapsed = time.perf_counter() - start
    wrong = {k: (seen.get(k), v) for k, v in STAGE_SHAPES.items() if seen.get(k) != v}
    detail(f"{len(STAGE_SHAPES) - len(wrong)}/{len(STAGE_SHAPES)} stage shapes match, {elapsed:.0f}s")
    assert not wrong
    assert elapsed < 300


# -- 2. complexity accounting --------------------------------------------

FULL, LIGHT = PRESETS["full"], PRESETS["lightweight"]


def _within(value, target, tol):
    return abs(value / target - 1) <= tol


@pytest.mark.criterion("2a", "full params within 3% of 32.99M")
def test_full_params(detail):
    p = count_params(FULL)
    detail(f"{p / 1e6:.2f}M ({100 * (p / 32.99e6 - 1):+.2f}%)")
    assert _within(p, 32.99e6, 0.03)


@pytest.mark.criterion("2b", "lightweight params within 3% of 15.14M")
def test_lightweight_params(detail):
    p = count_params(LIGHT)
    detail(f"{p / 1e6:.2f}M ({100 * (p / 15.14e6 - 1):+.2f}%)")
    assert _within(p, 15.14e6, 0.03)


@pytest.mark.criterion("2c", "exact full - lightweight difference 17,853,952")
def test_param_difference(detail):
    diff = count_params(FULL) - count_params(LIGHT)
    detail(f"{diff:,}")
    assert diff == 17_853_952
    assert diff == 4 * transformer_layer_params(512, 4096) - transformer_layer_params(512, 2048)


@pytest.mark.criterion("2d", "parameter reduction in [53%, 56%]")
def test_param_reduction(detail):
    r = 1 - count_params(LIGHT) / count_params(FULL)
    detail(f"{100 * r:.2f}%")
    assert 0.53 <= r <= 0.56


@pytest.mark.criterion("2e", "full FLOPs within 15% of 333G")
def test_full_flops(detail):
    # the reference figures count one multiply-accumulate as one FLOP
    f = count_macs(FULL)
    detail(f"{f / 1e9:.1f}G MACs ({100 * (f / 333e9 - 1):+.1f}%)")
    assert _within(f, 333e9, 0.15)


@pytest.mark.criterion("2f", "lightweight FLOPs within 15% of 208G")
def test_lightweight_flops(detail):
    f = count_macs(LIGHT)
    detail(f"{f / 1e9:.1f}G MACs ({100 * (f / 208e9 - 1):+.1f}%)")
    assert _within(f, 208e9, 0.15)


@pytest.mark.criterion("2g", "FLOP reduction in [34%, 41%]")
def test_flop_reduction(detail):
    r = 1 - count_macs(LIGHT) / count_macs(FULL)
    detail(f"{100 * r:.2f}%")
    assert 0.34 <= r <= 0.41


# -- 3. ablation geometry ------------------------------------------------


@pytest.mark.criterion(3, "token counts N = 512 / 4096 / 4096 for OS 16 / 8 / 4 with 2^3 unfold")
def test_token_counts(detail):
    got = [PRESETS[k].num_tokens for k in ("os16", "full", "os4")]
    detail(f"N = {got}")
    assert got == [512, 4096, 4096]
    assert PRESETS["os4"].patch_unfold == 2 and PRESETS["os4"].os == 4
    for name in ("os16", "os4"):
        cfg = PRESETS[name].replace(input_extent=(32, 32, 32))
        model = build_model(cfg, 0)
        assert model.position.weight.shape == (cfg.d, cfg.num_tokens)
        seen = {}
        with no_grad():
            model_forward(model, Tensor(np.zeros((1, 4, 32, 32, 32), np.float32)), hook=lambda n, t: seen.setdefault(n, t.shape))
        assert seen["Transformer"][1:] == (cfg.d, cfg.num_tokens)


# -- 4. gradient integrity -----------------------------------------------

E2E = PRESETS["tiny"].replace(input_extent=(16, 16, 16))


def _e2e_trial(seed, steps=(1e-5, 1e-6)):
    """Relative errors (float64, float32) of one joint directional derivative.

    The direction perturbs the input and every parameter at once. The finite
    difference runs in float64; the float32 analytic side uses a twin model
    holding the same weights.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4, 16, 16, 16))
    y = rng.choice([0, 1, 2, 4], size=(1, 16, 16, 16))
    model = build_model(E2E, seed, np.float64)
    params = [p for _, p in model.named_parameters()]
    base = [p.data.copy() for p in params]
    dirs = [rng.standard_normal(p.shape) for p in params]
    dx = rng.standard_normal(x.shape)
    # unit joint direction, so a step h moves the weights by exactly h
    norm = np.sqrt(sum(np.sum(d * d) for d in dirs) + np.sum(dx * dx))
    dirs = [d / norm for d in dirs]
    dx = dx / norm

    def run(m, inp):
        for i, d in enumerate(mod for _, mod in m.named_modules() if isinstance(mod, Dropout)):
            d.rng = np.random.default_rng([seed, i])
        return softmax_dice_loss(model_forward(m, inp), y)

    def analytic(m, dtype):
        m.zero_grad()
        xt = Tensor(x.astype(dtype), requires_grad=True)
        run(m, xt).backward()
        total = float(np.sum(xt.grad.astype(np.float64) * dx))
        for (_, p), d in zip(m.named_parameters(), dirs):
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) * d))
        return total

    twin = build_model(E2E, seed, np.float32)
    for (_, q), b in zip(twin.named_parameters(), base):
        q.data = b.astype(np.float32)
    a64, a32 = analytic(model, np.float64), analytic(twin, np.float32)

    def loss_at(h):
        for p, b, d in zip(params, base, dirs):
            p.data = b + h * d
        return float(run(model, Tensor(x + h * dx)).data)

    # best of two steps, as in best_step_error: ReLU kinks punish large steps, rounding small ones
    numeric = [(loss_at(h) - loss_at(-h)) / (2 * h) for h in steps]
    return min(rel_err(a64, n) for n in numeric), min(rel_err(a32, n) for n in numeric)


@pytest.mark.criterion(4, "finite-difference gradients: all layers and the end-to-end tiny model, 100 trials, < 10 min")
def test_gradient_integrity(detail):
    start = time.perf_counter()
    worst64 = worst32 = 0.0
    for name, make, shape in LAYERS:
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal(shape)
            worst64 = max(worst64, module_check(make, x, rng, seed=seed))
            worst32 = max(worst32, module_check(make, x, rng, seed=seed, analytic_dtype=np.float32))
    layer_note = f"layers: f64 {worst64:.1e}, f32 {worst32:.1e}"
    e2e = [_e2e_trial(seed) for seed in range(100)]
    e64, e32 = max(e[0] for e in e2e), max(e[1] for e in e2e)
    elapsed = time.perf_counter() - start
    detail(f"{layer_note}; tiny@16^3 end-to-end: f64 {e64:.1e}, f32 {e32:.1e}; {elapsed:.0f}s")
    assert worst64 < 1e-6 and worst32 < 1e-3
    assert e64 < 1e-6 and e32 < 1e-3
    assert elapsed < 600


# -- 5. kernel oracles ---------------------------------------------------


@pytest.mark.criterion(5, "conv3d vs six-loop oracle, deconv adjoint, hd95 vs all-pairs oracle, dice hand counts, < 5 min")
def test_kernel_oracles(detail):
    start = time.perf_counter()
    conv_err = 0.0
    rng = np.random.default_rng(0)
    cases = list(CONV_CASES)
    for _ in range(20):
        k = int(rng.choice([1, 2, 3]))
        s = int(rng.integers(1, 3))
        ext = tuple(int(v) for v in rng.integers(k, 9, size=3))
        cases.append((int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), ext, k, s, int(rng.integers(0, 2)) if k > 1 else 0))
    for b, cin, cout, ext, k, s, p in cases:
        x = rng.standard_normal((b, cin) + ext).astype(np.float32)
        w = rng.standard_normal((cout, cin, k, k, k)).astype(np.float32)
        ref = naive_conv3d(x.astype(np.float64), w.astype(np.float64), s, p)
        conv_err = max(conv_err, np.max(np.abs(kernels.conv3d(x, w, s, p) - ref)) / np.max(np.abs(ref)))
    adjoint = max(_adjoint_gap(seed, np.float32) for seed in range(100))
    hd_mismatch = 0
    for seed in range(100):
        a, b = _random_mask_pair(seed)
        hd_mismatch += hausdorff95(a, b) != brute_hd95(a, b)
    p = np.zeros((1, 1, 2), bool)
    g = np.ones((1, 1, 2), bool)
    p[0, 0, 0] = True
    hand = [dice_score(p, g) == 2 / 3, dice_score(g, g) == 1.0, dice_score(p, ~p) == 0.0]
    elapsed = time.perf_counter() - start
    detail(f"conv rel {conv_err:.1e}, adjoint {adjoint:.1e}, hd95 mismatches {hd_mismatch}/100, {elapsed:.0f}s")
    assert conv_err < 1e-5 and adjoint < 1e-4 and hd_mismatch == 0 and all(hand)
    assert elapsed < 300


# -- 6. metric conventions -----------------------------------------------


@pytest.mark.criterion(6, "identical masks, (3,4,0) offset hd95 = 5, ET in TC in WT on 1000 volumes")
def test_metric_conventions(detail):
    m = np.random.default_rng(0).random((8, 8, 8)) < 0.4
    assert dice_score(m, m) == 1.0 and hausdorff95(m, m) == 0.0
    p = np.zeros((8, 8, 8), bool)
    g = np.zeros((8, 8, 8), bool)
    p[0, 0, 0] = g[3, 4, 0] = True
    assert hausdorff95(p, g) == 5.0
    rng = np.random.default_rng(1)
    violations = 0
    for _ in range(1000):
        r = region_masks(rng.choice([0, 1, 2, 4], size=(8, 8, 8)))
        violations += int((r["ET"] & ~r["TC"]).any() or (r["TC"] & ~r["WT"]).any())
    detail(f"nesting violations {violations}/1000")
    assert violations == 0


# -- 7. training sanity --------------------------------------------------


@pytest.fixture(scope="module")
def overfit_run():
    cases = [normalize_sample(generate_phantom(np.random.default_rng(i), PhantomSpec(), case_id=f"phantom-{i}")) for i in range(2)]
    start = time.perf_counter()
    result = train_loop(PRESETS["tiny"], cases, epochs=150, batch_size=1, seed=0)
    return cases, result, time.perf_counter() - start


def _training_dice(model, cases):
    model.eval()
    scores = []
    with no_grad():
        for s in cases:
            logits = model_forward(model, Tensor(s.modalities[None].astype(np.float32)))
            pred = index_to_label(logits.data[0].argmax(axis=0))
            scores.extend(evaluate_case(pred, s.label, spacing=s.spacing).dice.values())
    model.train()
    return float(np.mean(scores))


@pytest.mark.slow
@pytest.mark.criterion(7, "tiny preset overfits 2 phantoms to Dice >= 0.90 in 300 steps, <= 30 min, finite loss, poly_lr")
def test_training_sanity(overfit_run, detail):
    cases, result, elapsed = overfit_run
    losses = [r["loss"] for r in result.trace]
    dice = _training_dice(result.model, cases)
    detail(f"{len(losses)} steps, loss {losses[0]:.3f} -> {losses[-1]:.3f}, mean region Dice {dice:.3f}, {elapsed / 60:.1f} min")
    assert len(losses) == 300 and all(math.isfinite(v) for v in losses)
    assert poly_lr(0, 300) == 4e-4 and poly_lr(300, 300) == 0.0
    assert abs(poly_lr(150, 300) - 2.1436e-4) < 1e-8
    assert elapsed <= 1800
    assert dice >= 0.90


# -- 8. determinism and persistence --------------------------------------


@pytest.mark.criterion(8, "bit-identical loss traces, bit-exact checkpoint round trip, resume equals uninterrupted run")
def test_determinism_and_persistence(tmp_path, detail):
    cfg = PRESETS["tiny"].replace(input_extent=(16, 16, 16))
    spec = PhantomSpec(extent=(20, 20, 20))
    cases = [normalize_sample(generate_phantom(np.random.default_rng(i), spec, case_id=f"c{i}")) for i in range(2)]
    a = train_loop(cfg, cases, epochs=3, seed=11)
    b = train_loop(cfg, cases, epochs=3, seed=11)
    assert a.trace == b.trace
    save_checkpoint(a.model, a.state, tmp_path / "ckpt")
    model, state = load_checkpoint(tmp_path / "ckpt")
    same = all(np.array_equal(p.data, q.data) for (_, p), (_, q) in zip(a.model.named_parameters(), model.named_parameters()))
    same &= all(np.array_equal(u, v) for (_, u), (_, v) in zip(a.model.named_buffers(), model.named_buffers()))
    assert same
    first = train_loop(cfg, cases, epochs=3, seed=11, stop_at=3, out_dir=tmp_path / "run")
    rest = train_loop(cfg, cases, epochs=3, seed=11, resume=load_checkpoint(first.checkpoint))
    assert first.trace + rest.trace == a.trace
    final_same = all(np.array_equal(p.data, q.data) for (_, p), (_, q) in zip(a.model.named_parameters(), rest.model.named_parameters()))
    detail(f"{len(a.trace)} steps replayed; resume at step 3 matches step-for-step")
    assert final_same


# -- 9. inference plumbing -----------------------------------------------


@pytest.mark.criterion(9, "240x240x155 gives 18 windows with full coverage; TTA deterministic and exact on a flip-symmetric stub")
def test_inference_plumbing(detail):
    pos = window_positions((240, 240, 155), 128, 64)
    cov = coverage((240, 240, 155), 128, 64)
    assert len(pos) == 18 and cov.min() >= 1

    def symmetric_stub(batch):
        # pointwise, hence equivariant under every flip
        e = np.exp(batch - batch.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    vol = np.random.default_rng(0).standard_normal((4, 12, 10, 9)).astype(np.float32)
    t1 = tta_probabilities(symmetric_stub, vol, 8, 4)
    t2 = tta_probabilities(symmetric_stub, vol, 8, 4)
    plain = symmetric_stub(vol[None])[0]
    gap = float(np.max(np.abs(t1 - plain)))
    detail(f"{len(pos)} windows, min coverage {cov.min()}, TTA vs plain max gap {gap:.1e} over {len(FLIP_SETS)} flips")
    assert t1.tobytes() == t2.tobytes()
    assert np.array_equal(t1.argmax(0), plain.argmax(0)) and gap < 1e-6


# -- 10. parser ----------------------------------------------------------


@pytest.mark.criterion(10, "NIfTI-1 fixtures (both endians, dtypes 2/4/16, scl_slope) bit-exact; distinct parse errors")
def test_nifti_parser(detail):
    names = sorted(p.stem for p in FIXTURES.glob("*.nii"))
    for name in names:
        _, data = read_nifti1(FIXTURES / f"{name}.nii")
        with np.load(FIXTURES / f"{name}.npz") as z:
            expected = z["scaled"]
        if "scaled" in name:
            assert data.dtype == np.float32 and np.array_equal(data.astype(np.float64), expected)
        else:
            assert data.dtype == expected.dtype.newbyteorder("=") and np.array_equal(data, expected)
    blob = (FIXTURES / "le_float32.nii").read_bytes()
    raised = []
    for corrupt, err in [
        (blob[:344] + b"abcd" + blob[348:], NiftiMagicError),
        (blob[:70] + (64).to_bytes(2, "little") + blob[72:], NiftiDatatypeError),
        (blob[:-1], NiftiTruncatedError),
    ]:
        with pytest.raises(err) as info:
            parse_nifti1(corrupt)
        raised.append(type(info.value))
    detail(f"{len(names)} fixtures bit-exact; errors {[e.__name__ for e in raised]}")
    assert len(set(raised)) == 3
