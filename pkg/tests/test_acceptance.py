"""Acceptance criteria, one test each.

Every test prints a single ``CRITERION n PASS|FAIL`` line with the measured
quantity so the verdicts can be read straight off ``pytest -v`` output.
"""

import csv
import os
import re
import time
from collections import defaultdict
from fractions import Fraction

import numpy as np
import pytest

from havit import tensor as T
from havit.attention import (
    BlendConfig,
    attention_layer_forward,
    blend_coefficients,
    init_history,
    unrolled_blend_oracle,
)
from havit.cli import main
from havit.data import (
    cifar100_available,
    compute_stats,
    load_cifar100,
    normalize,
    serialize_records,
    synthetic_dataset,
)
from havit.gradcheck import relative_error
from havit.model import HAViT, extract_cls_attention, forward, init_params, preset
from havit.trainer import DEFAULT_ALPHA_GRID, TrainConfig, evaluate, fit

from conftest import random_layer_params

CIFAR_DIR = os.environ.get("HAVIT_CIFAR100")


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return report


def test_criterion_01_alpha_one_reduces_to_baseline(verdict):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for draw in range(20):
        depth = 1 + draw % 4
        seed = int(rng.integers(1 << 31))
        std = float(rng.choice([0.02, 0.1, 0.3]))
        blended = preset("tiny", depth=depth, init_std=std, blend=BlendConfig(alpha=1.0, seed=seed))
        baseline = preset("tiny", depth=depth, init_std=std, baseline_mode=True)
        params = init_params(blended, seed)
        x = rng.standard_normal((3, 3, 32, 32))
        a = forward(x, blended, params, batch_counter=draw).logits.data
        b = forward(x, baseline, params).logits.data
        worst = max(worst, relative_error(a, b).max())
    elapsed = time.perf_counter() - start
    verdict(1, worst <= 1e-12 and elapsed < 10,
            f"20 draws, depth 1-4: max relative logit gap {worst:.2e} (<= 1e-12), {elapsed:.1f}s (< 10s)")


def test_criterion_02_closed_form_oracle(verdict):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst = 0.0
    for alpha in (0.0, 0.45, 1.0):
        cfg = BlendConfig(alpha=alpha)
        for L in range(1, 9):
            X = T.Tensor(rng.standard_normal((2, 5, 8)))
            H = init_history("random", 2, 2, 5, seed=int(rng.integers(1 << 31)))
            H0, selfs = H, []
            for l in range(1, L + 1):
                y, H = attention_layer_forward(X, H, random_layer_params(rng), cfg, layer_index=l)
                selfs.append(H.self_logits)
                X = T.add(X, y)
            oracle = unrolled_blend_oracle(selfs, H0, alpha).data
            worst = max(worst, relative_error(H.logits.data, oracle).max())
    elapsed = time.perf_counter() - start
    verdict(2, worst < 1e-10 and elapsed < 5,
            f"L=1..8, alpha in {{0, 0.45, 1}}: max relative gap {worst:.2e} (< 1e-10), {elapsed:.1f}s (< 5s)")


def _gradcheck_max(out, *flags):
    code = main(["gradcheck", "--out", str(out), *flags])
    with open(out / "gradcheck.csv") as fh:
        worst = max(float(r["max_rel_error"]) for r in csv.DictReader(fh))
    return code, worst


def test_criterion_03_gradient_correctness(verdict, tmp_path):
    start = time.perf_counter()
    code_on, flowing = _gradcheck_max(tmp_path / "flowing")
    code_off, detached = _gradcheck_max(tmp_path / "detached", "--detach-history")
    elapsed = time.perf_counter() - start
    params = HAViT(preset("tiny")).parameter_count()
    ok = flowing < 1e-5 and detached < 1e-5 and code_on == code_off == 0 and params <= 20_000 and elapsed < 120
    verdict(3, ok, f"tiny preset ({params} params), every entry: flowing {flowing:.2e}, "
                   f"detached {detached:.2e} (< 1e-5), exit codes {code_on}/{code_off}, {elapsed:.0f}s (< 120s)")


def test_criterion_04_zero_init_temperature(verdict):
    rng = np.random.default_rng(404)
    cfg = preset("tiny", depth=1, init_std=0.3, blend=BlendConfig(alpha=0.45, init_strategy="zero"))
    trace = forward(rng.standard_normal((4, 3, 32, 32)), cfg, init_params(cfg, 4))
    H1 = trace.histories[0]
    got = T.softmax_rows(H1.logits).data
    want = T.softmax_rows(T.mul(H1.self_logits, 0.45)).data
    gap = np.abs(got - want).max()
    verdict(4, gap <= 1e-12, f"depth 1, zero init, alpha 0.45: max attention-weight gap {gap:.2e} (<= 1e-12)")


def test_criterion_05_coefficient_conservation(verdict):
    alphas = [Fraction(0), Fraction(1)] + [Fraction(str(a)) for a in DEFAULT_ALPHA_GRID]
    bad = [(a, L) for a in alphas for L in range(1, 13) if sum(blend_coefficients(a, L)) != 1]
    verdict(5, not bad, f"{len(alphas)} alphas x L=1..12 in exact rationals: {len(bad)} sums differ from 1")


@pytest.mark.parametrize("arm", ["baseline", "havit"])
def test_criterion_06_smoke_training(verdict, arm):
    data = synthetic_dataset(2, 250, seed=0)
    blend = BlendConfig(alpha=0.45, init_strategy="random", seed=0)
    cfg = preset("tiny", num_classes=2, blend=blend, baseline_mode=(arm == "baseline"))
    tc = TrainConfig(epochs=13, base_lr=0.003, batch_size=32, warmup_epochs=1, max_steps=200)
    start = time.perf_counter()
    model = HAViT(cfg, seed=0)
    result = fit(model, data, tc)
    _, acc = evaluate(model, data, compute_stats(data))
    elapsed = time.perf_counter() - start
    verdict(6, acc >= 0.90 and result.steps <= 200 and elapsed < 180,
            f"{arm}: train accuracy {acc:.3f} (>= 0.90) after {result.steps} steps, {elapsed:.0f}s (< 180s)")


CELL = re.compile(r"^\d+\.\d\d \([↑↓±]\d+\.\d\d\)$")


def test_criterion_07_sweep_harness(verdict, tmp_path):
    start = time.perf_counter()
    code = main(["sweep", "--preset", "tiny", "--epochs", "2", "--set", "train.batch_size=32",
                 "--set", "train.warmup_epochs=1", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    table = (tmp_path / "sweep_table.txt").read_text(encoding="utf-8").splitlines()
    body = [re.split(r"\s{2,}", line.strip()) for line in table[3:]]
    cells = [c for line in body for c in line[1:]]
    problems = []
    if code != 0:
        problems.append(f"exit {code}")
    if rows[0]["alpha"] != "baseline" or len(rows) != 19:
        problems.append(f"{len(rows)} csv rows")
    if [line[0] for line in body] != [f"{a:.2f}" for a in DEFAULT_ALPHA_GRID]:
        problems.append("alpha column")
    if re.split(r"\s{2,}", table[1].strip()) != ["alpha", "Accuracy (Random)", "Accuracy (Zero)"]:
        problems.append("header")
    if len(cells) != 18 or not all(CELL.match(c) for c in cells):
        problems.append(f"{len(cells)} well-formed cells")
    if "Baseline ViT accuracy" not in table[0]:
        problems.append("title")
    verdict(7, not problems and elapsed < 1200,
            f"9 alphas x 2 inits = {len(cells)} cells + baseline, arrow format; "
            f"{', '.join(problems) or 'layout ok'}; {elapsed:.0f}s (< 1200s)")


def _run_all(out):
    quick = ["--preset", "tiny", "--set", "data.samples_per_class=16", "--set", "data.eval_samples_per_class=4",
             "--set", "train.batch_size=8", "--set", "train.warmup_epochs=1", "--epochs", "2"]
    codes = [
        main(["train", *quick, "--out", str(out)]),
        main(["eval", *quick, "--out", str(out), "--checkpoint", str(out / "model.ckpt")]),
        main(["export-attn", *quick, "--out", str(out), "--checkpoint", str(out / "model.ckpt")]),
        main(["sweep", *quick, "--alphas", "0.25,0.75", "--out", str(out / "sweep")]),
        main(["gradcheck", "--set", "gradcheck.max_elements=4", "--out", str(out / "gc")]),
    ]
    return codes, {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*.csv"))}


def test_criterion_08_determinism(verdict, tmp_path):
    codes_a, a = _run_all(tmp_path / "a")
    codes_b, b = _run_all(tmp_path / "b")
    differ = sorted(str(k) for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differ and codes_a == codes_b and len(a) == 5
    verdict(8, ok, f"train, eval, export-attn, sweep, gradcheck run twice: {len(a)} CSVs, "
                   f"{len(differ)} differ {differ or ''}".rstrip())


@pytest.mark.skipif(not (CIFAR_DIR and cifar100_available(CIFAR_DIR)),
                    reason="CIFAR-100 binary files absent (set HAVIT_CIFAR100 to the directory with train.bin/test.bin)")
def test_criterion_09_cifar100_fidelity(verdict):
    sizes, exact = {}, True
    for split in ("train", "test"):
        ds = load_cifar100(CIFAR_DIR, split)
        sizes[split] = len(ds)
        with open(os.path.join(CIFAR_DIR, f"{split}.bin"), "rb") as fh:
            exact &= serialize_records(ds) == fh.read()
    ok = exact and sizes == {"train": 50_000, "test": 10_000}
    verdict(9, ok, f"splits {sizes['train']}/{sizes['test']} (50000/10000), byte round trip {'exact' if exact else 'BROKEN'}")


def test_criterion_10_attention_export(verdict, tmp_path):
    quick = ["--preset", "tiny", "--set", "model.patch_size=4", "--set", "data.samples_per_class=8",
             "--set", "data.eval_samples_per_class=4", "--set", "train.batch_size=8", "--epochs", "1",
             "--set", "train.warmup_epochs=1", "--out", str(tmp_path)]
    codes = [main(["train", *quick]),
             main(["export-attn", *quick, "--checkpoint", str(tmp_path / "model.ckpt")])]
    model = HAViT.load(tmp_path / "model.ckpt")
    sums = defaultdict(float)
    counts = defaultdict(int)
    with open(tmp_path / "attention.csv") as fh:
        for r in csv.DictReader(fh):
            sums[r["image"], r["layer"]] += float(r["probability"])
            counts[r["image"], r["layer"]] += 1
    # Same maps straight from the library, before any text formatting.
    train = synthetic_dataset(2, 8, seed=0)
    held_out = synthetic_dataset(2, 4, seed=1)
    trace = model.forward(normalize(held_out.images[:4], compute_stats(train)), stream=1)
    direct = [extract_cls_attention(trace, l) for l in (1, 2)]
    csv_gap = max(abs(s - 1.0) for s in sums.values())
    lib_gap = max(np.abs(m.sum(axis=(1, 2)) - 1.0).max() for m in direct)
    pgm = (tmp_path / "attn_img0_layer1.pgm").read_bytes()
    ok = (codes == [0, 0] and model.config.num_patches == 64 and set(counts.values()) == {64}
          and all(m.shape[1:] == (8, 8) for m in direct) and pgm.startswith(b"P5\n8 8\n255\n")
          and csv_gap <= 1e-9 and lib_gap <= 1e-9)
    verdict(10, ok, f"N={model.config.num_patches}: {len(sums)} 8x8 maps, max |sum - 1| "
                    f"{lib_gap:.1e} in memory, {csv_gap:.1e} from attention.csv (<= 1e-9)")
