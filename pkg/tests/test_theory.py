import json
from pathlib import Path

import numpy as np
import pytest

from sfolab.basis import build_basis
from sfolab.theory import (
    StencilSpec,
    UnstableStencilError,
    check_stability,
    decay_ratios,
    diffusion_reaction_stencil,
    geometric_kernel,
    greens_closed_form,
    greens_numeric,
    greens_one_sided,
    impulse_residual,
    log_fit,
    modes_for_accuracy,
    rotation,
    truncation_study,
)

GOLDEN = json.loads((Path(__file__).parent / "golden" / "modes_for_eps.json").read_text())


def battery():
    return [
        StencilSpec.scalar(2.5, 1.0),
        StencilSpec.scalar(3.0, 1.0),
        StencilSpec.scalar(3.0, -1.0),
        StencilSpec.scalar(2.2, 1.0),
        StencilSpec(rotation(np.pi / 4), np.array([2.5, 3.0]), np.array([1.0, 1.0])),
        StencilSpec(rotation(0.3), np.array([5.0, 2.1]), np.array([-2.0, 0.5])),
        diffusion_reaction_stencil(np.diag([1.0, 2.0]), np.eye(2), 0.5),
    ]


def test_stability_examples():
    assert check_stability(StencilSpec.scalar(2.5, 1.0))
    assert check_stability(StencilSpec.scalar(3.0, -1.0))
    with pytest.raises(UnstableStencilError):
        greens_closed_form(StencilSpec.scalar(2.0, 1.0), 5)
    assert not check_stability(StencilSpec.scalar(2.0, 1.0))


def test_closed_form_examples():
    G = greens_closed_form(StencilSpec.scalar(2.5, 1.0), 20)
    assert G.roots[0] == pytest.approx(-0.5, abs=1e-15)
    t = G.offsets
    assert np.abs(G.samples[:, 0, 0] - (2 / 3) * (-0.5) ** np.abs(t)).max() <= 1e-15
    G = greens_closed_form(StencilSpec.scalar(3.0, 1.0), 5)
    assert G.roots[0] == pytest.approx((-3 + np.sqrt(5)) / 2, rel=1e-14)
    assert G.at(0)[0, 0] == pytest.approx(1 / np.sqrt(5), rel=1e-14)
    G = greens_closed_form(StencilSpec.scalar(4.0, 0.0), 3)
    assert G.at(0)[0, 0] == 0.25 and not G.samples[G.offsets != 0].any()


@pytest.mark.parametrize("index", range(7))
def test_closed_vs_numeric(index):
    spec = battery()[index]
    closed = greens_closed_form(spec, 20)
    numeric = greens_numeric(spec, 20)
    assert np.abs(closed.samples - numeric.samples).max() <= 1e-8
    assert np.abs(numeric.samples - numeric.samples[::-1]).max() <= 1e-10
    assert impulse_residual(closed, spec) <= 1e-10
    r = np.abs(closed.roots).max()
    norms = np.linalg.norm(closed.samples, axis=(1, 2))
    assert np.all(norms <= norms[20] * r ** np.abs(closed.offsets) * (1 + 1e-10))


def test_numeric_window():
    with pytest.raises(ValueError):
        greens_numeric(StencilSpec.scalar(2.5, 1.0), 20, N=60)
    G = greens_numeric(StencilSpec.scalar(2.5, 1.0), 20, N=101)
    assert G.samples.shape == (41, 1, 1)


def test_from_matrices():
    U = rotation(np.pi / 4)
    A0 = U @ np.diag([2.5, 3.0]) @ U.T
    A1 = U @ np.diag([1.0, 1.0]) @ U.T
    spec = StencilSpec.from_matrices(A0, A1)
    assert np.abs(spec.A0 - A0).max() <= 1e-14 and np.abs(spec.A1 - A1).max() <= 1e-14
    with pytest.raises(ValueError):
        StencilSpec.from_matrices(np.diag([2.0, 3.0]), np.array([[0.5, 0.2], [0.2, 0.1]]))


def test_diffusion_reaction_stencil():
    s = diffusion_reaction_stencil(1.0, 1.0, 1.0)
    assert s.alpha[0] == pytest.approx(3.0) and s.beta[0] == pytest.approx(-1.0)
    s = diffusion_reaction_stencil(np.diag([1.0, 2.0]), np.eye(2), 0.5)
    assert sorted(s.alpha) == pytest.approx([9.0, 17.0])
    assert sorted(s.beta) == pytest.approx([-8.0, -4.0])
    assert check_stability(s)
    margins = [diffusion_reaction_stencil(1.0, R, 1.0) for R in (1.0, 1e-2, 1e-4)]
    gaps = [m.alpha[0] - 2 * abs(m.beta[0]) for m in margins]
    assert gaps == pytest.approx([1.0, 1e-2, 1e-4])
    with pytest.raises(ValueError):
        diffusion_reaction_stencil(np.diag([1.0, 2.0]), np.array([[1.0, 0.3], [0.3, 1.0]]), 1.0)


def test_geometric_kernel():
    assert np.array_equal(geometric_kernel(2.0, 0.0, 8), [2.0, 0, 0, 0, 0, 0, 0, 0])
    g = geometric_kernel(1.0, 0.5, 16)
    assert g[3] == 0.125 and g[13] == 0.125
    g = geometric_kernel(1.0, 0.9, 256)
    off = np.minimum(np.arange(256), 256 - np.arange(256))
    assert np.sum(g[off <= 60] ** 2) / np.sum(g ** 2) > 0.999
    with pytest.raises(ValueError):
        geometric_kernel(1.0, 1.0, 8)
    assert np.array_equal(geometric_kernel(1.0, 0.5, 8, one_sided=True), 0.5 ** np.arange(8))


def test_truncation_examples():
    g = geometric_kernel(1.0, 0.9, 256, one_sided=True)
    rows = truncation_study(g, kinds=("usb", "random"), Ls=[5, 10, 20], seed=0)
    err = {(k, L): e for k, L, e in rows}
    assert err["usb", 5] >= err["usb", 10] >= err["usb", 20]
    assert err["usb", 20] * 10 <= err["random", 20]
    full = truncation_study(np.random.default_rng(0).standard_normal(32), Ls=[32])
    assert all(e <= 1e-10 for _, _, e in full)


def test_decay_ratios_greens():
    b = build_basis("usb", 256, 64)
    for spec in battery():
        g = greens_one_sided(spec, 256)
        ratios = decay_ratios(g, b)
        assert ratios and all(r <= 0.9 for _, r in ratios)


def test_modes_for_accuracy_golden():
    g = greens_one_sided(StencilSpec.scalar(2.5, 1.0), 256)
    b = build_basis("usb", 256, 256)
    rows = modes_for_accuracy(g, b, [1.0] + GOLDEN["eps"])
    assert rows[0] == (1.0, 0)
    Ls = [L for _, L in rows[1:]]
    assert Ls == GOLDEN["L"]
    slope, _, r2 = log_fit(GOLDEN["eps"], Ls)
    assert slope > 0 and r2 >= 0.9


def test_modes_saturated():
    g = np.random.default_rng(0).standard_normal(16)
    b = build_basis("usb", 16, 4)
    assert modes_for_accuracy(g, b, [1e-6]) == [(1e-6, None)]


def test_log_fit_exact_line():
    eps = [1e-1, 1e-2, 1e-3]
    slope, icept, r2 = log_fit(eps, [3, 5, 7])
    assert slope == pytest.approx(2.0) and icept == pytest.approx(1.0) and r2 == pytest.approx(1.0)
