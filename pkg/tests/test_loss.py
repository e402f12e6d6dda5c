import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import unit_rows
from fewmax.errors import CapacityError, DimensionError, ParameterError
from fewmax.loss import (
    NegativePolicy,
    anchor_contrastive_loss,
    anchor_loss_batch,
    fewmax_loss,
    select_worst,
    task_contrastive_loss,
    task_loss_batch,
)


def random_instance(rng, B, M, D):
    z = unit_rows(rng, B, D)
    za = unit_rows(rng, B, D)
    zhat = unit_rows(rng, B * M, D).reshape(B, M, D)
    partners = np.empty((B, M), dtype=int)
    for i in range(B):
        j = rng.integers(B - 1, size=M)
        partners[i] = j + (j >= i)
    lams = rng.uniform(size=(B, M))
    return z, za, zhat, partners, lams


def t(x):
    return torch.as_tensor(x, dtype=torch.float64)


class TestSingleSample:
    def test_anchor_matches_oracle(self, rng):
        f, fa, negs = unit_rows(rng, 1, 8)[0], unit_rows(rng, 1, 8)[0], unit_rows(rng, 5, 8)
        got = anchor_contrastive_loss(t(f), t(fa), t(negs))
        assert float(got) == pytest.approx(oracles.anchor_loss(f, fa, negs, 0.07), abs=1e-10)

    def test_task_matches_oracle(self, rng):
        xh, xi, xj, negs = unit_rows(rng, 1, 6)[0], unit_rows(rng, 1, 6)[0], unit_rows(rng, 1, 6)[0], unit_rows(rng, 4, 6)
        got = task_contrastive_loss(t(xh), t(xi), t(xj), t(negs), 0.3)
        assert float(got) == pytest.approx(oracles.task_loss(xh, xi, xj, negs, 0.3, 0.07), abs=1e-10)

    def test_lambda_one_is_plain_contrastive(self, rng):
        xh, xi, xj, negs = (t(unit_rows(rng, n, 6)) for n in (1, 1, 1, 4))
        full = task_contrastive_loss(xh[0], xi[0], xj[0], negs, 1.0)
        plain = anchor_contrastive_loss(xh[0], xi[0], negs)
        assert float(full) == pytest.approx(float(plain), abs=1e-12)

    def test_linear_in_lambda(self, rng):
        xh, xi, xj, negs = (t(unit_rows(rng, n, 6)) for n in (1, 1, 1, 4))
        ends = [float(task_contrastive_loss(xh[0], xi[0], xj[0], negs, lam)) for lam in (0.0, 1.0)]
        for lam in (0.2, 0.5, 0.9):
            got = float(task_contrastive_loss(xh[0], xi[0], xj[0], negs, lam))
            assert got == pytest.approx(lam * ends[1] + (1 - lam) * ends[0], abs=1e-12)

    def test_negative_order_irrelevant(self, rng):
        f, fa, negs = t(unit_rows(rng, 1, 8)[0]), t(unit_rows(rng, 1, 8)[0]), t(unit_rows(rng, 6, 8))
        a = anchor_contrastive_loss(f, fa, negs)
        b = anchor_contrastive_loss(f, fa, negs[torch.randperm(6)])
        assert float(a) == pytest.approx(float(b), abs=1e-12)

    def test_identical_negatives(self):
        # positive and k copies of the same logit: loss = log(1 + k)
        v = t([1.0, 0.0])
        got = anchor_contrastive_loss(v, v, torch.stack([v, v, v]))
        assert float(got) == pytest.approx(np.log(4.0), abs=1e-12)

    def test_empty_negatives(self):
        with pytest.raises(CapacityError):
            anchor_contrastive_loss(t([1.0, 0.0]), t([1.0, 0.0]), torch.zeros((0, 2), dtype=torch.float64))

    def test_bad_lambda_and_tau(self, rng):
        v = t(unit_rows(rng, 3, 4))
        with pytest.raises(ParameterError):
            task_contrastive_loss(v[0], v[1], v[2], v, 1.5)
        with pytest.raises(ParameterError):
            anchor_contrastive_loss(v[0], v[1], v, tau=0.0)


class TestBatched:
    @pytest.mark.parametrize("exclude_partner", [True, False])
    @pytest.mark.parametrize("use_anchor", [True, False])
    def test_matches_oracle(self, exclude_partner, use_anchor):
        rng = np.random.default_rng(5)
        for _ in range(25):
            B, M, D = rng.integers(3, 9), rng.integers(1, 5), rng.integers(2, 17)
            z, za, zhat, partners, lams = random_instance(rng, B, M, D)
            out = fewmax_loss(
                t(z), t(za) if use_anchor else None, t(zhat), partners, lams,
                negatives=NegativePolicy(exclude_partner=exclude_partner),
            )
            total, l_cls, l_tasks, m_stars = oracles.fewmax_total(
                z.tolist(), za.tolist(), zhat.tolist(), partners.tolist(), lams.tolist(), 0.07,
                exclude_partner=exclude_partner, use_anchor=use_anchor,
            )
            assert float(out.total) == pytest.approx(total, abs=1e-9)
            np.testing.assert_allclose(out.l_cl.numpy(), l_cls, atol=1e-9)
            np.testing.assert_allclose(out.l_task.numpy(), l_tasks, atol=1e-9)
            assert out.m_star.tolist() == m_stars

    def test_single_blend_selects_only_blend(self, rng):
        z, za, zhat, partners, lams = random_instance(rng, 5, 1, 8)
        out = fewmax_loss(t(z), t(za), t(zhat), partners, lams)
        assert (out.m_star == 0).all()
        expected = (out.l_cl + out.l_task[:, 0]).mean()
        assert float(out.total) == pytest.approx(float(expected), abs=1e-12)

    def test_total_at_least_anchor_term(self, rng):
        z, za, zhat, partners, lams = random_instance(rng, 6, 4, 8)
        out = fewmax_loss(t(z), t(za), t(zhat), partners, lams)
        assert float(out.total) >= float(out.l_cl.mean())
        assert float(out.total) >= float(out.l_task.max(dim=1).values.mean()) - 1e-12

    def test_batch_permutation_invariance(self, rng):
        z, za, zhat, partners, lams = random_instance(rng, 6, 3, 8)
        perm = rng.permutation(6)
        inv = np.argsort(perm)
        a = fewmax_loss(t(z), t(za), t(zhat), partners, lams)
        b = fewmax_loss(t(z[perm]), t(za[perm]), t(zhat[perm]), inv[partners[perm]], lams[perm])
        assert float(a.total) == pytest.approx(float(b.total), abs=1e-12)

    def test_blend_order_invariance(self, rng):
        z, za, zhat, partners, lams = random_instance(rng, 6, 4, 8)
        perm = rng.permutation(4)
        a = fewmax_loss(t(z), t(za), t(zhat), partners, lams)
        b = fewmax_loss(t(z), t(za), t(zhat[:, perm]), partners[:, perm], lams[:, perm])
        assert float(a.total) == pytest.approx(float(b.total), abs=1e-12)

    def test_all_terms_non_negative(self, rng):
        z, za, zhat, partners, lams = random_instance(rng, 8, 4, 16)
        out = fewmax_loss(t(z), t(za), t(zhat), partners, lams)
        assert (out.l_cl >= 0).all() and (out.l_task >= 0).all()

    def test_ties_resolve_to_lowest_index(self):
        l_task = torch.tensor([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0], [0.0, 1.0, 5.0]])
        assert select_worst(l_task).tolist() == [1, 0, 2]

    def test_duplicate_blends_pick_first(self, rng):
        z, za, zhat, partners, lams = random_instance(rng, 5, 1, 8)
        rep = np.repeat(zhat, 3, axis=1)
        out = fewmax_loss(t(z), t(za), t(rep), np.repeat(partners, 3, 1), np.repeat(lams, 3, 1))
        assert (out.m_star == 0).all()

    def test_batch_of_two_needs_partner_as_negative(self, rng):
        z, za, zhat, _, lams = random_instance(rng, 2, 1, 4)
        partners = np.array([[1], [0]])
        with pytest.raises(CapacityError):
            task_loss_batch(t(z), t(zhat), partners, lams)
        out = task_loss_batch(t(z), t(zhat), partners, lams, negatives=NegativePolicy(exclude_partner=False))
        assert torch.isfinite(out).all()

    def test_shape_mismatch(self, rng):
        z, _, zhat, partners, lams = random_instance(rng, 4, 2, 8)
        with pytest.raises(DimensionError):
            task_loss_batch(t(z[:, :4]), t(zhat), partners, lams)

    def test_anchor_batch_of_one(self):
        with pytest.raises(CapacityError):
            anchor_loss_batch(t([[1.0, 0.0]]), t([[1.0, 0.0]]))

    def test_unknown_negative_mode(self):
        with pytest.raises(ParameterError):
            NegativePolicy(mode="memory_bank")


class TestGradients:
    def test_finite_differences(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            B, M, D = 5, 3, 6
            z, za, zhat, partners, lams = random_instance(rng, B, M, D)
            zt, zht = t(z).requires_grad_(), t(zhat).requires_grad_()
            fewmax_loss(zt, t(za), zht, partners, lams).total.backward()

            def f(zz, zh):
                return float(fewmax_loss(t(zz), t(za), t(zh), partners, lams).total)

            h = 1e-5
            for arr, grad, which in ((z, zt.grad, 0), (zhat, zht.grad, 1)):
                num = np.zeros_like(arr)
                for idx in np.ndindex(arr.shape):
                    up, dn = arr.copy(), arr.copy()
                    up[idx] += h
                    dn[idx] -= h
                    args_up = (up, zhat) if which == 0 else (z, up)
                    args_dn = (dn, zhat) if which == 0 else (z, dn)
                    num[idx] = (f(*args_up) - f(*args_dn)) / (2 * h)
                rel = np.linalg.norm(num - grad.numpy()) / max(np.linalg.norm(num), 1e-12)
                assert rel < 1e-4

    def test_anchor_gets_no_gradient_through_loss(self, rng):
        z, za, zhat, partners, lams = random_instance(rng, 4, 2, 8)
        zat = t(za)
        out = fewmax_loss(t(z).requires_grad_(), zat, t(zhat), partners, lams)
        assert not zat.requires_grad and out.total.requires_grad


@settings(max_examples=60, deadline=None)
@given(
    B=st.integers(3, 8), M=st.integers(1, 4), D=st.integers(2, 16),
    seed=st.integers(0, 2**31), tau=st.floats(0.02, 2.0),
)
def test_property_matches_oracle(B, M, D, seed, tau):
    rng = np.random.default_rng(seed)
    z, za, zhat, partners, lams = random_instance(rng, B, M, D)
    out = fewmax_loss(t(z), t(za), t(zhat), partners, lams, tau=tau)
    total, *_ = oracles.fewmax_total(z.tolist(), za.tolist(), zhat.tolist(), partners.tolist(), lams.tolist(), tau)
    assert float(out.total) == pytest.approx(total, rel=1e-9, abs=1e-9)
    assert float(out.total) >= 0
