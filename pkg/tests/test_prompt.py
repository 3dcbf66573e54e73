import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_images, tiny_backbone
from vcpseg.errors import ConfigError, ShapeMismatch
from vcpseg.prompt import (
    PromptLearner,
    PromptTemplate,
    build_prompt_pair,
    encode_prompts,
    fuse_visual_context,
    mini_net_forward,
)


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestMiniNet:
    def test_zero_kernels(self):
        out = mini_net_forward(_rand(32), torch.zeros(2, 1, 3, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
        assert out.shape == (2, 32)
        assert torch.all(out == 0)

    def test_identity_kernel(self):
        x = _rand(32)
        w = torch.tensor([[[0.0, 1.0, 0.0]]], dtype=torch.float64)
        assert torch.equal(mini_net_forward(x, w, torch.zeros(1, dtype=torch.float64))[0], x)

    def test_box_kernel_hand_values(self):
        x = torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=torch.float64)
        w = torch.ones(1, 1, 3, dtype=torch.float64)
        out = mini_net_forward(x, w, torch.zeros(1, dtype=torch.float64))
        np.testing.assert_array_equal(out[0].numpy(), [3.0, 6.0, 9.0, 7.0])

    def test_bias_per_row_and_batching(self):
        x = _rand(3, 8)
        w = _rand(2, 1, 3, seed=1)
        b = torch.tensor([0.5, -1.0], dtype=torch.float64)
        out = mini_net_forward(x, w, b)
        assert out.shape == (3, 2, 8)
        for i in range(3):
            padded = np.r_[0.0, x[i].numpy(), 0.0]
            for r in range(2):
                k = w[r, 0].numpy()
                want = [padded[j : j + 3] @ k + b[r].item() for j in range(8)]
                np.testing.assert_allclose(out[i, r].numpy(), want, rtol=1e-12, atol=1e-12)


class TestFuseVisualContext:
    def test_identities(self):
        v, x = _rand(2, 16), _rand(2, 16, seed=1)
        assert torch.equal(fuse_visual_context(v, torch.zeros_like(x)), v)
        assert torch.equal(fuse_visual_context(torch.zeros_like(v), x), x)
        torch.testing.assert_close(fuse_visual_context(v, x) - v, x, rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            fuse_visual_context(_rand(2, 16), _rand(3, 16))


class TestBuildPromptPair:
    def setup_method(self):
        self.bb = tiny_backbone()

    def test_pair_differs_only_in_state_rows(self):
        normal, abnormal = build_prompt_pair(self.bb, PromptTemplate(), _rand(2, 32), deep_prompt_width=1)
        differ = (normal.rows != abnormal.rows).any(dim=1).nonzero().flatten().tolist()
        state_row = normal.token_span.stop - 1
        assert differ == [state_row]
        assert normal.eos_index == abnormal.eos_index

    def test_category_rows_hold_context(self):
        v = _rand(2, 32)
        normal, _ = build_prompt_pair(self.bb, PromptTemplate(), v, deep_prompt_width=1)
        assert len(normal.category_span) == 2
        assert torch.equal(normal.rows[normal.category_span.start : normal.category_span.stop], v)
        assert torch.all(normal.rows[normal.deep_prompt_span.start : normal.deep_prompt_span.stop] == 0)

    def test_other_state_pair(self):
        a = build_prompt_pair(self.bb, PromptTemplate(state_pair=("good", "damaged")), _rand(2, 32))
        b = build_prompt_pair(self.bb, PromptTemplate(state_pair=("perfect", "flawed")), _rand(2, 32))
        for x, y in zip(a, b):
            differ = (x.rows != y.rows).any(dim=1).nonzero().flatten().tolist()
            assert differ == [x.token_span.stop - 1]

    def test_wrong_category_width(self):
        with pytest.raises(ShapeMismatch):
            build_prompt_pair(self.bb, PromptTemplate(category_width=2), _rand(3, 32))


def hand_rolled_encoder(bb, seq, bank):
    """Layer loop written out directly against the block modules."""
    x = seq.rows + bb.text_pos
    n = len(seq.deep_prompt_span)
    mask = torch.full((77, 77), float("-inf"), dtype=x.dtype).triu(1)
    for i, block in enumerate(bb.text_blocks):
        if n:
            x = x.clone()
            x[seq.deep_prompt_span.start : seq.deep_prompt_span.stop] = bank[i]
        x = block(x, mask)
    e = torch.nn.functional.layer_norm(x[seq.eos_index], (x.shape[-1],), bb.ln_final_w, bb.ln_final_b)
    return e @ bb.text_proj


class TestEncodePrompts:
    def setup_method(self):
        self.bb = tiny_backbone()
        self.bank = [_rand(1, 32, seed=10 + i) for i in range(2)]
        self.pair = build_prompt_pair(self.bb, PromptTemplate(), _rand(2, 32), deep_prompt_width=1)

    def test_matches_hand_rolled_loop(self):
        got = encode_prompts(self.pair, self.bank, self.bb)
        assert got.shape == (2, 32)
        for k in range(2):
            torch.testing.assert_close(got[k], hand_rolled_encoder(self.bb, self.pair[k], self.bank), rtol=1e-12, atol=1e-12)

    def test_deep_prompt_live_at_every_depth(self):
        ref = encode_prompts(self.pair, self.bank, self.bb)
        for i in range(2):
            bank = [p.clone() for p in self.bank]
            bank[i] = bank[i] + 0.5 * _rand(1, 32, seed=99)  # a constant shift would be normalized away
            assert not torch.allclose(encode_prompts(self.pair, bank, self.bb), ref)

    def test_span_output_discarded(self):
        # whatever sits in the deep-prompt span before injection cannot matter
        seq = self.pair[0]
        rows = seq.rows.clone()
        rows[seq.deep_prompt_span.start] = 100.0
        a = encode_prompts(self.pair, self.bank, self.bb)
        b = encode_prompts((seq.with_rows(rows), self.pair[1]), self.bank, self.bb)
        assert torch.equal(a, b)

    def test_bank_mismatch(self):
        with pytest.raises(ConfigError):
            encode_prompts(self.pair, self.bank[:1], self.bb)
        with pytest.raises(ConfigError):
            encode_prompts(self.pair, [_rand(2, 32)] * 2, self.bb)

    def test_placement_dependency_pattern(self):
        """Pre placement lets prompt-token rows see P; post placement hides P from them."""
        v = _rand(2, 32)
        for placement, token_rows_depend in (("pre", True), ("post", False)):
            normal, _ = build_prompt_pair(self.bb, PromptTemplate(), v, 1, placement)
            def rows_after_layer1(p):
                x = self.bb.text_input(normal.rows).clone()
                x[normal.deep_prompt_span.start] = p
                return self.bb.text_layer(1, x)
            a, b = rows_after_layer1(self.bank[0][0]), rows_after_layer1(self.bank[0][0] + _rand(32, seed=98))
            tok = slice(normal.token_span.start, normal.token_span.stop)
            assert (not torch.equal(a[tok], b[tok])) == token_rows_depend
            assert not torch.equal(a[normal.eos_index], b[normal.eos_index])


class TestPromptLearner:
    def test_parameter_shapes_and_names(self):
        bb = tiny_backbone()
        pl = PromptLearner(bb, PromptTemplate(), deep_prompt_width=1)
        names = pl.named_tensors()
        assert set(names) == {"prompt.V", "prompt.P.0", "prompt.P.1", "prompt.mininet.w", "prompt.mininet.b"}
        assert names["prompt.V"].shape == (2, 32)
        assert names["prompt.P.0"].shape == (1, 32)
        assert names["prompt.mininet.w"].shape == (2, 1, 3)
        assert torch.all(names["prompt.mininet.b"] == 0)

    def test_initialization_scale(self):
        bb = tiny_backbone(text_width=256, joint_dim=256, text_heads=4)
        pl = PromptLearner(bb, PromptTemplate(category_width=8), deep_prompt_width=4, seed=3)
        vals = torch.cat([pl.V.flatten(), *[p.flatten() for p in pl.P]])
        assert abs(vals.mean().item()) < 0.002
        assert abs(vals.std().item() - 0.02) < 0.002

    def test_no_deep_prompts(self):
        pl = PromptLearner(tiny_backbone(), deep_prompt_width=0)
        assert len(pl.P) == 0 and "prompt.P.0" not in pl.named_tensors()

    def test_joint_dim_mismatch_needs_adapter(self):
        bb = tiny_backbone(joint_dim=16)
        with pytest.raises(ConfigError):
            PromptLearner(bb)
        pl = PromptLearner(bb, adapter=True).to(torch.float64)
        g = bb.encode_image(random_images(2)).global_embedding
        assert pl(bb, g).shape == (2, 2, 16)
        assert "prompt.adapter.w" in pl.named_tensors()

    def test_pre_vcp_conditions_on_image(self):
        bb = tiny_backbone()
        pl = PromptLearner(bb).to(torch.float64)
        g = bb.encode_image(random_images(2)).global_embedding
        f = pl(bb, g)
        assert f.shape == (2, 2, 32)
        assert not torch.allclose(f[0], f[1])

    def test_without_pre_vcp_is_image_independent(self):
        bb = tiny_backbone()
        pl = PromptLearner(bb, pre_vcp=False).to(torch.float64)
        g = bb.encode_image(random_images(2)).global_embedding
        assert torch.equal(pl(bb, g), pl(bb, None))

    def test_mininet_bias_is_normalized_away(self):
        """A per-row constant added to every feature is removed by each LayerNorm read."""
        bb = tiny_backbone()
        pl = PromptLearner(bb).to(torch.float64)
        g = bb.encode_image(random_images(1)).global_embedding
        before = pl(bb, g)
        with torch.no_grad():
            pl.mininet_b.add_(torch.tensor([0.3, -0.7], dtype=torch.float64))
        torch.testing.assert_close(pl(bb, g), before, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), width=st.integers(4, 40), rows=st.integers(1, 4))
def test_mininet_matches_numpy_convolution(seed, width, rows):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=width)
    w = rng.normal(size=(rows, 1, 3))
    b = rng.normal(size=rows)
    out = mini_net_forward(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy()
    for r in range(rows):
        want = np.convolve(np.r_[0.0, x, 0.0], w[r, 0][::-1], mode="valid") + b[r]
        np.testing.assert_allclose(out[r], want, rtol=1e-12, atol=1e-12)
